//! Sequence-to-sequence LSTM autoencoder whose parameters live in one flat
//! vector, so a hypernetwork can produce them.
//!
//! Layout (offsets in the flat vector, in order): encoder gate matrix
//! `4H x (D+H)` and bias `4H`, decoder gate matrix `4H x (D+H)` and bias
//! `4H`, output projection `D x H` and bias `D`. Gate rows are grouped
//! input / forget / candidate / output. The encoder's final hidden state is
//! the thought; the decoder starts from `h0 = thought, c0 = 0`, consumes a
//! zero frame first and then the previous frame (its own emission when
//! free-running, the target frame under teacher forcing).

use crate::error::{CoreError, Result};
use crate::numeric::{sigmoid, sigmoid_xent, NodeId, Tape};

/// One time-step of the stream: D reals (bit channels, then action channels).
pub type Frame = Vec<f64>;
/// An ordered run of frames sharing one width.
pub type Window = Vec<Frame>;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the
/// probability-space reconstruction loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Block offsets into the flat parameter vector for one autoencoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub d: usize,
    pub h: usize,
    pub thought_width: usize,
    pub enc_w: usize,
    pub enc_b: usize,
    pub dec_w: usize,
    pub dec_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    /// Total parameter count P.
    pub total: usize,
}

impl ParamLayout {
    /// `P = 2*[4H(D+H+1)] + H*D + D` for `thought_width == H`.
    pub fn new(d: usize, h: usize, thought_width: usize) -> Result<Self> {
        if d == 0 || h == 0 {
            return Err(CoreError::Invalid("layout dims must be >= 1".into()));
        }
        if thought_width != h {
            return Err(CoreError::Invalid(format!(
                "thought width {thought_width} != hidden size {h}; only the projection-free layout is supported"
            )));
        }
        let gate_w = 4 * h * (d + h);
        let gate_b = 4 * h;
        let enc_w = 0;
        let enc_b = enc_w + gate_w;
        let dec_w = enc_b + gate_b;
        let dec_b = dec_w + gate_w;
        let out_w = dec_b + gate_b;
        let out_b = out_w + d * h;
        let total = out_b + d;
        Ok(ParamLayout { d, h, thought_width, enc_w, enc_b, dec_w, dec_b, out_w, out_b, total })
    }

    /// Named blocks as `(name, offset, length)`, in flat-vector order.
    pub fn blocks(&self) -> [(&'static str, usize, usize); 6] {
        let gw = 4 * self.h * (self.d + self.h);
        let gb = 4 * self.h;
        [
            ("enc_w", self.enc_w, gw),
            ("enc_b", self.enc_b, gb),
            ("dec_w", self.dec_w, gw),
            ("dec_b", self.dec_b, gb),
            ("out_w", self.out_w, self.d * self.h),
            ("out_b", self.out_b, self.d),
        ]
    }

    /// Flat indices of the encoder and decoder forget-gate biases.
    pub fn forget_bias_indices(&self) -> impl Iterator<Item = usize> + '_ {
        let h = self.h;
        (self.enc_b + h..self.enc_b + 2 * h).chain(self.dec_b + h..self.dec_b + 2 * h)
    }

    pub fn check_params(&self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total {
            return Err(CoreError::shape(
                "autoencoder params",
                format!("{} values for layout of {}", flat.len(), self.total),
            ));
        }
        Ok(())
    }

    pub fn check_window(&self, window: &[Vec<f64>]) -> Result<()> {
        if window.is_empty() {
            return Err(CoreError::Invalid("empty window".into()));
        }
        for f in window {
            if f.len() != self.d {
                return Err(CoreError::shape(
                    "window",
                    format!("frame width {} for D={}", f.len(), self.d),
                ));
            }
        }
        Ok(())
    }
}

/// One gated LSTM update. `w` is `4H x (|x|+H)` row-major, `b` is `4H`;
/// returns `(h', c')`.
pub fn lstm_cell(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    w: &[f64],
    b: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let hs = h.len();
    if c.len() != hs || b.len() != 4 * hs || w.len() != 4 * hs * (x.len() + hs) {
        return Err(CoreError::shape(
            "lstm_cell",
            format!("|x|={}, |h|={}, |c|={}, |w|={}, |b|={}", x.len(), hs, c.len(), w.len(), b.len()),
        ));
    }
    let mut h2 = vec![0.0; hs];
    let mut c2 = vec![0.0; hs];
    lstm_cell_into(x, h, c, w, b, &mut h2, &mut c2);
    Ok((h2, c2))
}

fn lstm_cell_into(x: &[f64], h: &[f64], c: &[f64], w: &[f64], b: &[f64], h2: &mut [f64], c2: &mut [f64]) {
    let hs = h.len();
    let width = x.len() + hs;
    let gate = |row: usize| -> f64 {
        let r = &w[row * width..(row + 1) * width];
        let mut acc = b[row];
        for (wk, xk) in r[..x.len()].iter().zip(x) {
            acc += wk * xk;
        }
        for (wk, hk) in r[x.len()..].iter().zip(h) {
            acc += wk * hk;
        }
        acc
    };
    for j in 0..hs {
        let i = sigmoid(gate(j));
        let f = sigmoid(gate(hs + j));
        let g = gate(2 * hs + j).tanh();
        let o = sigmoid(gate(3 * hs + j));
        let cj = f * c[j] + i * g;
        c2[j] = cj;
        h2[j] = o * cj.tanh();
    }
}

/// Thought vector of a window: the encoder's final hidden state.
pub fn encode(window: &[Vec<f64>], flat: &[f64], layout: &ParamLayout) -> Result<Vec<f64>> {
    layout.check_params(flat)?;
    layout.check_window(window)?;
    let (h, w4) = (layout.h, 4 * layout.h);
    let enc_w = &flat[layout.enc_w..layout.enc_w + w4 * (layout.d + h)];
    let enc_b = &flat[layout.enc_b..layout.enc_b + w4];
    let mut hv = vec![0.0; h];
    let mut cv = vec![0.0; h];
    let mut h2 = vec![0.0; h];
    let mut c2 = vec![0.0; h];
    for frame in window {
        lstm_cell_into(frame, &hv, &cv, enc_w, enc_b, &mut h2, &mut c2);
        std::mem::swap(&mut hv, &mut h2);
        std::mem::swap(&mut cv, &mut c2);
    }
    Ok(hv)
}

fn project(h: &[f64], flat: &[f64], layout: &ParamLayout, logits: &mut [f64]) {
    let out_w = &flat[layout.out_w..layout.out_w + layout.d * layout.h];
    let out_b = &flat[layout.out_b..layout.out_b + layout.d];
    for r in 0..layout.d {
        let row = &out_w[r * layout.h..(r + 1) * layout.h];
        let mut acc = out_b[r];
        for (wk, hk) in row.iter().zip(h) {
            acc += wk * hk;
        }
        logits[r] = acc;
    }
}

fn decode_steps(
    thought: &[f64],
    targets: Option<&[Vec<f64>]>,
    l: usize,
    flat: &[f64],
    layout: &ParamLayout,
) -> Result<Vec<Vec<f64>>> {
    layout.check_params(flat)?;
    if thought.len() != layout.h {
        return Err(CoreError::shape(
            "decode",
            format!("thought width {} for H={}", thought.len(), layout.h),
        ));
    }
    if l == 0 {
        return Err(CoreError::Invalid("decode length must be >= 1".into()));
    }
    let (h, w4) = (layout.h, 4 * layout.h);
    let dec_w = &flat[layout.dec_w..layout.dec_w + w4 * (layout.d + h)];
    let dec_b = &flat[layout.dec_b..layout.dec_b + w4];
    let mut hv = thought.to_vec();
    let mut cv = vec![0.0; h];
    let mut h2 = vec![0.0; h];
    let mut c2 = vec![0.0; h];
    let mut prev = vec![0.0; layout.d];
    let mut out = Vec::with_capacity(l);
    for t in 0..l {
        lstm_cell_into(&prev, &hv, &cv, dec_w, dec_b, &mut h2, &mut c2);
        std::mem::swap(&mut hv, &mut h2);
        std::mem::swap(&mut cv, &mut c2);
        let mut logits = vec![0.0; layout.d];
        project(&hv, flat, layout, &mut logits);
        match targets {
            // Teacher forcing: the next step consumes the true frame, and the
            // raw logits are returned for the loss.
            Some(ts) => {
                prev.copy_from_slice(&ts[t]);
                out.push(logits);
            }
            // Free-running: feed back the emitted (squashed) frame.
            None => {
                for v in logits.iter_mut() {
                    *v = sigmoid(*v);
                }
                prev.copy_from_slice(&logits);
                out.push(logits);
            }
        }
    }
    Ok(out)
}

/// Free-running decode of `l` frames; every channel is sigmoid-squashed.
pub fn decode(thought: &[f64], l: usize, flat: &[f64], layout: &ParamLayout) -> Result<Vec<Vec<f64>>> {
    decode_steps(thought, None, l, flat, layout)
}

/// Teacher-forced decoder logits against `targets` (training/routing path).
pub fn decode_logits_tf(
    targets: &[Vec<f64>],
    thought: &[f64],
    flat: &[f64],
    layout: &ParamLayout,
) -> Result<Vec<Vec<f64>>> {
    layout.check_window(targets)?;
    decode_steps(thought, Some(targets), targets.len(), flat, layout)
}

fn split_counts(d: usize, action_count: usize) -> Result<usize> {
    if action_count > d {
        return Err(CoreError::Invalid(format!("{action_count} action channels for D={d}")));
    }
    Ok(d - action_count)
}

/// Reconstruction loss in probability space: mean sigmoid-cross-entropy over
/// bit channels plus mean squared error over the trailing `action_count`
/// channels, averaged over frames. Probabilities are clamped.
pub fn reconstruction_loss(
    window: &[Vec<f64>],
    reconstruction: &[Vec<f64>],
    action_count: usize,
) -> Result<f64> {
    if window.len() != reconstruction.len() || window.is_empty() {
        return Err(CoreError::shape(
            "reconstruction_loss",
            format!("{} target frames vs {} reconstructed", window.len(), reconstruction.len()),
        ));
    }
    let d = window[0].len();
    let bits = split_counts(d, action_count)?;
    let mut total = 0.0;
    for (t, p) in window.iter().zip(reconstruction) {
        if t.len() != d || p.len() != d {
            return Err(CoreError::shape("reconstruction_loss", "frame width"));
        }
        let mut frame = 0.0;
        if bits > 0 {
            let mut acc = 0.0;
            for (&tv, &pv) in t[..bits].iter().zip(&p[..bits]) {
                let pc = pv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                acc -= tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln();
            }
            frame += acc / bits as f64;
        }
        if action_count > 0 {
            let mut acc = 0.0;
            for (&tv, &pv) in t[bits..].iter().zip(&p[bits..]) {
                let e = tv - pv;
                acc += e * e;
            }
            frame += acc / action_count as f64;
        }
        total += frame;
    }
    Ok(total / window.len() as f64)
}

/// Same quantity computed from decoder logits (numerically stable form).
pub fn loss_from_logits(
    window: &[Vec<f64>],
    logits: &[Vec<f64>],
    action_count: usize,
) -> Result<f64> {
    if window.len() != logits.len() || window.is_empty() {
        return Err(CoreError::shape("loss_from_logits", "frame count"));
    }
    let d = window[0].len();
    let bits = split_counts(d, action_count)?;
    let mut total = 0.0;
    for (t, z) in window.iter().zip(logits) {
        let mut frame = 0.0;
        if bits > 0 {
            let mut acc = 0.0;
            for (&tv, &zv) in t[..bits].iter().zip(&z[..bits]) {
                acc += sigmoid_xent(zv, tv);
            }
            frame += acc / bits as f64;
        }
        if action_count > 0 {
            let mut acc = 0.0;
            for (&tv, &zv) in t[bits..].iter().zip(&z[bits..]) {
                let e = sigmoid(zv) - tv;
                acc += e * e;
            }
            frame += acc / action_count as f64;
        }
        total += frame;
    }
    Ok(total / window.len() as f64)
}

/// Autoencoding loss of one window under flat params: encode, teacher-forced
/// decode, loss. This is the quantity routing and training minimize.
pub fn window_loss(
    window: &[Vec<f64>],
    flat: &[f64],
    layout: &ParamLayout,
    action_count: usize,
) -> Result<f64> {
    window_loss_with_targets(window, window, flat, layout, action_count)
}

/// Variant with distinct input and target windows (denoising, prediction).
pub fn window_loss_with_targets(
    input: &[Vec<f64>],
    targets: &[Vec<f64>],
    flat: &[f64],
    layout: &ParamLayout,
    action_count: usize,
) -> Result<f64> {
    let thought = encode(input, flat, layout)?;
    let logits = decode_logits_tf(targets, &thought, flat, layout)?;
    loss_from_logits(targets, &logits, action_count)
}

// ---------------------------------------------------------------------------
// Tape builders (training path). These mirror the pure functions above; the
// equality of the two paths is asserted in tests.

/// Node ids of one autoencoder's parameter blocks, sliced from a flat node.
#[derive(Clone, Copy, Debug)]
pub struct AeNodes {
    pub enc_w: NodeId,
    pub enc_b: NodeId,
    pub dec_w: NodeId,
    pub dec_b: NodeId,
    pub out_w: NodeId,
    pub out_b: NodeId,
}

pub fn slice_ae(tape: &mut Tape, flat: NodeId, layout: &ParamLayout) -> Result<AeNodes> {
    let (d, h) = (layout.d, layout.h);
    Ok(AeNodes {
        enc_w: tape.slice(flat, layout.enc_w, 4 * h, d + h)?,
        enc_b: tape.slice(flat, layout.enc_b, 4 * h, 1)?,
        dec_w: tape.slice(flat, layout.dec_w, 4 * h, d + h)?,
        dec_b: tape.slice(flat, layout.dec_b, 4 * h, 1)?,
        out_w: tape.slice(flat, layout.out_w, d, h)?,
        out_b: tape.slice(flat, layout.out_b, d, 1)?,
    })
}

/// One LSTM step on the tape; `w` is `4H x (|x|+H)`, returns `(h', c')`.
pub fn tape_lstm_step(
    tape: &mut Tape,
    w: NodeId,
    b: NodeId,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    hsize: usize,
) -> Result<(NodeId, NodeId)> {
    let xh = tape.concat(x, h)?;
    let z = tape.matvec(w, xh)?;
    let z = tape.add(z, b)?;
    let i = tape.slice(z, 0, hsize, 1)?;
    let i = tape.sigmoid_node(i);
    let f = tape.slice(z, hsize, hsize, 1)?;
    let f = tape.sigmoid_node(f);
    let g = tape.slice(z, 2 * hsize, hsize, 1)?;
    let g = tape.tanh_node(g);
    let o = tape.slice(z, 3 * hsize, hsize, 1)?;
    let o = tape.sigmoid_node(o);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c2 = tape.add(fc, ig)?;
    let tc = tape.tanh_node(c2);
    let h2 = tape.mul(o, tc)?;
    Ok((h2, c2))
}

/// Encoder graph over a window; returns the thought node.
pub fn build_encode(
    tape: &mut Tape,
    ae: &AeNodes,
    window: &[Vec<f64>],
    layout: &ParamLayout,
) -> Result<NodeId> {
    layout.check_window(window)?;
    let mut h = tape.leaf_vector(vec![0.0; layout.h]);
    let mut c = tape.leaf_vector(vec![0.0; layout.h]);
    for frame in window {
        let x = tape.leaf_vector(frame.clone());
        (h, c) = tape_lstm_step(tape, ae.enc_w, ae.enc_b, x, h, c, layout.h)?;
    }
    Ok(h)
}

/// Teacher-forced decoder + loss graph from a thought node.
pub fn build_decode_loss(
    tape: &mut Tape,
    ae: &AeNodes,
    thought: NodeId,
    targets: &[Vec<f64>],
    layout: &ParamLayout,
    action_count: usize,
) -> Result<NodeId> {
    layout.check_window(targets)?;
    let bits = split_counts(layout.d, action_count)?;
    let l = targets.len();
    let mut h = thought;
    let mut c = tape.leaf_vector(vec![0.0; layout.h]);
    let mut prev = tape.leaf_vector(vec![0.0; layout.d]);
    let mut total: Option<NodeId> = None;
    for target in targets {
        (h, c) = tape_lstm_step(tape, ae.dec_w, ae.dec_b, prev, h, c, layout.h)?;
        let z = tape.matvec(ae.out_w, h)?;
        let z = tape.add(z, ae.out_b)?;
        if bits > 0 {
            let zb = tape.slice(z, 0, bits, 1)?;
            let tb = tape.leaf_vector(target[..bits].to_vec());
            let xe = tape.sigmoid_xent_sum(zb, tb)?;
            let xe = tape.scale(xe, 1.0 / (bits * l) as f64);
            total = Some(match total {
                Some(acc) => tape.add(acc, xe)?,
                None => xe,
            });
        }
        if action_count > 0 {
            let za = tape.slice(z, bits, action_count, 1)?;
            let pa = tape.sigmoid_node(za);
            let ta = tape.leaf_vector(target[bits..].to_vec());
            let se = tape.squared_error(pa, ta)?;
            let se = tape.scale(se, 1.0 / (action_count * l) as f64);
            total = Some(match total {
                Some(acc) => tape.add(acc, se)?,
                None => se,
            });
        }
        prev = tape.leaf_vector(target.clone());
    }
    total.ok_or_else(|| CoreError::Invalid("loss over zero channels".into()))
}

/// Full autoencoding-loss graph for one window on flat parameter node `flat`.
pub fn build_window_loss(
    tape: &mut Tape,
    flat: NodeId,
    window: &[Vec<f64>],
    layout: &ParamLayout,
    action_count: usize,
) -> Result<NodeId> {
    build_window_loss_with_targets(tape, flat, window, window, layout, action_count)
}

pub fn build_window_loss_with_targets(
    tape: &mut Tape,
    flat: NodeId,
    input: &[Vec<f64>],
    targets: &[Vec<f64>],
    layout: &ParamLayout,
    action_count: usize,
) -> Result<NodeId> {
    if tape.shape(flat).len() != layout.total {
        return Err(CoreError::shape(
            "autoencoder params",
            format!("{} values for layout of {}", tape.shape(flat).len(), layout.total),
        ));
    }
    let ae = slice_ae(tape, flat, layout)?;
    let thought = build_encode(tape, &ae, input, layout)?;
    build_decode_loss(tape, &ae, thought, targets, layout, action_count)
}
