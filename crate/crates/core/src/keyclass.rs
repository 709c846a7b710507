//! Seq2vec key classifier: maps a window straight to a 64-element key so
//! candidate programs can be fetched from vector memory instead of scoring
//! every program in the bank.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bank::ProgramBank;
use crate::error::{CoreError, Result};
use crate::numeric::{clip_global_norm, Adam, AdamState, Shape, Tape, GRAD_CLIP_NORM};
use crate::seqae::{self, Frame, Window};
use crate::stretcher::{fan_in_uniform, sample_embedding};
use crate::vmem::{Payload, VectorMemory, KEY_WIDTH};

pub const KEY_HIDDEN: usize = 32;
/// Joint training hands over to keys-only once the classifier's parameter
/// movement per epoch drops below this.
pub const PHASE_SWITCH_DELTA: f64 = 1e-4;

/// One-layer LSTM over the frames plus a linear head onto the key space.
/// The parameter count is fixed by `d` at construction and never changes.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyClassifier {
    pub d: usize,
    pub params: Vec<f64>,
}

impl KeyClassifier {
    pub fn param_count(d: usize) -> usize {
        let h = KEY_HIDDEN;
        4 * h * (d + h) + 4 * h + KEY_WIDTH * h + KEY_WIDTH
    }

    /// `(name, offset, rows, cols)` per block, flat-vector order.
    fn blocks(d: usize) -> [(&'static str, usize, usize, usize); 4] {
        let h = KEY_HIDDEN;
        let lstm_w = 4 * h * (d + h);
        [
            ("classifier.lstm_w", 0, 4 * h, d + h),
            ("classifier.lstm_b", lstm_w, 4 * h, 1),
            ("classifier.head_w", lstm_w + 4 * h, KEY_WIDTH, h),
            ("classifier.head_b", lstm_w + 4 * h + KEY_WIDTH * h, KEY_WIDTH, 1),
        ]
    }

    pub fn new(d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(CoreError::Invalid("classifier needs d >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = KEY_HIDDEN;
        let mut params = fan_in_uniform(&mut rng, 4 * h, d + h);
        params.extend(vec![0.0; 4 * h]);
        params.extend(fan_in_uniform(&mut rng, KEY_WIDTH, h));
        params.extend(vec![0.0; KEY_WIDTH]);
        debug_assert_eq!(params.len(), Self::param_count(d));
        Ok(KeyClassifier { d, params })
    }

    pub fn zeroed(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(CoreError::Invalid("classifier needs d >= 1".into()));
        }
        Ok(KeyClassifier { d, params: vec![0.0; Self::param_count(d)] })
    }

    fn block_slice(&self, i: usize) -> &[f64] {
        let b = Self::blocks(self.d);
        let (_, off, rows, cols) = b[i];
        &self.params[off..off + rows * cols]
    }

    /// Deterministic window-to-key map: final LSTM state through the head.
    pub fn classify(&self, window: &[Frame]) -> Result<Vec<f64>> {
        if window.is_empty() {
            return Err(CoreError::Invalid("empty window".into()));
        }
        let h = KEY_HIDDEN;
        let (lstm_w, lstm_b) = (self.block_slice(0), self.block_slice(1));
        let mut hid = vec![0.0; h];
        let mut cell = vec![0.0; h];
        for frame in window {
            if frame.len() != self.d {
                return Err(CoreError::Invalid(format!(
                    "frame width {} != D={}",
                    frame.len(),
                    self.d
                )));
            }
            (hid, cell) = seqae::lstm_cell(frame, &hid, &cell, lstm_w, lstm_b)?;
        }
        let (head_w, head_b) = (self.block_slice(2), self.block_slice(3));
        let mut key = head_b.to_vec();
        for (r, out) in key.iter_mut().enumerate() {
            let row = &head_w[r * h..(r + 1) * h];
            for (w, x) in row.iter().zip(&hid) {
                *out += w * x;
            }
        }
        Ok(key)
    }
}

/// Seeds any missing program keys with standard-normal vectors.
pub fn init_keys(bank: &mut ProgramBank, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in bank.programs.iter_mut() {
        if p.key.is_none() {
            p.key = Some(sample_embedding(&mut rng));
        }
    }
}

/// Publishes every program's key into memory as a `Program` record,
/// replacing any record already standing for that program.
pub fn write_program_keys(bank: &ProgramBank, memory: &mut VectorMemory) -> Result<usize> {
    let stale: Vec<u64> = memory
        .iter()
        .filter_map(|r| match r.payload {
            Payload::Program { .. } => Some(r.id),
            _ => None,
        })
        .collect();
    let mut written = 0;
    for p in &bank.programs {
        let key = p.key.as_ref().ok_or_else(|| {
            CoreError::Invalid(format!("program {} has no key; run init_keys first", p.id))
        })?;
        for &id in &stale {
            if matches!(memory.get(id).map(|r| &r.payload), Some(Payload::Program { program }) if *program as usize == p.id)
            {
                memory.delete(id);
            }
        }
        memory.write(key.clone(), Payload::Program { program: p.id as u32 })?;
        written += 1;
    }
    Ok(written)
}

/// Candidate program ids nearest the classified key, distance order.
pub fn retrieve_programs(
    window: &[Frame],
    clf: &KeyClassifier,
    memory: &VectorMemory,
    k: usize,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(CoreError::Invalid("k must be >= 1".into()));
    }
    let key = clf.classify(window)?;
    if memory.is_empty() {
        return Ok(Vec::new());
    }
    let hits = memory.read_filtered(&key, k, |p| matches!(p, Payload::Program { .. }))?;
    Ok(hits
        .into_iter()
        .filter_map(|(_, r)| match r.payload {
            Payload::Program { program } => Some(program as usize),
            _ => None,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainPhase {
    /// Classifier and the routed programs' keys move together.
    Joint,
    /// Classifier frozen; only keys move.
    KeysOnly,
}

#[derive(Clone, Debug)]
pub struct RetrievalMetrics {
    pub mean_loss: f64,
    /// L2 norm of the classifier's parameter change over the epoch.
    pub classifier_delta: f64,
}

pub struct KeyTrainer {
    opt: Adam,
    clf_states: [AdamState; 4],
    key_states: Vec<AdamState>,
    pub batch_size: usize,
}

impl KeyTrainer {
    pub fn new(lr: f64, d: usize) -> Self {
        let blocks = KeyClassifier::blocks(d);
        KeyTrainer {
            opt: Adam::new(lr),
            clf_states: blocks.map(|(_, _, rows, cols)| AdamState::new(rows * cols)),
            key_states: Vec::new(),
            batch_size: 16,
        }
    }

    /// One epoch of retrieval training: every window's classified key is
    /// pulled toward the key of the program that wins the routing, and (in
    /// the joint phase) vice versa.
    pub fn train_retrieval(
        &mut self,
        windows: &[Window],
        bank: &mut ProgramBank,
        clf: &mut KeyClassifier,
        phase: TrainPhase,
    ) -> Result<RetrievalMetrics> {
        if windows.is_empty() {
            return Err(CoreError::Invalid("empty window set".into()));
        }
        if clf.d != bank.layout.d {
            return Err(CoreError::Invalid(format!(
                "classifier width {} != bank width {}",
                clf.d, bank.layout.d
            )));
        }
        while self.key_states.len() < bank.len() {
            self.key_states.push(AdamState::new(KEY_WIDTH));
        }
        let flats = bank.stretched_all()?;
        let mut argmins = Vec::with_capacity(windows.len());
        for w in windows {
            let r = bank.route_with(w, &flats)?;
            if bank.programs[r.argmin].key.is_none() {
                return Err(CoreError::Invalid(format!(
                    "program {} has no key; run init_keys first",
                    r.argmin
                )));
            }
            argmins.push(r.argmin);
        }

        let before = clf.params.clone();
        let blocks = KeyClassifier::blocks(clf.d);
        let mut loss_acc = 0.0;
        let mut batches = 0u32;
        for chunk_start in (0..windows.len()).step_by(self.batch_size.max(1)) {
            let chunk = chunk_start..(chunk_start + self.batch_size.max(1)).min(windows.len());
            let mut tape = Tape::new();
            let mut clf_nodes = [None; 4];
            for (i, &(_, off, rows, cols)) in blocks.iter().enumerate() {
                clf_nodes[i] = Some(tape.leaf(
                    clf.params[off..off + rows * cols].to_vec(),
                    Shape::matrix(rows, cols),
                )?);
            }
            let clf_nodes: Vec<_> = clf_nodes.into_iter().map(|n| n.unwrap()).collect();
            let mut key_nodes: BTreeMap<usize, _> = BTreeMap::new();
            for &p in &argmins[chunk.clone()] {
                key_nodes.entry(p).or_insert_with(|| {
                    tape.leaf_vector(bank.programs[p].key.clone().expect("checked above"))
                });
            }

            let mut total = None;
            for i in chunk.clone() {
                let mut h = tape.leaf_vector(vec![0.0; KEY_HIDDEN]);
                let mut c = tape.leaf_vector(vec![0.0; KEY_HIDDEN]);
                for frame in &windows[i] {
                    let x = tape.leaf_vector(frame.clone());
                    (h, c) = seqae::tape_lstm_step(
                        &mut tape,
                        clf_nodes[0],
                        clf_nodes[1],
                        x,
                        h,
                        c,
                        KEY_HIDDEN,
                    )?;
                }
                let proj = tape.matvec(clf_nodes[2], h)?;
                let key_hat = tape.add(proj, clf_nodes[3])?;
                let loss = tape.squared_error(key_hat, key_nodes[&argmins[i]])?;
                total = Some(match total {
                    None => loss,
                    Some(t) => tape.add(t, loss)?,
                });
            }
            let loss = tape.scale(total.expect("nonempty chunk"), 1.0 / chunk.len() as f64);
            tape.forward()?;
            let lv = tape.scalar(loss);
            if !lv.is_finite() {
                return Err(CoreError::NonFiniteLoss(lv));
            }
            tape.backward(loss)?;

            let mut clf_grads: Vec<Vec<f64>> =
                clf_nodes.iter().map(|&n| tape.grad(n).to_vec()).collect();
            let mut key_grads: Vec<(usize, Vec<f64>)> =
                key_nodes.iter().map(|(&p, &n)| (p, tape.grad(n).to_vec())).collect();

            let mut clip: Vec<&mut [f64]> = Vec::new();
            if phase == TrainPhase::Joint {
                for g in clf_grads.iter_mut() {
                    clip.push(g.as_mut_slice());
                }
            }
            for (_, g) in key_grads.iter_mut() {
                clip.push(g.as_mut_slice());
            }
            clip_global_norm(&mut clip, GRAD_CLIP_NORM);

            if phase == TrainPhase::Joint {
                for (i, &(name, off, rows, cols)) in blocks.iter().enumerate() {
                    self.opt.step(
                        name,
                        &mut clf.params[off..off + rows * cols],
                        &clf_grads[i],
                        &mut self.clf_states[i],
                    )?;
                }
            }
            for (p, g) in &key_grads {
                let key = bank.programs[*p].key.as_mut().expect("checked above");
                self.opt.step(&format!("key.{p}"), key, g, &mut self.key_states[*p])?;
            }
            loss_acc += lv;
            batches += 1;
        }

        let classifier_delta = clf
            .params
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Ok(RetrievalMetrics { mean_loss: loss_acc / f64::from(batches), classifier_delta })
    }

    /// Runs joint epochs until the classifier stabilizes (delta below
    /// `switch_delta`), then keys-only epochs for the remainder.
    pub fn fit_retrieval(
        &mut self,
        windows: &[Window],
        bank: &mut ProgramBank,
        clf: &mut KeyClassifier,
        epochs: usize,
        switch_delta: f64,
    ) -> Result<Vec<RetrievalMetrics>> {
        let mut phase = TrainPhase::Joint;
        let mut rows = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let m = self.train_retrieval(windows, bank, clf, phase)?;
            if phase == TrainPhase::Joint && m.classifier_delta < switch_delta {
                phase = TrainPhase::KeysOnly;
            }
            rows.push(m);
        }
        Ok(rows)
    }
}
