//! The stream controller: buffers incoming frames, segments them into
//! windows, consolidates into the program bank and vector memory with
//! generative replay, and answers recall / prediction / continuation /
//! explain-away queries on top of the trained pieces.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bank::{grow, GrowthEvent, GrowthPolicy, ProgramBank, Trainer};
use crate::error::{CoreError, Result};
use crate::numeric::sigmoid;
use crate::seqae::{self, Frame, Window};
use crate::stretcher::EMBED_WIDTH;
use crate::vmem::{pad_key, Payload, VectorMemory};

pub const BUFFER_CAPACITY: usize = 4096;
pub const REPLAY_RATIO: f64 = 0.3;
pub const EXPLAIN_AWAY_EPS: f64 = 1e-3;
/// Most calls explain-away will stack onto one window.
pub const EXPLAIN_AWAY_CAP: usize = 8;

/// Fixed-capacity frame queue between the stream and consolidation.
#[derive(Clone, Debug)]
pub struct StreamBuffer {
    frames: VecDeque<Frame>,
    capacity: usize,
    d: usize,
    /// Absolute stream index of the front frame.
    position: u64,
}

impl StreamBuffer {
    pub fn new(d: usize, capacity: usize) -> Result<Self> {
        if d == 0 || capacity == 0 {
            return Err(CoreError::Invalid("buffer needs d >= 1 and capacity >= 1".into()));
        }
        Ok(StreamBuffer { frames: VecDeque::with_capacity(capacity), capacity, d, position: 0 })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.frames.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn push(&mut self, frame: Frame) -> Result<()> {
        if frame.len() != self.d {
            return Err(CoreError::Invalid(format!(
                "frame width {} != D={}",
                frame.len(),
                self.d
            )));
        }
        if self.is_full() {
            return Err(CoreError::Invalid("buffer full; consolidate first".into()));
        }
        self.frames.push_back(frame);
        Ok(())
    }

    /// Pops complete length-`l` windows off the front, each tagged with its
    /// absolute start position; any remainder shorter than `l` stays queued.
    pub fn drain_windows(&mut self, l: usize) -> Result<Vec<(u64, Window)>> {
        if l == 0 {
            return Err(CoreError::Invalid("window length must be >= 1".into()));
        }
        let n = self.frames.len() / l;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let start = self.position;
            let mut w = Vec::with_capacity(l);
            for _ in 0..l {
                w.push(self.frames.pop_front().expect("counted above"));
                self.position += 1;
            }
            out.push((start, w));
        }
        Ok(out)
    }
}

/// Contiguous `(start, length)` spans tiling a frame range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    pub spans: Vec<(usize, usize)>,
}

impl Segmentation {
    /// Confirms the spans tile `0..len` in order with no gaps or overlaps.
    pub fn check(&self, len: usize) -> Result<()> {
        let mut at = 0;
        for &(start, l) in &self.spans {
            if start != at || l == 0 {
                return Err(CoreError::Invalid(format!(
                    "span ({start},{l}) breaks the tiling at {at}"
                )));
            }
            at += l;
        }
        if at != len {
            return Err(CoreError::Invalid(format!("spans cover {at} of {len} frames")));
        }
        Ok(())
    }
}

/// Consecutive spans of length `l`; a trailing remainder is dropped.
pub fn segment_fixed(len: usize, l: usize) -> Result<Segmentation> {
    if l == 0 {
        return Err(CoreError::Invalid("span length must be >= 1".into()));
    }
    Ok(Segmentation { spans: (0..len / l).map(|i| (i * l, l)).collect() })
}

/// Minimum-cost tiling of `0..len` by spans whose lengths come from
/// `allowed`, via prefix dynamic programming with backtracking. Cost ties
/// break toward longer spans.
pub fn segment_dp(
    len: usize,
    allowed: &[usize],
    mut cost: impl FnMut(usize, usize) -> f64,
) -> Result<Segmentation> {
    if allowed.is_empty() {
        return Err(CoreError::Invalid("allowed lengths must be nonempty".into()));
    }
    if allowed.contains(&0) {
        return Err(CoreError::Invalid("allowed lengths must be >= 1".into()));
    }
    let mut lens = allowed.to_vec();
    lens.sort_unstable();
    lens.dedup();
    let mut best = vec![f64::INFINITY; len + 1];
    let mut back = vec![0usize; len + 1];
    best[0] = 0.0;
    for i in 1..=len {
        for &l in &lens {
            if l > i || !best[i - l].is_finite() {
                continue;
            }
            let c = best[i - l] + cost(i - l, l);
            // `<=` with lengths ascending leaves the longest span on ties.
            if c <= best[i] {
                best[i] = c;
                back[i] = l;
            }
        }
    }
    if !best[len].is_finite() {
        return Err(CoreError::Invalid(format!(
            "range of {len} frames not coverable by spans of {lens:?}"
        )));
    }
    let mut spans = Vec::new();
    let mut i = len;
    while i > 0 {
        let l = back[i];
        spans.push((i - l, l));
        i -= l;
    }
    spans.reverse();
    Ok(Segmentation { spans })
}

/// One row of the consolidation metrics log.
#[derive(Clone, Debug)]
pub struct ConsolidationMetrics {
    pub step: u64,
    pub mean_min_loss: f64,
    pub n_programs: usize,
    pub replay_fraction: f64,
    pub buffer_fill: f64,
}

pub fn metrics_csv(rows: &[ConsolidationMetrics]) -> String {
    let mut out = String::from("step,mean_min_loss,n_programs,replay_fraction,buffer_fill\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.mean_min_loss, r.n_programs, r.replay_fraction, r.buffer_fill
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct LifelongSettings {
    pub window_len: usize,
    pub buffer_capacity: usize,
    /// Fraction of each training batch reconstructed from memory.
    pub replay_ratio: f64,
    /// Passes over the drained windows per consolidation.
    pub train_passes: usize,
    pub grow_on_consolidate: bool,
    pub lr: f64,
    pub seed: u64,
    pub policy: GrowthPolicy,
}

impl Default for LifelongSettings {
    fn default() -> Self {
        LifelongSettings {
            window_len: 7,
            buffer_capacity: BUFFER_CAPACITY,
            replay_ratio: REPLAY_RATIO,
            train_passes: 1,
            grow_on_consolidate: true,
            lr: 1e-2,
            seed: 0,
            policy: GrowthPolicy::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictMode {
    Average,
    Multi,
}

impl std::str::FromStr for PredictMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(PredictMode::Average),
            "multi" => Ok(PredictMode::Multi),
            other => Err(CoreError::Invalid(format!("unknown prediction mode {other:?}"))),
        }
    }
}

/// The whole engine: bank + trainer + memory + buffer and the knobs that
/// drive consolidation. Labels never enter through this type.
pub struct Lifelong {
    pub bank: ProgramBank,
    pub trainer: Trainer,
    pub memory: VectorMemory,
    pub buffer: StreamBuffer,
    pub window_len: usize,
    pub replay_ratio: f64,
    pub train_passes: usize,
    pub grow_on_consolidate: bool,
    pub policy: GrowthPolicy,
    /// Cumulative consolidation-loop training steps.
    pub step: u64,
    pub metrics: Vec<ConsolidationMetrics>,
    pub growth_events: Vec<GrowthEvent>,
    rng: ChaCha8Rng,
}

impl Lifelong {
    pub fn new(bank: ProgramBank, settings: LifelongSettings) -> Result<Self> {
        let memory = VectorMemory::new(settings.seed);
        Self::with_memory(bank, memory, settings)
    }

    /// Resume lifelong operation over a memory that already holds records,
    /// e.g. one loaded from a model file.
    pub fn with_memory(
        bank: ProgramBank,
        memory: VectorMemory,
        settings: LifelongSettings,
    ) -> Result<Self> {
        if settings.window_len == 0 {
            return Err(CoreError::Invalid("window length must be >= 1".into()));
        }
        if settings.window_len > settings.buffer_capacity {
            return Err(CoreError::Invalid(format!(
                "window length {} exceeds buffer capacity {}",
                settings.window_len, settings.buffer_capacity
            )));
        }
        if !(0.0..=1.0).contains(&settings.replay_ratio) {
            return Err(CoreError::Invalid(format!(
                "replay ratio {} outside [0, 1]",
                settings.replay_ratio
            )));
        }
        if settings.train_passes == 0 {
            return Err(CoreError::Invalid("train passes must be >= 1".into()));
        }
        let trainer = Trainer::new(settings.lr, &bank);
        let buffer = StreamBuffer::new(bank.layout.d, settings.buffer_capacity)?;
        Ok(Lifelong {
            trainer,
            buffer,
            memory,
            window_len: settings.window_len,
            replay_ratio: settings.replay_ratio,
            train_passes: settings.train_passes,
            grow_on_consolidate: settings.grow_on_consolidate,
            policy: settings.policy,
            step: 0,
            metrics: Vec::new(),
            growth_events: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(settings.seed),
            bank,
        })
    }

    /// Appends frames, consolidating whenever the buffer fills.
    pub fn ingest(&mut self, frames: &[Frame]) -> Result<()> {
        for f in frames {
            if self.buffer.is_full() {
                self.consolidate()?;
            }
            self.buffer.push(f.clone())?;
        }
        Ok(())
    }

    /// Consolidates whatever complete windows remain buffered.
    pub fn flush(&mut self) -> Result<Option<ConsolidationMetrics>> {
        if self.buffer.len() < self.window_len {
            return Ok(None);
        }
        self.consolidate().map(Some)
    }

    /// Drains the buffer into windows, trains the bank on batches that mix
    /// fresh windows with replayed reconstructions from memory, optionally
    /// grows the bank, and writes every fresh window into memory as an
    /// episodic record keyed by its thought vector.
    pub fn consolidate(&mut self) -> Result<ConsolidationMetrics> {
        let fill = self.buffer.len() as f64 / self.buffer.capacity() as f64;
        let drained = self.buffer.drain_windows(self.window_len)?;
        if drained.is_empty() {
            return Err(CoreError::Invalid("no complete window to consolidate".into()));
        }
        let fresh: Vec<Window> = drained.iter().map(|(_, w)| w.clone()).collect();

        // Replay windows are decoded with the parameters as they stand on
        // entry, so they anchor what the bank knew before this round of
        // training rather than drifting along with it.
        let entry_flats = self.bank.stretched_all()?;
        let replay_pool: Vec<(u32, Vec<f64>)> = self
            .memory
            .iter()
            .filter_map(|rec| match &rec.payload {
                Payload::Episodic { program, thought, .. } => Some((*program, thought.clone())),
                _ => None,
            })
            .collect();
        let batch_size = self.policy.batch_size.max(1);
        let n_replay = if replay_pool.is_empty() {
            0
        } else {
            ((self.replay_ratio * batch_size as f64).round() as usize).min(batch_size)
        };
        let fresh_per_batch = batch_size - n_replay;

        let mut loss_acc = 0.0;
        let mut batches = 0u64;
        let mut replay_used = 0usize;
        let mut total_used = 0usize;
        for _ in 0..self.train_passes {
            let mut order: Vec<usize> = (0..fresh.len()).collect();
            order.shuffle(&mut self.rng);
            let chunks: Vec<&[usize]> = if fresh_per_batch == 0 {
                (0..fresh.len().div_ceil(batch_size)).map(|_| &[][..]).collect()
            } else {
                order.chunks(fresh_per_batch).collect()
            };
            for chunk in chunks {
                let mut batch: Vec<Window> = chunk.iter().map(|&i| fresh[i].clone()).collect();
                for _ in 0..n_replay {
                    let (prog, thought) = &replay_pool[self.rng.gen_range(0..replay_pool.len())];
                    batch.push(seqae::decode(
                        thought,
                        self.window_len,
                        &entry_flats[*prog as usize],
                        &self.bank.layout,
                    )?);
                }
                let refs: Vec<&[Frame]> = batch.iter().map(|w| w.as_slice()).collect();
                let m = self.trainer.train_step(&mut self.bank, &refs)?;
                self.step += 1;
                loss_acc += m.mean_min_loss;
                batches += 1;
                replay_used += n_replay;
                total_used += refs.len();
            }
        }

        if self.grow_on_consolidate {
            let events = grow(&mut self.bank, &mut self.trainer, &fresh, &self.policy, &mut self.rng)?;
            self.growth_events.extend(events);
        }

        let flats = self.bank.stretched_all()?;
        for (pos, w) in &drained {
            let r = self.bank.route_with(w, &flats)?;
            let thought = seqae::encode(w, &flats[r.argmin], &self.bank.layout)?;
            let key = pad_key(&thought)?;
            self.memory.write(
                key,
                Payload::Episodic { program: r.argmin as u32, thought, position: *pos },
            )?;
        }

        let row = ConsolidationMetrics {
            step: self.step,
            mean_min_loss: loss_acc / batches as f64,
            n_programs: self.bank.len(),
            replay_fraction: replay_used as f64 / total_used as f64,
            buffer_fill: fill,
        };
        self.metrics.push(row.clone());
        Ok(row)
    }

    fn query_key(&self, window: &[Frame], flats: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
        let r = self.bank.route_with(window, flats)?;
        let thought = seqae::encode(window, &flats[r.argmin], &self.bank.layout)?;
        Ok((r.argmin, thought))
    }

    /// Content-addressed recall: encodes the query, reads the `k` nearest
    /// episodic records, and decodes each stored thought with its stored
    /// program. Reconstructions come back ordered by key distance.
    pub fn recall(&self, query: &[Frame], k: usize) -> Result<Vec<Window>> {
        if k == 0 {
            return Err(CoreError::Invalid("k must be >= 1".into()));
        }
        if self.memory.is_empty() {
            return Ok(Vec::new());
        }
        let flats = self.bank.stretched_all()?;
        let (_, thought) = self.query_key(query, &flats)?;
        let hits = self.memory.read_filtered(&pad_key(&thought)?, k, |p| {
            matches!(p, Payload::Episodic { .. })
        })?;
        let mut out = Vec::with_capacity(hits.len());
        for (_, rec) in hits {
            if let Payload::Episodic { program, thought, .. } = &rec.payload {
                out.push(seqae::decode(
                    thought,
                    self.window_len,
                    &flats[*program as usize],
                    &self.bank.layout,
                )?);
            }
        }
        Ok(out)
    }

    /// Memorizes that `next` followed `window`: the key is `window`'s
    /// thought; the payload carries `next`'s thought and program.
    pub fn store_consequent(&mut self, window: &[Frame], next: &[Frame]) -> Result<u64> {
        let flats = self.bank.stretched_all()?;
        let (_, thought) = self.query_key(window, &flats)?;
        let (next_program, next_thought) = self.query_key(next, &flats)?;
        self.memory.write(
            pad_key(&thought)?,
            Payload::Consequent { next_thought, next_program: next_program as u32 },
        )
    }

    /// Predicts the successor window from memorized consequents. `Average`
    /// decodes the inverse-distance-weighted mean thought with the modal
    /// stored program; `Multi` decodes each retrieved consequent separately.
    pub fn predict_next(&self, window: &[Frame], k: usize, mode: PredictMode) -> Result<Vec<Window>> {
        if k == 0 {
            return Err(CoreError::Invalid("k must be >= 1".into()));
        }
        if self.memory.is_empty() {
            return Err(CoreError::EmptyMemory);
        }
        let flats = self.bank.stretched_all()?;
        let (_, thought) = self.query_key(window, &flats)?;
        let hits = self.memory.read_filtered(&pad_key(&thought)?, k, |p| {
            matches!(p, Payload::Consequent { .. })
        })?;
        if hits.is_empty() {
            return Err(CoreError::Invalid("no consequent records".into()));
        }
        match mode {
            PredictMode::Multi => {
                let mut out = Vec::with_capacity(hits.len());
                for (_, rec) in hits {
                    if let Payload::Consequent { next_thought, next_program } = &rec.payload {
                        out.push(seqae::decode(
                            next_thought,
                            self.window_len,
                            &flats[*next_program as usize],
                            &self.bank.layout,
                        )?);
                    }
                }
                Ok(out)
            }
            PredictMode::Average => {
                let mut mean = vec![0.0; self.bank.layout.h];
                let mut norm = 0.0;
                let mut votes: Vec<(u32, f64)> = Vec::new();
                for (d, rec) in &hits {
                    if let Payload::Consequent { next_thought, next_program } = &rec.payload {
                        let w = 1.0 / (d + 1e-6);
                        norm += w;
                        for (m, t) in mean.iter_mut().zip(next_thought) {
                            *m += w * t;
                        }
                        match votes.iter_mut().find(|(p, _)| p == next_program) {
                            Some((_, c)) => *c += w,
                            None => votes.push((*next_program, w)),
                        }
                    }
                }
                for m in mean.iter_mut() {
                    *m /= norm;
                }
                let modal = votes
                    .iter()
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(p, _)| *p)
                    .expect("hits nonempty");
                Ok(vec![seqae::decode(
                    &mean,
                    self.window_len,
                    &flats[modal as usize],
                    &self.bank.layout,
                )?])
            }
        }
    }
}

/// A `(program, thought)` pair standing in for part of the stream.
#[derive(Clone, Debug)]
pub struct EncodedCall {
    pub program: usize,
    pub thought: Vec<f64>,
    /// `(start, total frames covered)`, continuation included.
    pub span: (usize, usize),
    /// Frames carried literally by this call; the rest sit behind the
    /// call-tagged tail.
    pub len: usize,
}

const CALL_CLAMP: f64 = 1e-7;

fn logit(p: f64) -> f64 {
    let p = p.clamp(CALL_CLAMP, 1.0 - CALL_CLAMP);
    (p / (1.0 - p)).ln()
}

fn check_continuation_dims(bank: &ProgramBank, frame_width: usize) -> Result<()> {
    let d = bank.layout.d;
    if d != frame_width + 1 {
        return Err(CoreError::Invalid(format!(
            "continuation needs a bank one channel wider than the data (D={d}, data width {frame_width})"
        )));
    }
    if d - 1 < EMBED_WIDTH {
        return Err(CoreError::Invalid(format!(
            "data width {} too narrow for a {EMBED_WIDTH}-wide program frame",
            d - 1
        )));
    }
    if d - 1 < bank.layout.h {
        return Err(CoreError::Invalid(format!(
            "data width {} too narrow for a {}-wide thought frame",
            d - 1,
            bank.layout.h
        )));
    }
    Ok(())
}

fn augment(frame: &[f64]) -> Frame {
    let mut f = Vec::with_capacity(frame.len() + 1);
    f.extend_from_slice(frame);
    f.push(0.0);
    f
}

/// Two call-tagged frames: the program embedding, then the thought, each
/// squashed into (0,1) and left-aligned in the data channels.
fn call_tail(bank: &ProgramBank, program: usize, thought: &[f64]) -> [Frame; 2] {
    let d = bank.layout.d;
    let mut pf = vec![0.0; d];
    for (slot, &v) in pf.iter_mut().zip(&bank.programs[program].embedding) {
        *slot = sigmoid(v);
    }
    pf[d - 1] = 1.0;
    let mut tf = vec![0.0; d];
    for (slot, &v) in tf.iter_mut().zip(thought) {
        *slot = sigmoid(v);
    }
    tf[d - 1] = 1.0;
    [pf, tf]
}

/// `(start, literal length)` per chain window, head first; the leaf absorbs
/// any remainder so every span stays coverable.
fn chain_bounds(n: usize, l: usize) -> Vec<(usize, usize)> {
    if n < 2 * l {
        return vec![(0, n)];
    }
    let k = n / l;
    (0..k)
        .map(|i| {
            let start = i * l;
            let len = if i == k - 1 { n - start } else { l };
            (start, len)
        })
        .collect()
}

fn chain_encode(seq: &[Frame], l: usize, bank: &ProgramBank) -> Result<(Vec<Window>, Vec<EncodedCall>)> {
    if l == 0 {
        return Err(CoreError::Invalid("window length must be >= 1".into()));
    }
    let first = seq.first().ok_or_else(|| CoreError::Invalid("empty sequence".into()))?;
    check_continuation_dims(bank, first.len())?;
    let flats = bank.stretched_all()?;
    let bounds = chain_bounds(seq.len(), l);
    let mut windows = Vec::with_capacity(bounds.len());
    let mut calls: Vec<EncodedCall> = Vec::with_capacity(bounds.len());
    for &(start, len) in bounds.iter().rev() {
        let mut w: Window = seq[start..start + len].iter().map(|f| augment(f)).collect();
        if let Some(next) = calls.last() {
            w.extend(call_tail(bank, next.program, &next.thought));
        }
        let r = bank.route_with(&w, &flats)?;
        let thought = seqae::encode(&w, &flats[r.argmin], &bank.layout)?;
        calls.push(EncodedCall {
            program: r.argmin,
            thought,
            span: (start, seq.len() - start),
            len,
        });
        windows.push(w);
    }
    windows.reverse();
    calls.reverse();
    Ok((windows, calls))
}

/// Encodes a long sequence as a chain of calls: the final window becomes a
/// `(program, thought)` pair, the preceding window is encoded with that pair
/// appended as two tagged frames, and so on back to the start. Returns the
/// chain head first. Sequences shorter than `2l` collapse to a single plain
/// call.
pub fn encode_continuation(seq: &[Frame], l: usize, bank: &ProgramBank) -> Result<Vec<EncodedCall>> {
    chain_encode(seq, l, bank).map(|(_, calls)| calls)
}

/// The augmented training windows the chain encoding relies on, rebuilt from
/// the bank's current parameters. Train on these (inputs = targets) between
/// re-encodings so the tagged tails track the drifting thoughts.
pub fn continuation_windows(seq: &[Frame], l: usize, bank: &ProgramBank) -> Result<Vec<Window>> {
    chain_encode(seq, l, bank).map(|(windows, _)| windows)
}

/// Unrolls a call back into frames. A call whose span exceeds its literal
/// length decodes two extra frames; when those carry the call tag they are
/// stripped and resolved into the next `(program, thought)` pair, recursing
/// until the chain bottoms out or `depth_limit` runs dry.
pub fn decode_continuation(
    call: &EncodedCall,
    bank: &ProgramBank,
    depth_limit: usize,
) -> Result<Vec<Frame>> {
    let flats = bank.stretched_all()?;
    decode_chain(call, bank, &flats, depth_limit)
}

fn decode_chain(
    call: &EncodedCall,
    bank: &ProgramBank,
    flats: &[Vec<f64>],
    depth: usize,
) -> Result<Vec<Frame>> {
    if depth == 0 {
        return Err(CoreError::Invalid("continuation depth limit exceeded".into()));
    }
    if call.program >= bank.len() {
        return Err(CoreError::Invalid(format!("no program {}", call.program)));
    }
    if call.span.1 < call.len || call.len == 0 {
        return Err(CoreError::Invalid(format!(
            "call covers {} frames but carries {}",
            call.span.1, call.len
        )));
    }
    let d = bank.layout.d;
    let data = d - 1;
    let continued = call.span.1 > call.len;
    let unroll = if continued { call.len + 2 } else { call.len };
    let frames = seqae::decode(&call.thought, unroll, &flats[call.program], &bank.layout)?;
    let tagged = continued && frames[unroll - 2][data] > 0.5 && frames[unroll - 1][data] > 0.5;
    let literal = if tagged { unroll - 2 } else { unroll };
    let mut out: Vec<Frame> = frames[..literal].iter().map(|f| f[..data].to_vec()).collect();
    if tagged {
        let emb: Vec<f64> = frames[unroll - 2][..EMBED_WIDTH].iter().map(|&v| logit(v)).collect();
        let mut next_program = 0;
        let mut best = f64::INFINITY;
        for (p, pv) in bank.programs.iter().enumerate() {
            let d2: f64 = pv.embedding.iter().zip(&emb).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best {
                best = d2;
                next_program = p;
            }
        }
        let next_thought: Vec<f64> =
            frames[unroll - 1][..bank.layout.h].iter().map(|&v| logit(v)).collect();
        let rest = call.span.1 - call.len;
        let next = EncodedCall {
            program: next_program,
            thought: next_thought,
            span: (call.span.0 + call.len, rest),
            len: if rest < 2 * call.len { rest } else { call.len },
        };
        out.extend(decode_chain(&next, bank, flats, depth - 1)?);
    }
    Ok(out)
}

/// Greedy additive decomposition: repeatedly finds the program whose
/// encode/decode of the current residual removes the most mean-squared
/// value, subtracts that decode, and records the call. Stops when the best
/// improvement falls below `eps` or after [`EXPLAIN_AWAY_CAP`] calls.
pub fn explain_away_encode(
    window: &[Frame],
    bank: &ProgramBank,
    eps: f64,
) -> Result<Vec<(usize, Vec<f64>)>> {
    if eps <= 0.0 {
        return Err(CoreError::Invalid("eps must be positive".into()));
    }
    if bank.is_empty() {
        return Err(CoreError::Invalid("empty program bank".into()));
    }
    bank.layout.check_window(window)?;
    let flats = bank.stretched_all()?;
    let l = window.len();
    let cells = (l * bank.layout.d) as f64;
    let mut residual: Vec<Frame> = window.to_vec();
    let mut current: f64 = residual.iter().flatten().map(|v| v * v).sum::<f64>() / cells;
    let mut calls = Vec::new();
    for _ in 0..EXPLAIN_AWAY_CAP {
        let mut best: Option<(f64, usize, Vec<f64>, Window)> = None;
        for (p, flat) in flats.iter().enumerate() {
            let thought = seqae::encode(&residual, flat, &bank.layout)?;
            let dec = seqae::decode(&thought, l, flat, &bank.layout)?;
            let after = residual
                .iter()
                .zip(&dec)
                .flat_map(|(rf, df)| rf.iter().zip(df).map(|(r, d)| (r - d) * (r - d)))
                .sum::<f64>()
                / cells;
            if best.as_ref().map_or(true, |b| after < b.0) {
                best = Some((after, p, thought, dec));
            }
        }
        let (after, p, thought, dec) = best.expect("bank nonempty");
        if current - after < eps {
            break;
        }
        for (rf, df) in residual.iter_mut().zip(&dec) {
            for (r, d) in rf.iter_mut().zip(df) {
                *r -= d;
            }
        }
        calls.push((p, thought));
        current = after;
    }
    Ok(calls)
}
