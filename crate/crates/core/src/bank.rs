//! Program bank: the set of program vectors sharing one stretcher, min-loss
//! routing, the tied training step, and greedy capacity growth.
//!
//! Routing and training use the same quantity — the teacher-forced
//! autoencoding loss — so the argmin that picks a window's program is the
//! same argmin the training graph's min node selects.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::numeric::{clip_global_norm, Adam, AdamState, Tape, GRAD_CLIP_NORM};
use crate::seqae::{self, Frame, ParamLayout, Window};
use crate::stretcher::{self, ProgramVector, StretcherParams};

#[derive(Clone, Debug)]
pub struct ProgramBank {
    pub programs: Vec<ProgramVector>,
    pub stretcher: StretcherParams,
    pub layout: ParamLayout,
    /// Trailing channels scored with squared error instead of cross-entropy.
    pub action_count: usize,
    /// Routing counts per (label, program), filled by evaluation harnesses.
    pub usage: BTreeMap<(String, usize), u64>,
}

/// Per-window routing outcome.
#[derive(Clone, Debug)]
pub struct RoutingResult {
    pub losses: Vec<f64>,
    pub argmin: usize,
    pub min_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainMetrics {
    pub mean_min_loss: f64,
    /// Windows routed to each program this step.
    pub usage: Vec<u64>,
    /// Argmin program per batch element.
    pub argmins: Vec<usize>,
}

impl ProgramBank {
    pub fn new(
        layout: ParamLayout,
        action_count: usize,
        n_programs: usize,
        stretcher_seed: u64,
        density: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_programs == 0 {
            return Err(CoreError::Invalid("bank needs at least one program".into()));
        }
        if action_count > layout.d {
            return Err(CoreError::Invalid(format!(
                "{action_count} action channels for D={}",
                layout.d
            )));
        }
        let sp = stretcher::init_stretcher(stretcher_seed, layout.total, density)?;
        let programs = (0..n_programs)
            .map(|id| ProgramVector::new(id, stretcher::sample_embedding(rng)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ProgramBank { programs, stretcher: sp, layout, action_count, usage: BTreeMap::new() })
    }

    pub fn len(&self) -> usize {
        self.programs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.programs.is_empty()
    }

    /// Appends a program with the next dense id; returns the id.
    pub fn add_program(&mut self, embedding: Vec<f64>) -> Result<usize> {
        let id = self.programs.len();
        self.programs.push(ProgramVector::new(id, embedding)?);
        Ok(id)
    }

    /// Stretched flat parameters of every program, in id order.
    pub fn stretched_all(&self) -> Result<Vec<Vec<f64>>> {
        self.programs
            .iter()
            .map(|p| stretcher::stretch(&p.embedding, &self.stretcher))
            .collect()
    }

    /// Routes one window given pre-stretched parameters.
    pub fn route_with(&self, window: &[Frame], flats: &[Vec<f64>]) -> Result<RoutingResult> {
        let mut losses = Vec::with_capacity(flats.len());
        for flat in flats {
            losses.push(seqae::window_loss(window, flat, &self.layout, self.action_count)?);
        }
        let mut argmin = 0;
        for (i, &l) in losses.iter().enumerate().skip(1) {
            if l < losses[argmin] {
                argmin = i;
            }
        }
        Ok(RoutingResult { min_loss: losses[argmin], argmin, losses })
    }

    /// Per-program losses and the argmin (ties to the lowest id).
    pub fn route(&self, window: &[Frame]) -> Result<RoutingResult> {
        let flats = self.stretched_all()?;
        self.route_with(window, &flats)
    }

    /// Mean min-loss over a window set (the growth objective).
    pub fn mean_min_loss(&self, windows: &[Window]) -> Result<f64> {
        if windows.is_empty() {
            return Err(CoreError::Invalid("empty window set".into()));
        }
        let flats = self.stretched_all()?;
        let mut acc = 0.0;
        for w in windows {
            acc += self.route_with(w, &flats)?.min_loss;
        }
        Ok(acc / windows.len() as f64)
    }

    /// Routing counts per (label, program) for externally labeled windows.
    /// Labels exist only in the evaluation harness; training never sees them.
    pub fn usage_matrix(
        &self,
        labeled: &[(String, Window)],
    ) -> Result<BTreeMap<(String, usize), u64>> {
        let flats = self.stretched_all()?;
        let mut counts = BTreeMap::new();
        for (label, window) in labeled {
            let r = self.route_with(window, &flats)?;
            *counts.entry((label.clone(), r.argmin)).or_insert(0) += 1;
        }
        Ok(counts)
    }
}

/// Renders usage counts as CSV, rows sorted by (domain, program).
pub fn usage_csv(counts: &BTreeMap<(String, usize), u64>) -> String {
    let mut out = String::from("domain,program,count\n");
    for ((domain, program), count) in counts {
        out.push_str(&format!("{domain},{program},{count}\n"));
    }
    out
}

/// Optimizer wrapper holding per-block Adam state for the stretcher and for
/// every program embedding.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub opt: Adam,
    stretch_states: Vec<AdamState>,
    embed_states: Vec<AdamState>,
}

impl Trainer {
    pub fn new(lr: f64, bank: &ProgramBank) -> Self {
        let stretch_states =
            bank.stretcher.block_sizes().iter().map(|&(_, n)| AdamState::new(n)).collect();
        let embed_states =
            bank.programs.iter().map(|_| AdamState::new(stretcher::EMBED_WIDTH)).collect();
        Trainer { opt: Adam::new(lr), stretch_states, embed_states }
    }

    fn ensure_embed_states(&mut self, n: usize) {
        while self.embed_states.len() < n {
            self.embed_states.push(AdamState::new(stretcher::EMBED_WIDTH));
        }
    }

    /// Plain autoencoding step: every window is its own target.
    pub fn train_step(&mut self, bank: &mut ProgramBank, batch: &[&[Frame]]) -> Result<TrainMetrics> {
        let pairs: Vec<(&[Frame], &[Frame])> = batch.iter().map(|&w| (w, w)).collect();
        self.train_step_pairs(bank, &pairs, None)
    }

    /// General step over (input, target) pairs. Loss is the batch mean of the
    /// per-pair minimum over programs; gradient reaches the shared stretcher
    /// and, per pair, only the argmin program's embedding. `trainable`
    /// restricts which embeddings the optimizer may move (None = all).
    pub fn train_step_pairs(
        &mut self,
        bank: &mut ProgramBank,
        pairs: &[(&[Frame], &[Frame])],
        trainable: Option<&[usize]>,
    ) -> Result<TrainMetrics> {
        if pairs.is_empty() {
            return Err(CoreError::Invalid("empty batch".into()));
        }
        self.ensure_embed_states(bank.len());
        let n = bank.len();
        let layout = bank.layout;

        let mut tape = Tape::new();
        let sn = stretcher::stretcher_leaves(&mut tape, &bank.stretcher)?;
        let mut emb_nodes = Vec::with_capacity(n);
        let mut aes = Vec::with_capacity(n);
        for p in &bank.programs {
            let e = tape.leaf_vector(p.embedding.clone());
            let flat = stretcher::build_stretch(&mut tape, e, &sn)?;
            aes.push(seqae::slice_ae(&mut tape, flat, &layout)?);
            emb_nodes.push(e);
        }

        let mut min_nodes = Vec::with_capacity(pairs.len());
        for &(input, target) in pairs {
            let mut branches = Vec::with_capacity(n);
            for ae in &aes {
                let thought = seqae::build_encode(&mut tape, ae, input, &layout)?;
                let loss = seqae::build_decode_loss(
                    &mut tape,
                    ae,
                    thought,
                    target,
                    &layout,
                    bank.action_count,
                )?;
                branches.push(loss);
            }
            min_nodes.push(tape.min_over(branches)?);
        }
        let mut total = min_nodes[0];
        for &m in &min_nodes[1..] {
            total = tape.add(total, m)?;
        }
        let total = tape.scale(total, 1.0 / pairs.len() as f64);

        tape.forward()?;
        let loss_val = tape.scalar(total);
        if !loss_val.is_finite() {
            return Err(CoreError::NonFiniteLoss(loss_val));
        }
        tape.backward(total)?;

        let mut usage = vec![0u64; n];
        let mut argmins = Vec::with_capacity(min_nodes.len());
        for &m in &min_nodes {
            let a = tape.argmin(m)?;
            usage[a] += 1;
            argmins.push(a);
        }

        let stretch_nodes = [sn.w1, sn.b1, sn.w2, sn.b2, sn.w3, sn.b3, sn.w4, sn.b4];
        let mut sgrads: Vec<Vec<f64>> =
            stretch_nodes.iter().map(|&id| tape.grad(id).to_vec()).collect();
        let mut egrads: Vec<Vec<f64>> =
            emb_nodes.iter().map(|&id| tape.grad(id).to_vec()).collect();

        // Only embeddings that won at least one window (and pass the filter)
        // are stepped; untouched embeddings stay bit-identical.
        let stepped: Vec<usize> = (0..n)
            .filter(|&id| usage[id] > 0 && trainable.map_or(true, |t| t.contains(&id)))
            .collect();

        {
            let mut blocks: Vec<&mut [f64]> = sgrads.iter_mut().map(|g| g.as_mut_slice()).collect();
            for (id, g) in egrads.iter_mut().enumerate() {
                if stepped.contains(&id) {
                    blocks.push(g.as_mut_slice());
                }
            }
            clip_global_norm(&mut blocks, GRAD_CLIP_NORM);
        }

        for (((name, params), grads), state) in bank
            .stretcher
            .blocks_mut()
            .into_iter()
            .zip(&sgrads)
            .zip(&mut self.stretch_states)
        {
            self.opt.step(name, params, grads, state)?;
        }
        for &id in &stepped {
            self.opt.step(
                &format!("program.{id}"),
                &mut bank.programs[id].embedding,
                &egrads[id],
                &mut self.embed_states[id],
            )?;
        }

        Ok(TrainMetrics { mean_min_loss: loss_val, usage, argmins })
    }
}

/// Greedy MDL-style growth policy for extending bank capacity.
#[derive(Clone, Debug, PartialEq)]
pub struct GrowthPolicy {
    /// Plateau when the mean loss over `plateau_steps` improves by less than this.
    pub plateau_eps: f64,
    pub plateau_steps: usize,
    /// Hard cap on plateau-training steps per phase.
    pub max_steps: usize,
    /// Std-dev of the Gaussian offset from the parent embedding.
    pub init_sigma: f64,
    /// Steps the candidate (plus stretcher) trains before the MDL test.
    pub trial_steps: usize,
    /// Description-length price of one more program, in nats.
    pub cost_per_program: f64,
    pub max_programs: usize,
    pub batch_size: usize,
}

impl Default for GrowthPolicy {
    fn default() -> Self {
        GrowthPolicy {
            plateau_eps: 1e-3,
            plateau_steps: 200,
            max_steps: 4000,
            init_sigma: 0.1,
            trial_steps: 300,
            cost_per_program: 64.0 * std::f64::consts::LN_2,
            max_programs: 64,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GrowthEvent {
    pub old_loss: f64,
    pub new_loss: f64,
    pub accepted: bool,
    /// Bank size after the accept/reject decision.
    pub n_programs: usize,
}

fn sample_batch<'a>(windows: &'a [Window], size: usize, rng: &mut ChaCha8Rng) -> Vec<&'a [Frame]> {
    (0..size.min(windows.len()).max(1))
        .map(|_| windows[rng.gen_range(0..windows.len())].as_slice())
        .collect()
}

/// Trains until the mean min-loss plateaus per the policy, or `max_steps`.
pub fn train_to_plateau(
    bank: &mut ProgramBank,
    trainer: &mut Trainer,
    windows: &[Window],
    policy: &GrowthPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if windows.is_empty() {
        return Err(CoreError::Invalid("empty window set".into()));
    }
    let mut prev = f64::INFINITY;
    let mut acc = 0.0;
    let mut cnt = 0usize;
    for _ in 0..policy.max_steps {
        let batch = sample_batch(windows, policy.batch_size, rng);
        let m = trainer.train_step(bank, &batch)?;
        acc += m.mean_min_loss;
        cnt += 1;
        if cnt == policy.plateau_steps {
            let mean = acc / cnt as f64;
            if prev - mean < policy.plateau_eps {
                return Ok(());
            }
            prev = mean;
            acc = 0.0;
            cnt = 0;
        }
    }
    Ok(())
}

/// Greedy growth: repeatedly spawn a candidate near the worst-performing
/// program, trial-train it, and keep it only if the loss reduction over the
/// data set pays for the candidate's description length. Stops at the first
/// rejection (rolling the trial back) or at the program cap.
pub fn grow(
    bank: &mut ProgramBank,
    trainer: &mut Trainer,
    windows: &[Window],
    policy: &GrowthPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GrowthEvent>> {
    train_to_plateau(bank, trainer, windows, policy, rng)?;
    let noise = Normal::new(0.0, policy.init_sigma)
        .map_err(|e| CoreError::Invalid(format!("init_sigma: {e}")))?;
    let mut events = Vec::new();

    while bank.len() < policy.max_programs {
        let old = bank.mean_min_loss(windows)?;

        // Parent = program with the highest total routed loss.
        let flats = bank.stretched_all()?;
        let mut totals = vec![0.0; bank.len()];
        for w in windows {
            let r = bank.route_with(w, &flats)?;
            totals[r.argmin] += r.min_loss;
        }
        let worst = totals
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);

        let snapshot = (bank.clone(), trainer.clone());
        let mut embedding = bank.programs[worst].embedding.clone();
        for v in embedding.iter_mut() {
            *v += noise.sample(rng);
        }
        let candidate = bank.add_program(embedding)?;

        for _ in 0..policy.trial_steps {
            let batch = sample_batch(windows, policy.batch_size, rng);
            let pairs: Vec<(&[Frame], &[Frame])> = batch.iter().map(|&w| (w, w)).collect();
            trainer.train_step_pairs(bank, &pairs, Some(&[candidate]))?;
        }

        let new = bank.mean_min_loss(windows)?;
        let accepted = (old - new) * windows.len() as f64 > policy.cost_per_program;
        if accepted {
            events.push(GrowthEvent { old_loss: old, new_loss: new, accepted, n_programs: bank.len() });
            train_to_plateau(bank, trainer, windows, policy, rng)?;
        } else {
            *bank = snapshot.0;
            *trainer = snapshot.1;
            events.push(GrowthEvent { old_loss: old, new_loss: new, accepted, n_programs: bank.len() });
            break;
        }
    }
    Ok(events)
}
