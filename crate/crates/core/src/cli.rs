//! Command implementations behind the `ltm` binary. Each command is an
//! ordinary function returning a printable summary, so experiments are
//! scriptable from tests as well as from the shell.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bank::{self, usage_csv, ProgramBank, Trainer};
use crate::config::ExperimentConfig;
use crate::datagen::{self, TraceEncoding};
use crate::error::{CoreError, Result};
use crate::lifelong::{self, Lifelong, LifelongSettings, PredictMode};
use crate::model_file::ModelFile;
use crate::seqae::{Frame, ParamLayout, Window};
use crate::vmem::{Payload, VectorMemory};

fn build_bank(cfg: &ExperimentConfig) -> Result<ProgramBank> {
    let layout = ParamLayout::new(cfg.d, cfg.h, cfg.thought_width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ProgramBank::new(
        layout,
        cfg.action_channels,
        cfg.programs,
        cfg.stretcher_seed,
        cfg.density,
        &mut rng,
    )
}

fn settings(cfg: &ExperimentConfig) -> LifelongSettings {
    LifelongSettings {
        window_len: cfg.window,
        buffer_capacity: cfg.buffer_capacity,
        replay_ratio: cfg.replay_ratio,
        train_passes: cfg.passes,
        grow_on_consolidate: cfg.grow,
        lr: cfg.lr,
        seed: cfg.memory_seed,
        policy: cfg.policy.clone(),
    }
}

/// Rebuild a running engine around a loaded model. The model's window length
/// and memory seed win over the config's.
fn resume(model: ModelFile, cfg: &ExperimentConfig) -> Result<Lifelong> {
    let mut s = settings(cfg);
    s.window_len = model.window_len;
    s.seed = model.memory_seed;
    Lifelong::with_memory(model.bank, model.memory, s)
}

fn check_width(d: usize, expected: usize, what: &str) -> Result<()> {
    if d != expected {
        return Err(CoreError::Invalid(format!(
            "{what} has width {d}, configuration expects {expected}"
        )));
    }
    Ok(())
}

fn fixed_windows(frames: &[Frame], l: usize) -> Result<Vec<(usize, Window)>> {
    let seg = lifelong::segment_fixed(frames.len(), l)?;
    Ok(seg.spans.iter().map(|&(s, len)| (s, frames[s..s + len].to_vec())).collect())
}

fn majority_label(labels: &[String]) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(a.0)))
        .map(|(l, _)| l.to_string())
        .unwrap_or_default()
}

pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<String> {
    let script = datagen::round_robin_script(
        cfg.gen_domains.clone(),
        cfg.gen_frames,
        cfg.gen_rounds,
        cfg.gen_seed,
    )?;
    let (frames, labels) = datagen::compose(&script)?;
    let encoding = TraceEncoding::BitPacked { action_count: cfg.action_channels as u32 };
    datagen::save_trace(&cfg.trace, &frames, cfg.d, encoding)?;
    datagen::save_labels(&cfg.labels, &labels)?;
    Ok(format!(
        "wrote {} frames (D={}) to {}, labels to {}",
        frames.len(),
        cfg.d,
        cfg.trace.display(),
        cfg.labels.display()
    ))
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<String> {
    let (d, frames) = datagen::load_trace(&cfg.trace)?;
    check_width(d, cfg.d, "trace")?;
    let mut life = Lifelong::new(build_bank(cfg)?, settings(cfg))?;
    life.ingest(&frames)?;
    life.flush()?;
    std::fs::write(&cfg.metrics, lifelong::metrics_csv(&life.metrics))?;

    let mut summary = format!(
        "trained on {} frames: {} consolidations, {} growth events, {} programs",
        frames.len(),
        life.metrics.len(),
        life.growth_events.len(),
        life.bank.len(),
    );
    if let Some(last) = life.metrics.last() {
        write!(summary, ", final mean min-loss {:.6}", last.mean_min_loss).unwrap();
    }

    // With the label sidecar present, emit the routing-by-domain matrix the
    // evaluation plots are built from. Labels stay out of the training path.
    if cfg.labels.exists() {
        let labels = datagen::load_labels(&cfg.labels)?;
        if labels.len() != frames.len() {
            return Err(CoreError::Invalid(format!(
                "{} labels for {} frames",
                labels.len(),
                frames.len()
            )));
        }
        let labeled: Vec<(String, Window)> = fixed_windows(&frames, life.window_len)?
            .into_iter()
            .map(|(s, w)| (majority_label(&labels[s..s + w.len()]), w))
            .collect();
        let counts = life.bank.usage_matrix(&labeled)?;
        let usage_path = cfg.metrics.with_extension("usage.csv");
        std::fs::write(&usage_path, usage_csv(&counts))?;
        life.bank.usage = counts;
        write!(summary, ", usage matrix in {}", usage_path.display()).unwrap();
    }

    let model = ModelFile {
        bank: life.bank,
        classifier: None,
        memory: life.memory,
        window_len: cfg.window,
        memory_seed: cfg.memory_seed,
    };
    model.save(&cfg.model)?;
    write!(summary, ", model in {}", cfg.model.display()).unwrap();
    Ok(summary)
}

fn load_query(path: &Path, d: usize) -> Result<Vec<Frame>> {
    let (qd, frames) = datagen::load_trace(path)?;
    check_width(qd, d, "query trace")?;
    Ok(frames)
}

pub fn cmd_recall(cfg: &ExperimentConfig, query: &Path, out: &Path, k: usize) -> Result<String> {
    let model = ModelFile::load(&cfg.model)?;
    if model.memory.is_empty() {
        return Err(CoreError::EmptyMemory);
    }
    let d = model.bank.layout.d;
    let frames = load_query(query, d)?;
    let life = resume(model, cfg)?;
    let hits = life.recall(&frames, k)?;
    let n = hits.len();
    let flat: Vec<Frame> = hits.into_iter().flatten().collect();
    datagen::save_trace(out, &flat, d, TraceEncoding::Float64)?;
    Ok(format!(
        "{n} reconstruction(s) of {} frames each written to {}",
        life.window_len,
        out.display()
    ))
}

pub fn cmd_predict(
    cfg: &ExperimentConfig,
    query: &Path,
    out: &Path,
    k: usize,
    mode: PredictMode,
) -> Result<String> {
    let model = ModelFile::load(&cfg.model)?;
    if model.memory.is_empty() {
        return Err(CoreError::EmptyMemory);
    }
    let d = model.bank.layout.d;
    let frames = load_query(query, d)?;
    let life = resume(model, cfg)?;
    let predictions = life.predict_next(&frames, k, mode)?;
    let n = predictions.len();
    let flat: Vec<Frame> = predictions.into_iter().flatten().collect();
    datagen::save_trace(out, &flat, d, TraceEncoding::Float64)?;
    Ok(format!(
        "{n} predicted window(s) of {} frames each written to {}",
        life.window_len,
        out.display()
    ))
}

pub fn cmd_grow(cfg: &ExperimentConfig) -> Result<String> {
    let (mut bank, memory, window_len, memory_seed) = if cfg.model.exists() {
        let m = ModelFile::load(&cfg.model)?;
        (m.bank, m.memory, m.window_len, m.memory_seed)
    } else {
        (build_bank(cfg)?, VectorMemory::new(cfg.memory_seed), cfg.window, cfg.memory_seed)
    };
    let (d, frames) = datagen::load_trace(&cfg.trace)?;
    check_width(d, bank.layout.d, "trace")?;
    let windows: Vec<Window> =
        fixed_windows(&frames, window_len)?.into_iter().map(|(_, w)| w).collect();
    let before = bank.len();
    let mut trainer = Trainer::new(cfg.lr, &bank);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let events = bank::grow(&mut bank, &mut trainer, &windows, &cfg.policy, &mut rng)?;
    let after = bank.len();
    let model = ModelFile { bank, classifier: None, memory, window_len, memory_seed };
    model.save(&cfg.model)?;
    Ok(format!(
        "{} growth event(s): {before} -> {after} programs, model in {}",
        events.len(),
        cfg.model.display()
    ))
}

pub fn cmd_stats(model_path: &Path) -> Result<String> {
    let model = ModelFile::load(model_path)?;
    let keyed = model.bank.programs.iter().filter(|p| p.key.is_some()).count();
    let (mut episodic, mut program, mut consequent) = (0usize, 0usize, 0usize);
    for rec in model.memory.iter() {
        match rec.payload {
            Payload::Episodic { .. } => episodic += 1,
            Payload::Program { .. } => program += 1,
            Payload::Consequent { .. } => consequent += 1,
        }
    }
    let mut out = String::new();
    writeln!(out, "model: {}", model_path.display()).unwrap();
    writeln!(
        out,
        "dimensions: D={} H={} window={} action_channels={}",
        model.bank.layout.d,
        model.bank.layout.h,
        model.window_len,
        model.bank.action_count
    )
    .unwrap();
    writeln!(out, "programs: {} ({keyed} with keys)", model.bank.len()).unwrap();
    writeln!(out, "classifier: {}", if model.classifier.is_some() { "yes" } else { "no" })
        .unwrap();
    writeln!(
        out,
        "memory records: {} (episodic {episodic}, program {program}, consequent {consequent})",
        model.memory.len()
    )
    .unwrap();
    write!(out, "usage:\n{}", usage_csv(&model.bank.usage)).unwrap();
    Ok(out)
}
