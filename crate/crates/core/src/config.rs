//! Experiment configuration: a flat `key = value` file with `[section]`
//! headers. Every field has a default, so an empty file (or none at all) is
//! a valid desk-scale experiment; command-line flags override file values.
//!
//! ```text
//! [dimensions]
//! d = 32                 # frame width
//! h = 16                 # LSTM hidden size / thought width
//! thought_width = 16
//! window = 7             # frames per training window
//! allowed_lengths = 7    # comma-separated segment lengths for DP parsing
//!
//! [bank]
//! programs = 3           # initial program vectors
//! grow = false           # run the MDL growth loop during consolidation
//! max_programs = 64
//! plateau_eps = 0.001
//! plateau_steps = 200
//! max_steps = 4000
//! init_sigma = 0.1
//! trial_steps = 300
//! cost_per_program = 44.3614195558365   # 64 ln 2 nats
//!
//! [stretcher]
//! density = 0.01
//! seed = 7
//!
//! [training]
//! batch_size = 16
//! passes = 1             # passes over each consolidated buffer
//! lr = 0.01
//! replay_ratio = 0.3
//! action_channels = 0    # trailing channels scored with squared error
//! buffer_capacity = 4096
//!
//! [memory]
//! seed = 11
//!
//! [paths]
//! trace = trace.ltmt
//! labels = trace.labels.csv
//! model = model.ltmm
//! metrics = metrics.csv
//!
//! [gen]
//! domains = counter:0:8,shift_register:8:8,periodic:16:8:4
//! frames_per_episode = 700
//! rounds = 3
//! seed = 5
//!
//! [global]
//! seed = 0
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::bank::GrowthPolicy;
use crate::datagen::{DomainSpec, GeneratorKind};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub d: usize,
    pub h: usize,
    pub thought_width: usize,
    pub window: usize,
    pub allowed_lengths: Vec<usize>,

    pub programs: usize,
    pub grow: bool,
    pub policy: GrowthPolicy,

    pub density: f64,
    pub stretcher_seed: u64,

    pub passes: usize,
    pub lr: f64,
    pub replay_ratio: f64,
    pub action_channels: usize,
    pub buffer_capacity: usize,

    pub memory_seed: u64,

    pub trace: PathBuf,
    pub labels: PathBuf,
    pub model: PathBuf,
    pub metrics: PathBuf,

    pub gen_domains: Vec<DomainSpec>,
    pub gen_frames: usize,
    pub gen_rounds: usize,
    pub gen_seed: u64,

    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            d: 32,
            h: 16,
            thought_width: 16,
            window: 7,
            allowed_lengths: vec![7],
            programs: 3,
            grow: false,
            policy: GrowthPolicy::default(),
            density: 0.01,
            stretcher_seed: 7,
            passes: 1,
            lr: 0.01,
            replay_ratio: 0.3,
            action_channels: 0,
            buffer_capacity: 4096,
            memory_seed: 11,
            trace: PathBuf::from("trace.ltmt"),
            labels: PathBuf::from("trace.labels.csv"),
            model: PathBuf::from("model.ltmm"),
            metrics: PathBuf::from("metrics.csv"),
            gen_domains: crate::datagen::desk_domains(32),
            gen_frames: 700,
            gen_rounds: 3,
            gen_seed: 5,
            seed: 0,
        }
    }
}

fn bad(section: &str, key: &str, detail: impl std::fmt::Display) -> CoreError {
    CoreError::Config(format!("[{section}] {key}: {detail}"))
}

/// `kind:offset:span[:period]`, e.g. `periodic:16:8:4`. The kind doubles as
/// the domain name, so each kind may appear once.
fn parse_domain(item: &str, d: usize) -> Result<DomainSpec> {
    let parts: Vec<&str> = item.trim().split(':').collect();
    if parts.len() < 3 {
        return Err(bad("gen", "domains", format!("{item:?} is not kind:offset:span")));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.trim().parse().map_err(|_| bad("gen", "domains", format!("bad {what} in {item:?}")))
    };
    let offset = num(parts[1], "offset")?;
    let span = num(parts[2], "span")?;
    let kind = match parts[0].trim() {
        "counter" => GeneratorKind::Counter { span },
        "shift_register" => GeneratorKind::ShiftRegister { span },
        "periodic" => {
            let period = if parts.len() > 3 { num(parts[3], "period")? } else { 4 };
            GeneratorKind::Periodic { span, period }
        }
        "markov_bits" => GeneratorKind::MarkovBits { span },
        other => return Err(bad("gen", "domains", format!("unknown kind {other:?}"))),
    };
    if matches!(kind, GeneratorKind::Periodic { .. }) != (parts.len() == 4) && parts.len() > 3 {
        return Err(bad("gen", "domains", format!("{item:?} has too many fields")));
    }
    Ok(DomainSpec { name: parts[0].trim().to_string(), kind, offset, d })
}

/// Raw `section.key -> value` map straight off the file.
fn parse_ini(text: &str) -> Result<BTreeMap<(String, String), String>> {
    let mut map = BTreeMap::new();
    let mut section = "global".to_string();
    for (n, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| CoreError::Config(format!("line {}: unterminated section", n + 1)))?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CoreError::Config(format!("line {}: expected key = value", n + 1)))?;
        let prev = map.insert((section.clone(), key.trim().to_string()), value.trim().to_string());
        if prev.is_some() {
            return Err(CoreError::Config(format!(
                "line {}: duplicate key {} in [{}]",
                n + 1,
                key.trim(),
                section
            )));
        }
    }
    Ok(map)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = parse_ini(text)?;
        let mut cfg = ExperimentConfig::default();

        macro_rules! take {
            ($section:literal, $key:literal, $slot:expr) => {
                if let Some(v) = map.remove(&($section.to_string(), $key.to_string())) {
                    $slot = v.parse().map_err(|e| bad($section, $key, e))?;
                }
            };
        }

        take!("dimensions", "d", cfg.d);
        take!("dimensions", "h", cfg.h);
        if let Some(v) = map.remove(&("dimensions".into(), "thought_width".into())) {
            cfg.thought_width = v.parse().map_err(|e| bad("dimensions", "thought_width", e))?;
        } else {
            cfg.thought_width = cfg.h;
        }
        if let Some(v) = map.remove(&("dimensions".into(), "allowed_lengths".into())) {
            cfg.allowed_lengths = v
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad("dimensions", "allowed_lengths", e))?;
        }
        take!("dimensions", "window", cfg.window);

        take!("bank", "programs", cfg.programs);
        take!("bank", "grow", cfg.grow);
        take!("bank", "max_programs", cfg.policy.max_programs);
        take!("bank", "plateau_eps", cfg.policy.plateau_eps);
        take!("bank", "plateau_steps", cfg.policy.plateau_steps);
        take!("bank", "max_steps", cfg.policy.max_steps);
        take!("bank", "init_sigma", cfg.policy.init_sigma);
        take!("bank", "trial_steps", cfg.policy.trial_steps);
        take!("bank", "cost_per_program", cfg.policy.cost_per_program);

        take!("stretcher", "density", cfg.density);
        take!("stretcher", "seed", cfg.stretcher_seed);

        take!("training", "batch_size", cfg.policy.batch_size);
        take!("training", "passes", cfg.passes);
        take!("training", "lr", cfg.lr);
        take!("training", "replay_ratio", cfg.replay_ratio);
        take!("training", "action_channels", cfg.action_channels);
        take!("training", "buffer_capacity", cfg.buffer_capacity);

        take!("memory", "seed", cfg.memory_seed);

        take!("paths", "trace", cfg.trace);
        take!("paths", "labels", cfg.labels);
        take!("paths", "model", cfg.model);
        take!("paths", "metrics", cfg.metrics);

        let domains = map.remove(&("gen".into(), "domains".into()));
        take!("gen", "frames_per_episode", cfg.gen_frames);
        take!("gen", "rounds", cfg.gen_rounds);
        take!("gen", "seed", cfg.gen_seed);
        take!("global", "seed", cfg.seed);

        if let Some(list) = domains {
            cfg.gen_domains = list
                .split(',')
                .map(|item| parse_domain(item, cfg.d))
                .collect::<Result<Vec<_>>>()?;
        } else {
            cfg.gen_domains = crate::datagen::desk_domains(cfg.d);
        }

        if let Some(((section, key), _)) = map.into_iter().next() {
            return Err(CoreError::Config(format!("unknown key {key} in [{section}]")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 {
            return Err(CoreError::Config("d and h must be >= 1".into()));
        }
        if self.thought_width != self.h {
            return Err(CoreError::Config(format!(
                "thought_width {} != h {}; only the projection-free layout is supported",
                self.thought_width, self.h
            )));
        }
        if self.window == 0 {
            return Err(CoreError::Config("window must be >= 1".into()));
        }
        if self.window > self.buffer_capacity {
            return Err(CoreError::Config(format!(
                "window {} exceeds buffer_capacity {}",
                self.window, self.buffer_capacity
            )));
        }
        if self.allowed_lengths.is_empty() || self.allowed_lengths.contains(&0) {
            return Err(CoreError::Config("allowed_lengths must be nonempty and positive".into()));
        }
        if self.programs == 0 {
            return Err(CoreError::Config("programs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.replay_ratio) {
            return Err(CoreError::Config(format!("replay_ratio {} outside [0, 1]", self.replay_ratio)));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(CoreError::Config(format!("density {} outside (0, 1]", self.density)));
        }
        if self.action_channels > self.d {
            return Err(CoreError::Config(format!(
                "action_channels {} exceeds d {}",
                self.action_channels, self.d
            )));
        }
        for spec in &self.gen_domains {
            if spec.d != self.d {
                return Err(CoreError::Config(format!(
                    "domain {} has d {} but [dimensions] d = {}",
                    spec.name, spec.d, self.d
                )));
            }
        }
        for (i, a) in self.gen_domains.iter().enumerate() {
            for b in &self.gen_domains[..i] {
                if a.name == b.name {
                    return Err(CoreError::Config(format!("duplicate domain name {}", a.name)));
                }
            }
        }
        Ok(())
    }
}
