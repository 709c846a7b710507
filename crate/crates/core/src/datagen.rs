//! Synthetic multi-domain stream generation (stand-ins for console RAM
//! traces), composition with unsignaled domain switches, and the `LTMT`
//! trace-file format.
//!
//! Every generator writes its bits into `offset..offset+span` of an otherwise
//! zero frame, so domains can occupy disjoint channel ranges the way distinct
//! games light up distinct RAM bytes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::seqae::Frame;
use crate::wire::{check_count, Reader, Writer};

const TRACE_MAGIC: &[u8; 4] = b"LTMT";
const TRACE_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    /// Bits `offset..offset+span` hold `(start + t) mod 2^span`,
    /// little-endian; `start = seed mod 2^span`.
    Counter { span: usize },
    /// A fixed nonzero bit pattern rotating one position per step.
    ShiftRegister { span: usize },
    /// A fixed sequence of `period` patterns repeating forever.
    Periodic { span: usize, period: usize },
    /// Each bit flips per step with its own seeded probability.
    MarkovBits { span: usize },
}

impl GeneratorKind {
    pub fn span(&self) -> usize {
        match *self {
            GeneratorKind::Counter { span }
            | GeneratorKind::ShiftRegister { span }
            | GeneratorKind::Periodic { span, .. }
            | GeneratorKind::MarkovBits { span } => span,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainSpec {
    pub name: String,
    pub kind: GeneratorKind,
    /// First channel the generator writes to.
    pub offset: usize,
    pub d: usize,
}

impl DomainSpec {
    fn check(&self) -> Result<()> {
        let span = self.kind.span();
        if span == 0 {
            return Err(CoreError::Invalid(format!("domain {}: zero span", self.name)));
        }
        if self.offset + span > self.d {
            return Err(CoreError::Invalid(format!(
                "domain {}: span {}..{} exceeds D={}",
                self.name,
                self.offset,
                self.offset + span,
                self.d
            )));
        }
        if let GeneratorKind::Periodic { period, .. } = self.kind {
            if period == 0 {
                return Err(CoreError::Invalid(format!("domain {}: zero period", self.name)));
            }
        }
        Ok(())
    }
}

/// Deterministic frame stream for one domain.
pub fn generate(spec: &DomainSpec, count: usize, seed: u64) -> Result<Vec<Frame>> {
    spec.check()?;
    if count == 0 {
        return Err(CoreError::Invalid("frame count must be >= 1".into()));
    }
    let span = spec.kind.span();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(count);
    let mut blank = vec![0.0; spec.d];
    let set_bits = |frame: &mut Frame, bits: &[bool]| {
        for (j, &b) in bits.iter().enumerate() {
            frame[spec.offset + j] = if b { 1.0 } else { 0.0 };
        }
    };
    match spec.kind {
        GeneratorKind::Counter { .. } => {
            let modulus = 1u128 << span.min(127);
            let start = seed as u128 % modulus;
            for t in 0..count {
                let value = (start + t as u128) % modulus;
                let bits: Vec<bool> = (0..span).map(|j| (value >> j) & 1 == 1).collect();
                set_bits(&mut blank, &bits);
                frames.push(blank.clone());
            }
        }
        GeneratorKind::ShiftRegister { .. } => {
            let mut bits: Vec<bool> = (0..span).map(|_| rng.gen_bool(0.5)).collect();
            if bits.iter().all(|&b| !b) {
                bits[0] = true;
            }
            for _ in 0..count {
                set_bits(&mut blank, &bits);
                frames.push(blank.clone());
                bits.rotate_right(1);
            }
        }
        GeneratorKind::Periodic { period, .. } => {
            let patterns: Vec<Vec<bool>> = (0..period)
                .map(|_| (0..span).map(|_| rng.gen_bool(0.5)).collect())
                .collect();
            for t in 0..count {
                set_bits(&mut blank, &patterns[t % period]);
                frames.push(blank.clone());
            }
        }
        GeneratorKind::MarkovBits { .. } => {
            let flip_prob: Vec<f64> = (0..span).map(|_| rng.gen_range(0.02..0.3)).collect();
            let mut bits: Vec<bool> = (0..span).map(|_| rng.gen_bool(0.5)).collect();
            for _ in 0..count {
                set_bits(&mut blank, &bits);
                frames.push(blank.clone());
                for (b, &p) in bits.iter_mut().zip(&flip_prob) {
                    if rng.gen_bool(p) {
                        *b = !*b;
                    }
                }
            }
        }
    }
    Ok(frames)
}

/// Ordered episodes over a shared set of domains; one unlabeled stream out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamScript {
    pub domains: Vec<DomainSpec>,
    /// (domain name, frame count, seed) per episode.
    pub episodes: Vec<(String, usize, u64)>,
    pub d: usize,
}

/// Concatenated episode frames plus a per-frame label track. The labels are
/// an evaluation side channel; the training path never receives them.
pub fn compose(script: &StreamScript) -> Result<(Vec<Frame>, Vec<String>)> {
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for (name, count, seed) in &script.episodes {
        let spec = script
            .domains
            .iter()
            .find(|s| &s.name == name)
            .ok_or_else(|| CoreError::Invalid(format!("unknown domain {name}")))?;
        if spec.d != script.d {
            return Err(CoreError::Invalid(format!(
                "domain {name} has D={}, script has D={}",
                spec.d, script.d
            )));
        }
        let episode = generate(spec, *count, *seed)?;
        labels.extend(std::iter::repeat(name.clone()).take(episode.len()));
        frames.extend(episode);
    }
    Ok((frames, labels))
}

/// The three desk-scale domains used throughout the experiments: a counter,
/// a shift register, and a periodic pattern on disjoint channel ranges.
pub fn desk_domains(d: usize) -> Vec<DomainSpec> {
    vec![
        DomainSpec {
            name: "counter".into(),
            kind: GeneratorKind::Counter { span: 8 },
            offset: 0,
            d,
        },
        DomainSpec {
            name: "shift_register".into(),
            kind: GeneratorKind::ShiftRegister { span: 8 },
            offset: 8,
            d,
        },
        DomainSpec {
            name: "periodic".into(),
            kind: GeneratorKind::Periodic { span: 8, period: 4 },
            offset: 16,
            d,
        },
    ]
}

/// Round-robin script over `domains`, `rounds` passes of `frames_per_episode`
/// frames each, episode seeds derived from `seed`.
pub fn round_robin_script(
    domains: Vec<DomainSpec>,
    frames_per_episode: usize,
    rounds: usize,
    seed: u64,
) -> Result<StreamScript> {
    let d = domains.first().map(|s| s.d).ok_or_else(|| CoreError::Invalid("no domains".into()))?;
    let mut episodes = Vec::new();
    for round in 0..rounds {
        for (i, spec) in domains.iter().enumerate() {
            episodes.push((
                spec.name.clone(),
                frames_per_episode,
                seed.wrapping_add((round * domains.len() + i) as u64),
            ));
        }
    }
    Ok(StreamScript { domains, episodes, d })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceEncoding {
    Float64,
    /// Bit channels packed 8-per-byte; the trailing `action_count` channels
    /// stay float64 per frame.
    BitPacked { action_count: u32 },
}

/// Serializes frames into the `LTMT` container.
pub fn trace_to_bytes(frames: &[Frame], d: usize, encoding: TraceEncoding) -> Result<Vec<u8>> {
    for f in frames {
        if f.len() != d {
            return Err(CoreError::Invalid(format!("frame width {} != D={d}", f.len())));
        }
    }
    let mut w = Writer::new();
    w.bytes(TRACE_MAGIC);
    w.u16(TRACE_VERSION);
    w.u32(d as u32);
    w.u64(frames.len() as u64);
    match encoding {
        TraceEncoding::Float64 => {
            w.u8(0);
            for f in frames {
                w.f64_slice(f);
            }
        }
        TraceEncoding::BitPacked { action_count } => {
            let bits = d
                .checked_sub(action_count as usize)
                .ok_or_else(|| CoreError::Invalid(format!("{action_count} action channels for D={d}")))?;
            for f in frames {
                if f[..bits].iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(CoreError::Invalid(
                        "bit-packed encoding requires exact 0/1 bit channels".into(),
                    ));
                }
            }
            w.u8(1);
            w.u32(action_count);
            for f in frames {
                let mut byte = 0u8;
                for (j, &v) in f[..bits].iter().enumerate() {
                    if v == 1.0 {
                        byte |= 1 << (j % 8);
                    }
                    if j % 8 == 7 {
                        w.u8(byte);
                        byte = 0;
                    }
                }
                if bits % 8 != 0 {
                    w.u8(byte);
                }
                w.f64_slice(&f[bits..]);
            }
        }
    }
    Ok(w.into_bytes())
}

/// Parses an `LTMT` container; returns `(D, frames)`.
pub fn trace_from_bytes(bytes: &[u8]) -> Result<(usize, Vec<Frame>)> {
    let mut r = Reader::new(bytes, "trace file");
    r.expect_magic(TRACE_MAGIC)?;
    let version = r.u16()?;
    if version != TRACE_VERSION {
        return Err(CoreError::Format {
            what: "trace file",
            detail: format!("unsupported version {version}"),
        });
    }
    let d = r.u32()? as usize;
    let count = check_count("trace file", r.u64()?, 1 << 32)?;
    let encoding = r.u8()?;
    let mut frames = Vec::with_capacity(count.min(1 << 20));
    match encoding {
        0 => {
            for _ in 0..count {
                frames.push(r.f64_vec(d)?);
            }
        }
        1 => {
            let action_count = r.u32()? as usize;
            let bits = d.checked_sub(action_count).ok_or_else(|| CoreError::Format {
                what: "trace file",
                detail: format!("{action_count} action channels for D={d}"),
            })?;
            let packed = bits.div_ceil(8);
            for _ in 0..count {
                let raw = r.bytes(packed)?;
                let mut f = Vec::with_capacity(d);
                for j in 0..bits {
                    f.push(f64::from(raw[j / 8] >> (j % 8) & 1));
                }
                f.extend(r.f64_vec(action_count)?);
                frames.push(f);
            }
        }
        e => {
            return Err(CoreError::Format {
                what: "trace file",
                detail: format!("unknown encoding byte {e}"),
            })
        }
    }
    r.finish()?;
    Ok((d, frames))
}

pub fn save_trace(path: &Path, frames: &[Frame], d: usize, encoding: TraceEncoding) -> Result<()> {
    Ok(std::fs::write(path, trace_to_bytes(frames, d, encoding)?)?)
}

pub fn load_trace(path: &Path) -> Result<(usize, Vec<Frame>)> {
    trace_from_bytes(&std::fs::read(path)?)
}

/// Run-length label sidecar as CSV: `start,count,domain`, one row per episode.
pub fn labels_to_csv(labels: &[String]) -> String {
    let mut out = String::from("start,count,domain\n");
    let mut i = 0;
    while i < labels.len() {
        let mut j = i;
        while j < labels.len() && labels[j] == labels[i] {
            j += 1;
        }
        out.push_str(&format!("{i},{},{}\n", j - i, labels[i]));
        i = j;
    }
    out
}

pub fn labels_from_csv(csv: &str) -> Result<Vec<String>> {
    let mut labels = Vec::new();
    for (n, line) in csv.lines().enumerate() {
        if n == 0 {
            if line.trim() != "start,count,domain" {
                return Err(CoreError::Format {
                    what: "labels file",
                    detail: format!("bad header {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(3, ',').collect();
        if parts.len() != 3 {
            return Err(CoreError::Format {
                what: "labels file",
                detail: format!("bad row {line:?}"),
            });
        }
        let start: usize = parts[0]
            .trim()
            .parse()
            .map_err(|_| CoreError::Format { what: "labels file", detail: format!("bad start in {line:?}") })?;
        let count: usize = parts[1]
            .trim()
            .parse()
            .map_err(|_| CoreError::Format { what: "labels file", detail: format!("bad count in {line:?}") })?;
        if start != labels.len() {
            return Err(CoreError::Format {
                what: "labels file",
                detail: format!("row starts at {start}, expected {}", labels.len()),
            });
        }
        labels.extend(std::iter::repeat(parts[2].trim().to_string()).take(count));
    }
    Ok(labels)
}

pub fn save_labels(path: &Path, labels: &[String]) -> Result<()> {
    Ok(std::fs::write(path, labels_to_csv(labels))?)
}

pub fn load_labels(path: &Path) -> Result<Vec<String>> {
    labels_from_csv(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counter_spec(d: usize) -> DomainSpec {
        DomainSpec { name: "c".into(), kind: GeneratorKind::Counter { span: 8 }, offset: 0, d }
    }

    #[test]
    fn counter_counts_little_endian() {
        let frames = generate(&counter_spec(12), 3, 0).unwrap();
        assert_eq!(&frames[0][..8], &[0.0; 8]);
        assert_eq!(&frames[1][..8], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&frames[2][..8], &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        // Channels outside the span stay at the background value.
        assert!(frames.iter().all(|f| f[8..].iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn counter_wraps_modulo_span() {
        let spec = DomainSpec { kind: GeneratorKind::Counter { span: 2 }, ..counter_spec(4) };
        let frames = generate(&spec, 5, 3).unwrap();
        // start = 3 mod 4; values 3, 0, 1, 2, 3.
        assert_eq!(&frames[0][..2], &[1.0, 1.0]);
        assert_eq!(&frames[1][..2], &[0.0, 0.0]);
        assert_eq!(&frames[4][..2], &[1.0, 1.0]);
    }

    #[test]
    fn period_one_is_constant() {
        let spec = DomainSpec {
            name: "p".into(),
            kind: GeneratorKind::Periodic { span: 6, period: 1 },
            offset: 2,
            d: 10,
        };
        let frames = generate(&spec, 20, 7).unwrap();
        assert!(frames.iter().all(|f| f == &frames[0]));
    }

    #[test]
    fn shift_register_rotates() {
        let spec = DomainSpec {
            name: "s".into(),
            kind: GeneratorKind::ShiftRegister { span: 5 },
            offset: 0,
            d: 5,
        };
        let frames = generate(&spec, 6, 11).unwrap();
        assert_eq!(frames[0], frames[5], "period equals the span");
        let ones: f64 = frames[0].iter().sum();
        assert!(ones > 0.0);
        for pair in frames.windows(2) {
            let a: f64 = pair[0].iter().sum();
            let b: f64 = pair[1].iter().sum();
            assert_eq!(a, b, "rotation preserves the bit count");
        }
    }

    #[test]
    fn generators_deterministic() {
        for kind in [
            GeneratorKind::Counter { span: 8 },
            GeneratorKind::ShiftRegister { span: 8 },
            GeneratorKind::Periodic { span: 8, period: 5 },
            GeneratorKind::MarkovBits { span: 8 },
        ] {
            let spec = DomainSpec { name: "x".into(), kind, offset: 1, d: 16 };
            assert_eq!(generate(&spec, 40, 9).unwrap(), generate(&spec, 40, 9).unwrap());
        }
    }

    #[test]
    fn span_outside_d_rejected() {
        let spec = DomainSpec { offset: 28, ..counter_spec(32) };
        assert!(generate(&spec, 3, 0).is_err());
    }

    #[test]
    fn single_episode_equals_generate() {
        let domains = vec![counter_spec(16)];
        let script = StreamScript {
            episodes: vec![("c".into(), 25, 4)],
            d: 16,
            domains: domains.clone(),
        };
        let (frames, labels) = compose(&script).unwrap();
        assert_eq!(frames, generate(&domains[0], 25, 4).unwrap());
        assert!(labels.iter().all(|l| l == "c"));
    }

    #[test]
    fn three_domains_three_label_runs() {
        let script = round_robin_script(desk_domains(32), 700, 1, 5).unwrap();
        let (frames, labels) = compose(&script).unwrap();
        assert_eq!(frames.len(), 2100);
        assert_eq!(labels.len(), 2100);
        let mut runs = 1;
        for pair in labels.windows(2) {
            if pair[0] != pair[1] {
                runs += 1;
            }
        }
        assert_eq!(runs, 3);
    }

    #[test]
    fn shuffled_episodes_reorder_content() {
        let domains = desk_domains(32);
        let fwd = StreamScript {
            domains: domains.clone(),
            episodes: vec![("counter".into(), 50, 1), ("periodic".into(), 50, 2)],
            d: 32,
        };
        let rev = StreamScript {
            domains,
            episodes: vec![("periodic".into(), 50, 2), ("counter".into(), 50, 1)],
            d: 32,
        };
        let (a, _) = compose(&fwd).unwrap();
        let (b, _) = compose(&rev).unwrap();
        assert_eq!(&a[..50], &b[50..]);
        assert_eq!(&a[50..], &b[..50]);
    }

    #[test]
    fn float_trace_round_trip() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let frames: Vec<Frame> =
            (0..1000).map(|_| (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let bytes = trace_to_bytes(&frames, 24, TraceEncoding::Float64).unwrap();
        let (d, got) = trace_from_bytes(&bytes).unwrap();
        assert_eq!(d, 24);
        assert_eq!(got.len(), frames.len());
        for (a, b) in got.iter().flatten().zip(frames.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bit_packed_round_trip_with_actions() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let frames: Vec<Frame> = (0..300)
            .map(|_| {
                let mut f: Frame =
                    (0..19).map(|_| f64::from(u32::from(rng.gen_bool(0.5)))).collect();
                f.push(rng.gen_range(0.0..1.0));
                f.push(rng.gen_range(0.0..1.0));
                f
            })
            .collect();
        let bytes = trace_to_bytes(&frames, 21, TraceEncoding::BitPacked { action_count: 2 }).unwrap();
        let (d, got) = trace_from_bytes(&bytes).unwrap();
        assert_eq!(d, 21);
        assert_eq!(got, frames);
        // Packing rejects fractional bit channels.
        let bad = vec![vec![0.5; 21]];
        assert!(trace_to_bytes(&bad, 21, TraceEncoding::BitPacked { action_count: 2 }).is_err());
    }

    #[test]
    fn truncated_trace_names_lengths() {
        let frames = vec![vec![1.0; 8]; 4];
        let bytes = trace_to_bytes(&frames, 8, TraceEncoding::Float64).unwrap();
        let err = trace_from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected") && msg.contains("got"), "{msg}");
    }

    #[test]
    fn paper_scale_width_loads() {
        let frames = vec![vec![0.0; 1042]; 3];
        let bytes = trace_to_bytes(&frames, 1042, TraceEncoding::Float64).unwrap();
        let (d, got) = trace_from_bytes(&bytes).unwrap();
        assert_eq!(d, 1042);
        assert_eq!(got.len(), 3);
    }

    #[test]
    fn labels_round_trip() {
        let labels: Vec<String> = ["a", "a", "a", "b", "a", "a"].iter().map(|s| s.to_string()).collect();
        let csv = labels_to_csv(&labels);
        assert_eq!(labels_from_csv(&csv).unwrap(), labels);
        assert!(labels_from_csv("bogus\n0,1,a\n").is_err());
    }

    /// Nearest-centroid separability of the default three domains; keeps the
    /// routing experiments meaningful.
    #[test]
    fn default_domains_separable_by_centroid() {
        let script = round_robin_script(desk_domains(32), 400, 1, 77).unwrap();
        let (frames, labels) = compose(&script).unwrap();
        let names: Vec<String> = {
            let mut n = labels.clone();
            n.dedup();
            n
        };
        let mut centroids: Vec<(String, Vec<f64>, usize)> =
            names.iter().map(|n| (n.clone(), vec![0.0; 32], 0)).collect();
        for (f, l) in frames.iter().zip(&labels) {
            let c = centroids.iter_mut().find(|(n, _, _)| n == l).unwrap();
            for (acc, v) in c.1.iter_mut().zip(f) {
                *acc += v;
            }
            c.2 += 1;
        }
        for c in centroids.iter_mut() {
            for v in c.1.iter_mut() {
                *v /= c.2 as f64;
            }
        }
        let mut correct = 0;
        for (f, l) in frames.iter().zip(&labels) {
            let best = centroids
                .iter()
                .min_by(|a, b| {
                    let da: f64 = a.1.iter().zip(f).map(|(x, y)| (x - y) * (x - y)).sum();
                    let db: f64 = b.1.iter().zip(f).map(|(x, y)| (x - y) * (x - y)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if &best.0 == l {
                correct += 1;
            }
        }
        assert!(
            correct * 100 >= frames.len() * 95,
            "separability {correct}/{}",
            frames.len()
        );
    }
}
