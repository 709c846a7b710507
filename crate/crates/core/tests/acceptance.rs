//! End-to-end acceptance suite. Each test pins one observable contract of
//! the engine: routing specialization, gradient integrity, memory recall and
//! scaling, interference mitigation, MDL growth, segmentation optimality,
//! key-based retrieval, consequent prediction, continuation chains,
//! explain-away encoding, and byte-level determinism of the artifacts.
//!
//! Every run is seeded; a failure is a regression, not noise.

use ltm_core::bank::{self, GrowthPolicy, ProgramBank, Trainer};
use ltm_core::datagen::{self, DomainSpec, GeneratorKind, TraceEncoding};
use ltm_core::lifelong::{self, Lifelong, LifelongSettings, PredictMode};
use ltm_core::seqae::{self, Frame, ParamLayout, Window};
use ltm_core::vmem::{Payload, VectorMemory};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::time::Instant;

fn windows_of(frames: &[Frame], l: usize) -> Vec<Window> {
    let seg = lifelong::segment_fixed(frames.len(), l).unwrap();
    seg.spans.iter().map(|&(s, len)| frames[s..s + len].to_vec()).collect()
}

/// Per-domain modal program and its share of the domain's windows.
fn modal_map(bank: &ProgramBank, labeled: &[(String, Window)]) -> BTreeMap<String, (usize, f64)> {
    let counts = bank.usage_matrix(labeled).unwrap();
    let mut per: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for ((dom, prog), c) in &counts {
        let row = per.entry(dom.clone()).or_insert_with(|| vec![0; bank.len()]);
        row[*prog] += c;
    }
    per.into_iter()
        .map(|(dom, row)| {
            let total: u64 = row.iter().sum();
            let (modal, max) = row.iter().enumerate().max_by_key(|(_, c)| **c).unwrap();
            (dom, (modal, *max as f64 / total as f64))
        })
        .collect()
}

/// Thresholded reconstruction accuracy under each window's argmin program.
fn bit_accuracy(bank: &ProgramBank, windows: &[Window]) -> f64 {
    let flats = bank.stretched_all().unwrap();
    let (mut correct, mut total) = (0usize, 0usize);
    for w in windows {
        let r = bank.route_with(w, &flats).unwrap();
        let thought = seqae::encode(w, &flats[r.argmin], &bank.layout).unwrap();
        let dec = seqae::decode(&thought, w.len(), &flats[r.argmin], &bank.layout).unwrap();
        for (df, wf) in dec.iter().zip(w) {
            for (dv, wv) in df.iter().zip(wf) {
                if (*dv >= 0.5) == (*wv >= 0.5) {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    correct as f64 / total as f64
}

fn shuffled_epochs(
    trainer: &mut Trainer,
    bank: &mut ProgramBank,
    windows: &[Window],
    epochs: usize,
    rng: &mut ChaCha8Rng,
) {
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(16) {
            let batch: Vec<&[Frame]> = chunk.iter().map(|&i| windows[i].as_slice()).collect();
            trainer.train_step(bank, &batch).unwrap();
        }
    }
}

/// Three unsignaled domains, three programs: every domain settles on its own
/// modal program (>= 90% of windows) and the domain-to-program map is a
/// bijection.
#[test]
fn c01_domain_specialization() {
    let t0 = Instant::now();
    let script = datagen::round_robin_script(datagen::desk_domains(32), 700, 3, 5).unwrap();
    let (frames, labels) = datagen::compose(&script).unwrap();
    assert!(frames.len() >= 6000, "stream too short: {}", frames.len());

    let layout = ParamLayout::new(32, 16, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bank = ProgramBank::new(layout, 0, 3, 11, 0.01, &mut rng).unwrap();
    let mut trainer = Trainer::new(0.01, &bank);
    let windows = windows_of(&frames, 7);
    // Episode length is a multiple of the window, so the label at the first
    // frame holds for the whole window.
    let labeled: Vec<(String, Window)> = windows
        .iter()
        .enumerate()
        .map(|(i, w)| (labels[i * 7].clone(), w.clone()))
        .collect();

    shuffled_epochs(&mut trainer, &mut bank, &windows, 12, &mut rng);

    let map = modal_map(&bank, &labeled);
    println!("modal routing after training: {map:?} [{:?}]", t0.elapsed());
    assert_eq!(map.len(), 3);
    let mut seen = std::collections::BTreeSet::new();
    for (dom, (prog, share)) in &map {
        assert!(*share >= 0.90, "{dom}: modal share {share:.3} < 0.90");
        assert!(seen.insert(*prog), "{dom}: program {prog} already claimed");
    }
    assert!(t0.elapsed().as_secs() < 600, "over the ten-minute budget");
}

/// Analytic gradients through loss -> LSTM -> stretcher -> embedding match
/// central finite differences to a relative error below 1e-4.
#[test]
fn c02_gradient_integrity() {
    use ltm_core::numeric::Tape;
    use ltm_core::stretcher;

    let layout = ParamLayout::new(6, 4, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let bank = ProgramBank::new(layout.clone(), 0, 1, 3, 0.05, &mut rng).unwrap();
    let mut emb = bank.programs[0].embedding.clone();

    use rand::Rng;
    let window: Window = (0..3)
        .map(|_| (0..6).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut tape = Tape::new();
    let sn = stretcher::stretcher_leaves(&mut tape, &bank.stretcher).unwrap();
    let e = tape.leaf_vector(emb.clone());
    let flat = stretcher::build_stretch(&mut tape, e, &sn).unwrap();
    let loss = seqae::build_window_loss(&mut tape, flat, &window, &layout, 0).unwrap();
    tape.forward().unwrap();
    tape.backward(loss).unwrap();
    let ad = tape.grad(e).to_vec();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..emb.len() {
        let orig = emb[i];
        let mut probe = |v: f64| -> f64 {
            emb[i] = v;
            let flat = stretcher::stretch(&emb, &bank.stretcher).unwrap();
            seqae::window_loss(&window, &flat, &layout, 0).unwrap()
        };
        let up = probe(orig + h);
        let down = probe(orig - h);
        emb[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (ad[i] - fd).abs() / f64::max(1.0, fd.abs());
        worst = worst.max(err);
        assert!(err < 1e-4, "embedding {i}: analytic {} vs fd {fd} (err {err:.2e})", ad[i]);
    }
    println!("max relative error over 64 embedding components: {worst:.3e}");
}

/// A train step whose batch routes entirely to one program leaves every other
/// embedding bit-identical.
#[test]
fn c03_min_tying_isolation() {
    let layout = ParamLayout::new(8, 6, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bank = ProgramBank::new(layout, 0, 3, 7, 0.05, &mut rng).unwrap();
    let mut trainer = Trainer::new(0.01, &bank);

    let spec = DomainSpec {
        name: "counter".into(),
        kind: GeneratorKind::Counter { span: 8 },
        offset: 0,
        d: 8,
    };
    let frames = datagen::generate(&spec, 200, 3).unwrap();
    let windows = windows_of(&frames, 4);

    let flats = bank.stretched_all().unwrap();
    let j = bank.route_with(&windows[0], &flats).unwrap().argmin;
    let batch_windows: Vec<&Window> = windows
        .iter()
        .filter(|w| bank.route_with(w, &flats).unwrap().argmin == j)
        .take(8)
        .collect();
    assert!(!batch_windows.is_empty());

    let before: Vec<Vec<f64>> = bank.programs.iter().map(|p| p.embedding.clone()).collect();
    let batch: Vec<&[Frame]> = batch_windows.iter().map(|w| w.as_slice()).collect();
    let metrics = trainer.train_step(&mut bank, &batch).unwrap();
    for (i, &u) in metrics.usage.iter().enumerate() {
        assert_eq!(u > 0, i == j, "batch was not routed entirely to program {j}");
    }
    for (i, p) in bank.programs.iter().enumerate() {
        if i == j {
            assert_ne!(p.embedding, before[i], "winner's embedding never moved");
        } else {
            assert_eq!(p.embedding, before[i], "program {i} drifted without gradient");
        }
    }
    println!("batch of {} windows routed to program {j}; other embeddings untouched", batch.len());
}

/// Approximate reads recover the oracle's nearest records on 10k N(0,1)
/// keys, and insert/query latency grows sublinearly from 1k to 100k records.
#[test]
fn c04_memory_contract() {
    use rand_distr::{Distribution, StandardNormal};
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut key = move || -> Vec<f64> {
        (0..64).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<_>>()
    };

    let mut mem = VectorMemory::new(4);
    for i in 0..10_000u64 {
        mem.write(key(), Payload::Program { program: i as u32 }).unwrap();
    }
    let queries: Vec<Vec<f64>> = (0..1000).map(|_| key()).collect();
    let (mut hit1, mut hit10) = (0usize, 0usize);
    for q in &queries {
        let truth = mem.read_exact(q, 1).unwrap()[0].1.id;
        let approx = mem.read(q, 10).unwrap();
        if approx[0].1.id == truth {
            hit1 += 1;
        }
        if approx.iter().any(|(_, r)| r.id == truth) {
            hit10 += 1;
        }
    }
    let (recall1, recall10) = (hit1 as f64 / 1000.0, hit10 as f64 / 1000.0);
    println!("recall@1 {recall1:.3} recall@10 {recall10:.3} [{:?}]", t0.elapsed());
    assert!(recall1 >= 0.95, "recall@1 {recall1:.3} < 0.95");
    assert!(recall10 >= 0.90, "recall@10 {recall10:.3} < 0.90");

    // Latency scaling: measure inserts 900..1000 vs 99900..100000 and 200
    // probe queries at both sizes.
    let mut mem = VectorMemory::new(5);
    let probes: Vec<Vec<f64>> = (0..200).map(|_| key()).collect();
    let (mut insert_1k, mut query_1k) = (0.0f64, 0.0f64);
    let mut t = Instant::now();
    for i in 0..100_000u64 {
        if i == 900 {
            t = Instant::now();
        }
        if i == 1000 {
            insert_1k = t.elapsed().as_secs_f64() / 100.0;
            let tq = Instant::now();
            for q in &probes {
                mem.read(q, 1).unwrap();
            }
            query_1k = tq.elapsed().as_secs_f64() / 200.0;
        }
        if i == 99_900 {
            t = Instant::now();
        }
        mem.write(key(), Payload::Program { program: i as u32 }).unwrap();
    }
    let insert_100k = t.elapsed().as_secs_f64() / 100.0;
    let tq = Instant::now();
    for q in &probes {
        mem.read(q, 1).unwrap();
    }
    let query_100k = tq.elapsed().as_secs_f64() / 200.0;
    let insert_slope = (insert_100k / insert_1k).ln() / 100f64.ln();
    let query_slope = (query_100k / query_1k).ln() / 100f64.ln();
    println!(
        "insert {insert_1k:.2e}s -> {insert_100k:.2e}s (slope {insert_slope:.3}); \
         query {query_1k:.2e}s -> {query_100k:.2e}s (slope {query_slope:.3}) [{:?}]",
        t0.elapsed()
    );
    assert!(insert_slope < 0.5, "insert slope {insert_slope:.3} >= 0.5");
    assert!(query_slope < 0.5, "query slope {query_slope:.3} >= 0.5");
}

/// Replay from episodic memory protects domain A while domain B trains; the
/// replay-free twin forgets strictly more.
#[test]
fn c05_interference_mitigation() {
    let t0 = Instant::now();
    let d = 16;
    let spec_a = DomainSpec {
        name: "a".into(),
        kind: GeneratorKind::Counter { span: 8 },
        offset: 0,
        d,
    };
    let spec_b = DomainSpec {
        name: "b".into(),
        kind: GeneratorKind::ShiftRegister { span: 8 },
        offset: 8,
        d,
    };
    let frames_a = datagen::generate(&spec_a, 1500, 3).unwrap();
    let frames_b = datagen::generate(&spec_b, 1500, 4).unwrap();
    let windows_a = windows_of(&frames_a, 5);

    let layout = ParamLayout::new(d, 12, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bank = ProgramBank::new(layout, 0, 1, 9, 0.05, &mut rng).unwrap();
    let mut settings = LifelongSettings::default();
    settings.window_len = 5;
    settings.buffer_capacity = 2048;
    settings.train_passes = 70;
    settings.grow_on_consolidate = false;
    settings.replay_ratio = 0.3;
    let mut life = Lifelong::new(bank, settings.clone()).unwrap();
    life.ingest(&frames_a).unwrap();
    life.flush().unwrap();
    let acc_a0 = bit_accuracy(&life.bank, &windows_a);
    println!("A after phase one: {acc_a0:.4} [{:?}]", t0.elapsed());
    assert!(acc_a0 >= 0.99, "phase-one accuracy {acc_a0:.4} < 0.99");

    let mut retained = BTreeMap::new();
    for (ratio, tag) in [(0.3, "replay"), (0.0, "none")] {
        let mut s = settings.clone();
        s.replay_ratio = ratio;
        s.train_passes = 10;
        let mut arm = Lifelong::with_memory(life.bank.clone(), life.memory.clone(), s).unwrap();
        arm.ingest(&frames_b).unwrap();
        arm.flush().unwrap();
        let acc_a = bit_accuracy(&arm.bank, &windows_a);
        let acc_b = bit_accuracy(&arm.bank, &windows_of(&frames_b, 5));
        println!("{tag}: A {acc_a:.4} B {acc_b:.4} [{:?}]", t0.elapsed());
        retained.insert(tag, acc_a);
    }
    assert!(retained["replay"] >= 0.95, "replay arm retained {:.4} < 0.95", retained["replay"]);
    assert!(
        retained["none"] < retained["replay"],
        "no-replay arm retained {:.4}, not strictly less than {:.4}",
        retained["none"],
        retained["replay"]
    );
}

/// On three statistically distinct domains a two-program bank grows to
/// exactly three programs under the default policy, each accepted growth
/// strictly lowering mean min-loss.
#[test]
fn c06_growth() {
    let t0 = Instant::now();
    let mut windows = Vec::new();
    for seed in [279u64, 326, 552] {
        let spec = DomainSpec {
            name: format!("m{seed}"),
            kind: GeneratorKind::MarkovBits { span: 8 },
            offset: 0,
            d: 8,
        };
        let frames = datagen::generate(&spec, 7500, seed).unwrap();
        windows.extend(windows_of(&frames, 5));
    }
    assert_eq!(windows.len(), 4500);

    let layout = ParamLayout::new(8, 6, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bank = ProgramBank::new(layout, 0, 2, 7, 0.05, &mut rng).unwrap();
    let mut trainer = Trainer::new(0.01, &bank);

    let events =
        bank::grow(&mut bank, &mut trainer, &windows, &GrowthPolicy::default(), &mut rng).unwrap();
    for e in &events {
        println!(
            "growth event: old {:.4} new {:.4} accepted {} -> {} programs [{:?}]",
            e.old_loss,
            e.new_loss,
            e.accepted,
            e.n_programs,
            t0.elapsed()
        );
    }
    assert_eq!(bank.len(), 3, "expected exactly 3 programs, got {}", bank.len());
    assert!(events.iter().any(|e| e.accepted), "no growth was accepted");
    for e in &events {
        if e.accepted {
            assert!(e.new_loss < e.old_loss, "accepted growth did not lower mean min-loss");
        }
    }
    assert!(!events.last().unwrap().accepted, "growth stopped by cap, not by rejection");
}

/// For every range length up to 12 with spans of 2 or 3, the DP tiling cost
/// equals the exhaustive minimum exactly.
#[test]
fn c07_dp_segmentation() {
    fn enumerate_min(
        n: usize,
        start: usize,
        costs: &dyn Fn(usize, usize) -> f64,
        acc: f64,
        best: &mut f64,
    ) {
        if start == n {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for len in [2usize, 3] {
            if start + len <= n {
                enumerate_min(n, start + len, costs, acc + costs(start, len), best);
            }
        }
    }

    for cost_seed in [1u64, 2, 3] {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(cost_seed);
        let mut table = BTreeMap::new();
        for start in 0..12 {
            for len in [2usize, 3] {
                table.insert((start, len), rng.gen::<f64>());
            }
        }
        let cost = |s: usize, l: usize| table[&(s, l)];

        // Length 1 is not coverable by spans of 2 or 3.
        assert!(lifelong::segment_dp(1, &[2, 3], cost).is_err());

        for n in (0..=12).filter(|&n| n != 1) {
            let seg = lifelong::segment_dp(n, &[2, 3], cost).unwrap();
            let mut tiled = 0;
            let mut dp_cost = 0.0;
            for &(s, l) in &seg.spans {
                assert_eq!(s, tiled, "spans must tile the range in order");
                dp_cost += cost(s, l);
                tiled += l;
            }
            assert_eq!(tiled, n);

            let mut best = if n == 0 { 0.0 } else { f64::INFINITY };
            enumerate_min(n, 0, &cost, 0.0, &mut best);
            assert_eq!(dp_cost, best, "length {n}, cost table {cost_seed}");
        }
    }
    println!("dp cost equals exhaustive minimum for all lengths 0..=12 (three cost tables)");
}

/// With 64 programs and key-based retrieval, evaluating only 4 candidates
/// still contains the full routing argmin for >= 85% of windows.
#[test]
fn c08_retrieval_speedup() {
    use ltm_core::keyclass::{self, KeyClassifier, KeyTrainer};
    let t0 = Instant::now();
    let d = 16usize;
    let wl = 5usize;

    let mut windows = Vec::new();
    for i in 0..64usize {
        let spec = DomainSpec {
            name: format!("fam{i}"),
            kind: GeneratorKind::Periodic { span: 8, period: 2 + i % 3 },
            offset: i % (d - 8 + 1),
            d,
        };
        let frames = datagen::generate(&spec, 30 * wl, 1000 + i as u64).unwrap();
        windows.extend(windows_of(&frames, wl));
    }

    let layout = ParamLayout::new(d, 6, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bank = ProgramBank::new(layout, 0, 64, 11, 0.05, &mut rng).unwrap();

    let flats = bank.stretched_all().unwrap();
    let argmins: Vec<usize> =
        windows.iter().map(|w| bank.route_with(w, &flats).unwrap().argmin).collect();
    let mut counts = vec![0usize; 64];
    for &a in &argmins {
        counts[a] += 1;
    }
    let mut sorted = counts.clone();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let top4: usize = sorted[..4].iter().sum();
    println!(
        "routing spread: {} distinct winners; best fixed 4-set covers {}/{} [{:?}]",
        counts.iter().filter(|&&c| c > 0).count(),
        top4,
        windows.len(),
        t0.elapsed()
    );

    keyclass::init_keys(&mut bank, 2);
    let mut clf = KeyClassifier::new(d, 3).unwrap();
    let mut kt = KeyTrainer::new(0.01, d);
    kt.fit_retrieval(&windows, &mut bank, &mut clf, 12, 1e-4).unwrap();

    let mut memory = VectorMemory::new(99);
    keyclass::write_program_keys(&bank, &mut memory).unwrap();
    let mut hits = 0usize;
    for (w, &a) in windows.iter().zip(&argmins) {
        let cands = keyclass::retrieve_programs(w, &clf, &memory, 4).unwrap();
        assert!(cands.len() <= 4);
        if cands.contains(&a) {
            hits += 1;
        }
    }
    let rate = hits as f64 / windows.len() as f64;
    println!("hit rate {rate:.4} evaluating 4/64 candidates [{:?}]", t0.elapsed());
    assert!(rate >= 0.85, "hit rate {rate:.4} < 0.85");
}

/// Consequent records over one counter period predict held-out next windows
/// at >= 99% thresholded bit accuracy with k = 1.
#[test]
fn c09_prediction() {
    let t0 = Instant::now();
    let d = 8usize;
    let wl = 5usize;
    let spec = DomainSpec {
        name: "counter".into(),
        kind: GeneratorKind::Counter { span: 8 },
        offset: 0,
        d,
    };
    let frames = datagen::generate(&spec, 400 * wl, 7).unwrap();
    let windows = windows_of(&frames, wl);
    let train = &windows[..257];

    let layout = ParamLayout::new(d, 16, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bank = ProgramBank::new(layout, 0, 1, 13, 0.05, &mut rng).unwrap();
    let mut settings = LifelongSettings::default();
    settings.window_len = wl;
    settings.buffer_capacity = 4096;
    settings.replay_ratio = 0.0;
    settings.lr = 0.005;
    settings.seed = 21;
    settings.grow_on_consolidate = false;
    let mut eng = Lifelong::new(bank, settings).unwrap();

    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..100 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(16) {
            let batch: Vec<&[Frame]> = chunk.iter().map(|&i| train[i].as_slice()).collect();
            eng.trainer.train_step(&mut eng.bank, &batch).unwrap();
        }
    }
    println!("reconstruction after training: {:.4} [{:?}]", bit_accuracy(&eng.bank, train), t0.elapsed());

    // One full 256-step period of consequents; the stream beyond index 257
    // revisits the same counter states at unseen positions.
    for i in 0..256 {
        eng.store_consequent(&windows[i], &windows[i + 1]).unwrap();
    }
    let (mut correct, mut total) = (0usize, 0usize);
    for i in 257..windows.len() - 1 {
        let pred = eng.predict_next(&windows[i], 1, PredictMode::Average).unwrap();
        assert_eq!(pred.len(), 1);
        for (pf, tf) in pred[0].iter().zip(&windows[i + 1]) {
            for (pv, tv) in pf.iter().zip(tf) {
                if (*pv >= 0.5) == (*tv >= 0.5) {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    let acc = correct as f64 / total as f64;
    println!("held-out next-step bit accuracy {acc:.4} [{:?}]", t0.elapsed());
    assert!(acc >= 0.99, "next-step accuracy {acc:.4} < 0.99");
}

/// An 8-frame sequence with window 4 encodes as a two-call chain whose head
/// trains against 6 elements; decoding the head reproduces >= 95% of bits.
#[test]
fn c10_continuation() {
    use ltm_core::lifelong::{continuation_windows, decode_continuation, encode_continuation};
    let t0 = Instant::now();
    let seqs: Vec<Vec<Frame>> = (0..3)
        .map(|i| {
            let spec = DomainSpec {
                name: format!("s{i}"),
                kind: GeneratorKind::ShiftRegister { span: 64 },
                offset: 0,
                d: 64,
            };
            datagen::generate(&spec, 8, 100 + i as u64).unwrap()
        })
        .collect();

    let layout = ParamLayout::new(65, 40, 40).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bank = ProgramBank::new(layout, 0, 1, 17, 0.05, &mut rng).unwrap();
    let mut trainer = Trainer::new(0.005, &bank);

    // Re-encode between rounds so the tagged tails track the drifting
    // thoughts they point at.
    for _ in 0..120 {
        let mut wins = Vec::new();
        for s in &seqs {
            wins.extend(continuation_windows(s, 4, &bank).unwrap());
        }
        assert_eq!(wins[0].len(), 6, "head target must be 4 literals + tagged call pair");
        for _ in 0..10 {
            let batch: Vec<&[Frame]> = wins.iter().map(|w| w.as_slice()).collect();
            trainer.train_step(&mut bank, &batch).unwrap();
        }
    }

    let (mut correct, mut total) = (0usize, 0usize);
    for s in &seqs {
        let calls = encode_continuation(s, 4, &bank).unwrap();
        assert_eq!(calls.len(), 2);
        let out = decode_continuation(&calls[0], &bank, 8).unwrap();
        assert_eq!(out.len(), s.len(), "chain decode dropped frames");
        for (of, sf) in out.iter().zip(s) {
            for (ov, sv) in of.iter().zip(sf) {
                if (*ov >= 0.5) == (*sv >= 0.5) {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    let acc = correct as f64 / total as f64;
    println!("continuation bit accuracy {acc:.4} ({correct}/{total}) [{:?}]", t0.elapsed());
    assert!(acc >= 0.95, "continuation accuracy {acc:.4} < 0.95");
}

/// Composite windows built from two trained patterns are explained by
/// exactly two calls with a near-zero, strictly decreasing residual.
#[test]
fn c11_explain_away() {
    use ltm_core::lifelong::explain_away_encode;
    let t0 = Instant::now();
    let d = 16usize;
    let wl = 5usize;
    let counter = DomainSpec {
        name: "counter".into(),
        kind: GeneratorKind::Counter { span: 8 },
        offset: 0,
        d,
    };
    let periodic = DomainSpec {
        name: "periodic".into(),
        kind: GeneratorKind::Periodic { span: 8, period: 4 },
        offset: 8,
        d,
    };
    let cw = windows_of(&datagen::generate(&counter, 300 * wl, 3).unwrap(), wl);
    let pw = windows_of(&datagen::generate(&periodic, 300 * wl, 4).unwrap(), wl);
    let mut train: Vec<Window> = cw.iter().chain(&pw).cloned().collect();

    let layout = ParamLayout::new(d, 12, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bank = ProgramBank::new(layout, 0, 2, 7, 0.05, &mut rng).unwrap();
    let mut trainer = Trainer::new(0.005, &bank);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..60 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(16) {
            let batch: Vec<&[Frame]> = chunk.iter().map(|&i| train[i].as_slice()).collect();
            trainer.train_step(&mut bank, &batch).unwrap();
        }
    }
    train.clear();
    let labeled: Vec<(String, Window)> = cw
        .iter()
        .map(|w| ("counter".to_string(), w.clone()))
        .chain(pw.iter().map(|w| ("periodic".to_string(), w.clone())))
        .collect();
    let map = modal_map(&bank, &labeled);
    println!("expert specialization: {map:?} [{:?}]", t0.elapsed());

    let flats = bank.stretched_all().unwrap();
    let cells = (wl * d) as f64;
    let mut worst_residual = 0.0f64;
    for i in 0..50 {
        // Patterns occupy disjoint channels, so the composite is their sum.
        let comp: Window = cw[i]
            .iter()
            .zip(&pw[i])
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let calls = explain_away_encode(&comp, &bank, 0.01).unwrap();
        assert_eq!(calls.len(), 2, "composite {i}: expected exactly two calls");

        let mut residual = comp.clone();
        let mut prev = residual.iter().flatten().map(|v| v * v).sum::<f64>() / cells;
        for (p, th) in &calls {
            let dec = seqae::decode(th, wl, &flats[*p], &bank.layout).unwrap();
            for (rf, df) in residual.iter_mut().zip(&dec) {
                for (rv, dv) in rf.iter_mut().zip(df) {
                    *rv -= dv;
                }
            }
            let cost = residual.iter().flatten().map(|v| v * v).sum::<f64>() / cells;
            assert!(cost < prev, "composite {i}: residual loss did not strictly decrease");
            prev = cost;
        }
        let mean_abs = residual.iter().flatten().map(|v| v.abs()).sum::<f64>() / cells;
        worst_residual = worst_residual.max(mean_abs);
        assert!(mean_abs < 0.1, "composite {i}: residual mean |value| {mean_abs:.4} >= 0.1");
    }
    println!("50 composites explained; worst residual mean |value| {worst_residual:.4} [{:?}]", t0.elapsed());
}

/// Identical seeds produce identical artifacts, and every file format
/// round-trips byte for byte.
#[test]
fn c12_determinism_persistence() {
    use ltm_core::cli::{cmd_gen, cmd_train};
    use ltm_core::config::ExperimentConfig;
    use ltm_core::model_file::ModelFile;

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.d = 24;
    cfg.h = 6;
    cfg.thought_width = 6;
    cfg.window = 5;
    cfg.programs = 2;
    cfg.density = 0.05;
    cfg.buffer_capacity = 64;
    cfg.gen_domains = datagen::desk_domains(24);
    cfg.gen_frames = 40;
    cfg.gen_rounds = 2;
    cfg.gen_seed = 11;
    cfg.trace = dir.path().join("trace.ltmt");
    cfg.labels = dir.path().join("labels.csv");
    cfg.model = dir.path().join("a.ltmm");
    cfg.metrics = dir.path().join("a.csv");
    cmd_gen(&cfg).unwrap();
    cmd_train(&cfg).unwrap();

    let mut cfg_b = cfg.clone();
    cfg_b.model = dir.path().join("b.ltmm");
    cfg_b.metrics = dir.path().join("b.csv");
    cmd_train(&cfg_b).unwrap();

    let model_a = std::fs::read(&cfg.model).unwrap();
    let model_b = std::fs::read(&cfg_b.model).unwrap();
    assert_eq!(model_a, model_b, "same seed, different model bytes");
    assert_eq!(
        std::fs::read(&cfg.metrics).unwrap(),
        std::fs::read(&cfg_b.metrics).unwrap(),
        "same seed, different metrics"
    );
    assert_eq!(
        std::fs::read(cfg.metrics.with_extension("usage.csv")).unwrap(),
        std::fs::read(cfg_b.metrics.with_extension("usage.csv")).unwrap(),
        "same seed, different usage counts"
    );

    // Trace round-trip, both encodings.
    let trace_bytes = std::fs::read(&cfg.trace).unwrap();
    let (d, frames) = datagen::trace_from_bytes(&trace_bytes).unwrap();
    let repacked =
        datagen::trace_to_bytes(&frames, d, TraceEncoding::BitPacked { action_count: 0 }).unwrap();
    assert_eq!(repacked, trace_bytes, "bit-packed trace round-trip");
    let floats = datagen::trace_to_bytes(&frames, d, TraceEncoding::Float64).unwrap();
    let (d2, frames2) = datagen::trace_from_bytes(&floats).unwrap();
    assert_eq!((d2, &frames2), (d, &frames), "float trace round-trip");

    // Model round-trip.
    let parsed = ModelFile::from_bytes(&model_a).unwrap();
    assert_eq!(parsed.to_bytes(), model_a, "model bytes round-trip");

    // Memory round-trip, all payload kinds.
    let mut mem = VectorMemory::new(3);
    mem.write(vec![0.25; 64], Payload::Program { program: 7 }).unwrap();
    mem.write(
        vec![0.5; 64],
        Payload::Episodic { program: 1, thought: vec![0.1, -0.2], position: 42 },
    )
    .unwrap();
    mem.write(
        vec![-0.75; 64],
        Payload::Consequent { next_thought: vec![0.3, 0.4], next_program: 0 },
    )
    .unwrap();
    let id = mem.write(vec![1.0; 64], Payload::Program { program: 8 }).unwrap();
    mem.delete(id);
    let bytes = mem.to_bytes();
    let back = VectorMemory::from_bytes(&bytes, 3).unwrap();
    assert_eq!(back.to_bytes(), bytes, "memory bytes round-trip");
    println!("artifacts deterministic; trace, model, and memory round-trip byte-exactly");
}
