//! Acceptance checks. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use loopy_rnn::data::{generate_synthetic, load_dataset, save_dataset, AugmentationSpec, Patch, PatchDataset};
use loopy_rnn::evaluator::{evaluate, fpr_at_recall, mean_average_precision, score_dataset, ScoredPair};
use loopy_rnn::featurenet::{normalize_patch, FeatureConfig, FeatureNetParams};
use loopy_rnn::gradcheck::{reference_gradcheck, GradCheckOptions};
use loopy_rnn::losses::{monotonous_loss, Label};
use loopy_rnn::metricnet::{Aggregation, LoopyConfig};
use loopy_rnn::model::LoopyModel;
use loopy_rnn::tensor::{GradCheckTolerance, Graph};
use loopy_rnn::trainer::{Checkpoint, TrainConfig, Trainer};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn criterion(n: u32, title: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let pass = o.pass && in_time;
    let timing = match limit {
        Some(l) => format!("{:.1}s, limit {}s", elapsed.as_secs_f64(), l.as_secs()),
        None => format!("{:.1}s", elapsed.as_secs_f64()),
    };
    println!(
        "criterion {n} {}: {title}: {}{} ({timing})",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        if in_time { "" } else { "; over time limit" }
    );
    pass
}

fn tiny_model(seed: u64, n: usize, d: usize) -> LoopyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LoopyModel::init(FeatureConfig::tiny(), LoopyConfig::new(n, d, 0), &mut rng).unwrap()
}

fn random_patch(rng: &mut ChaCha8Rng, size: usize) -> Patch {
    let mut pixels = vec![0u8; size * size];
    rng.fill_bytes(&mut pixels);
    Patch { height: size, width: size, pixels }
}

fn gradient_correctness() -> Outcome {
    let opts = GradCheckOptions {
        step: 1e-5,
        tolerance: GradCheckTolerance { rtol: 1e-4, atol: 1e-7 },
        max_per_group: Some(128),
        seed: 0,
        freeze_branches: true,
    };
    let report = reference_gradcheck(0, &opts).unwrap();
    let checked: usize = report.groups.iter().map(|g| g.checked).sum();
    let failed: usize = report.groups.iter().map(|g| g.failed).sum();
    let kinks: usize = report.groups.iter().map(|g| g.kinks).sum();
    let worst_abs = report.groups.iter().map(|g| g.worst_absolute).fold(0.0, f64::max);
    outcome(
        report.passed(),
        format!(
            "{} groups, {checked} entries, {failed} failed, worst abs err {worst_abs:.2e}, {kinks} stencils crossed a kink",
            report.groups.len()
        ),
    )
}

fn symmetry() -> Outcome {
    let mut mismatches = 0;
    for draw in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
        let n = [4, 6, 8][rng.random_range(0..3)];
        let d = [4, 8, 16][rng.random_range(0..3)];
        let model = tiny_model(draw, n, d);
        let (a, b) = (random_patch(&mut rng, 16), random_patch(&mut rng, 16));
        let agg = if rng.random_bool(0.5) { Aggregation::MeanAll } else { Aggregation::MeanLastTwo };
        let (s_ab, q_ab) = model.match_pair(&a, &b, agg).unwrap();
        let (s_ba, q_ba) = model.match_pair(&b, &a, agg).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if s_ab.to_bits() != s_ba.to_bits() || bits(q_ab.scores()) != bits(q_ba.scores()) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches}/100 draws differ under patch swap"))
}

/// Direct evaluation of the per-node penalty from its definition.
fn monotonous_oracle(s: &[f64], y: Label) -> Vec<f64> {
    (0..s.len())
        .map(|n| {
            if n == 0 {
                return 0.0;
            }
            let prev = &s[..n];
            let pre = if y.is_match() {
                prev.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            } else {
                prev.iter().cloned().fold(f64::INFINITY, f64::min)
            };
            let sign = if y.is_match() { -1.0 } else { 1.0 };
            f64::max(0.0, sign * (s[n] - pre))
        })
        .collect()
}

fn monotonous_oracle_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut mismatches, mut nonzero_on_monotone) = (0, 0);
    for _ in 0..1000 {
        let len = rng.random_range(2..12);
        let s: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
        for y in [Label::Match, Label::NonMatch] {
            if monotonous_loss(&s, y) != monotonous_oracle(&s, y) {
                mismatches += 1;
            }
            let mut sorted = s.clone();
            sorted.sort_by(f64::total_cmp);
            if !y.is_match() {
                sorted.reverse();
            }
            if monotonous_loss(&sorted, y).iter().any(|&v| v != 0.0) {
                nonzero_on_monotone += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && nonzero_on_monotone == 0,
        format!("{mismatches} mismatches over 2000 sequences, {nonzero_on_monotone} non-zero on monotone-correct ones"),
    )
}

/// FPR at the largest distinct threshold reaching `target`, by direct counting.
fn fpr_oracle(sp: &[ScoredPair], target: f64) -> f64 {
    let p = sp.iter().filter(|x| x.label.is_match()).count();
    let n = sp.len() - p;
    let mut thresholds: Vec<f64> = sp.iter().map(|x| x.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    for t in thresholds {
        let tp = sp.iter().filter(|x| x.score >= t && x.label.is_match()).count();
        if tp as f64 / p as f64 >= target {
            let fp = sp.iter().filter(|x| x.score >= t && !x.label.is_match()).count();
            return fp as f64 / n as f64;
        }
    }
    unreachable!()
}

/// Average precision with each positive's rank counted directly.
fn ap_oracle(sp: &[ScoredPair]) -> f64 {
    let rank = |i: usize| {
        1 + (0..sp.len())
            .filter(|&j| sp[j].score > sp[i].score || (sp[j].score == sp[i].score && j < i))
            .count()
    };
    let mut ranks: Vec<usize> = (0..sp.len()).filter(|&i| sp[i].label.is_match()).map(rank).collect();
    ranks.sort_unstable();
    let sum: f64 = ranks.iter().enumerate().map(|(k, &r)| (k + 1) as f64 / r as f64).sum();
    sum / ranks.len() as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for set in 0..200 {
        let len = rng.random_range(2..=1000);
        // coarse grids on some sets force many ties
        let levels = if set % 2 == 0 { 20 } else { 1_000_000 };
        let mut sp: Vec<ScoredPair> = (0..len)
            .map(|_| ScoredPair {
                score: rng.random_range(0..levels) as f64 / levels as f64,
                label: if rng.random_bool(0.5) { Label::Match } else { Label::NonMatch },
            })
            .collect();
        sp[0].label = Label::Match;
        sp[1].label = Label::NonMatch;
        let target = [0.95, 0.5, 1.0][set % 3];
        if fpr_at_recall(&sp, target).unwrap() != fpr_oracle(&sp, target) {
            mismatches += 1;
        }
        if mean_average_precision(&sp).unwrap() != ap_oracle(&sp) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over 200 sets"))
}

fn train_accuracy(model: &LoopyModel, ds: &PatchDataset, agg: Aggregation) -> f64 {
    let scored = score_dataset(model, ds, agg).unwrap();
    scored.iter().filter(|p| (p.score > 0.5) == p.label.is_match()).count() as f64 / scored.len() as f64
}

fn effectiveness_config(seed: u64, lambda: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.3,
        batch_size: 16,
        max_epochs: 200,
        lambda,
        augmentation: AugmentationSpec::none(),
        seed,
        ..TrainConfig::default()
    }
}

fn training_effectiveness() -> Outcome {
    let train = generate_synthetic(8, 4, 16, 0);
    let test = generate_synthetic(25, 4, 16, 1000);
    let cfg = effectiveness_config(0, 0.4);
    let agg = cfg.aggregation();
    let model = tiny_model(0, 6, 16);
    let before = evaluate(&model, &test, agg).unwrap().fpr95;
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let mut acc = train_accuracy(&trainer.model, &train, agg);
    while acc < 0.95 && trainer.epoch < 200 {
        trainer.train_epoch(&train).unwrap();
        acc = train_accuracy(&trainer.model, &train, agg);
    }
    let after = evaluate(&trainer.model, &test, agg).unwrap().fpr95;
    outcome(
        acc >= 0.95 && after < before,
        format!(
            "train accuracy {acc:.3} after {} epochs; held-out fpr95 {after:.3} vs untrained {before:.3}",
            trainer.epoch
        ),
    )
}

fn violation_fraction(model: &LoopyModel, ds: &PatchDataset) -> f64 {
    let mut violations = 0;
    for i in 0..ds.pairs.len() {
        let p = ds.pair(i);
        let seq = model.score_sequence(&p.a, &p.b).unwrap();
        if monotonous_loss(seq.scores(), p.label).iter().any(|&v| v > 0.0) {
            violations += 1;
        }
    }
    violations as f64 / ds.pairs.len() as f64
}

fn monotonicity_effect() -> Outcome {
    let train = generate_synthetic(8, 4, 16, 0);
    let test = generate_synthetic(25, 4, 16, 1000);
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let mut frac = [0.0; 2];
        for (slot, lambda) in [0.4, 0.0].into_iter().enumerate() {
            let cfg = TrainConfig { max_epochs: 60, ..effectiveness_config(seed, lambda) };
            let mut t = Trainer::new(tiny_model(seed, 6, 16), cfg).unwrap();
            t.run(&train, |_, _| Ok(())).unwrap();
            frac[slot] = violation_fraction(&t.model, &test);
        }
        ok &= frac[0] <= frac[1];
        parts.push(format!("seed {seed}: {:.3} vs {:.3}", frac[0], frac[1]));
    }
    outcome(ok, format!("violating fraction λ=0.4 vs λ=0: {}", parts.join(", ")))
}

fn shape_conformance() -> Outcome {
    let expected: Vec<Vec<usize>> = [
        [24, 64, 64],
        [24, 32, 32],
        [64, 32, 32],
        [64, 16, 16],
        [96, 16, 16],
        [96, 16, 16],
        [64, 16, 16],
        [64, 8, 8],
    ]
    .iter()
    .map(|s| s.to_vec())
    .collect();
    let params = FeatureNetParams::zeros(FeatureConfig::full());
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.input(normalize_patch(&[128; 64 * 64], 64, 64).unwrap());
    let (out, shapes) = bound.forward_traced(&mut g, x).unwrap();
    let features_ok = shapes == expected && g.value(out).len() == 4096;

    let mut unroll_ok = true;
    let patch = generate_synthetic(2, 1, 16, 0).store.patch(0);
    for n in [6, 8, 10, 12] {
        let seq = tiny_model(n as u64, n, 4).score_sequence(&patch, &patch).unwrap();
        unroll_ok &= seq.scores().len() == n - 1 && seq.ab.scores.len() == n - 1;
    }
    outcome(
        features_ok && unroll_ok,
        format!("feature shapes match: {features_ok}; N-1 scores for N in 6,8,10,12: {unroll_ok}"),
    )
}

fn determinism_and_round_trips() -> Outcome {
    let ds = generate_synthetic(4, 2, 16, 5);
    let run = || {
        let cfg = TrainConfig { learning_rate: 0.1, batch_size: 4, max_epochs: 3, seed: 5, ..TrainConfig::default() };
        let mut t = Trainer::new(tiny_model(5, 6, 8), cfg).unwrap();
        let log: Vec<String> = t.run(&ds, |_, _| Ok(())).unwrap().iter().map(|e| e.to_string()).collect();
        (log, t.checkpoint())
    };
    let (log_a, ck_a) = run();
    let (log_b, ck_b) = run();
    let logs_equal = log_a == log_b && ck_a.to_bytes() == ck_b.to_bytes();

    let bytes = ck_a.to_bytes();
    let ck_round = Checkpoint::from_bytes(&bytes).map(|c| c.to_bytes() == bytes && c == ck_a).unwrap_or(false);

    let tmp = tempfile::TempDir::new().unwrap();
    save_dataset(&ds, tmp.path().join("a")).unwrap();
    let back = load_dataset(tmp.path().join("a")).unwrap();
    save_dataset(&back, tmp.path().join("b")).unwrap();
    let ds_round = back == ds
        && ["patches.lprd", "pairs.tsv"].iter().all(|f| {
            std::fs::read(tmp.path().join("a").join(f)).unwrap() == std::fs::read(tmp.path().join("b").join(f)).unwrap()
        });
    outcome(
        logs_equal && ck_round && ds_round,
        format!(
            "identical logs ({} lines): {logs_equal}; checkpoint byte-exact: {ck_round}; dataset byte-exact: {ds_round}",
            log_a.len()
        ),
    )
}

fn main() {
    let secs = Duration::from_secs;
    let results = [
        criterion(1, "gradient correctness", Some(secs(60)), gradient_correctness),
        criterion(2, "swap symmetry", Some(secs(30)), symmetry),
        criterion(3, "monotonous loss oracle", Some(secs(5)), monotonous_oracle_check),
        criterion(4, "fpr95 and mAP oracles", Some(secs(30)), metric_oracles),
        criterion(5, "training effectiveness", Some(secs(300)), training_effectiveness),
        criterion(6, "monotonicity effect", None, monotonicity_effect),
        criterion(7, "shape conformance", None, shape_conformance),
        criterion(8, "determinism and round trips", None, determinism_and_round_trips),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
