//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (run with `-- --nocapture` to see them).
//!
//! The quantitative criteria (1-5) need real datasets as delimited text
//! with a 0/1 `label` column. Point `TRICRLAD_DATA_DIR` at a directory
//! holding `cardio.csv`, `satimage2.csv`, and `annthyroid.csv` (default:
//! `<workspace>/data`); without the files those criteria are reported as
//! SKIPPED. The property criteria (6-13) need no external data.

use std::path::{Path, PathBuf};

use rand::RngExt;

use tricrlad::adie::{Adie, EnvConfig, PoolId};
use tricrlad::cfe::{asymmetric_l2, cfe_loss, mmd, BandwidthMode, CfeParams};
use tricrlad::config::RunConfig;
use tricrlad::dataset::{
    build_regime, load_table, split_train_test, ContaminationBase, ContaminationShortfall,
    Dataset, MinMaxScaler,
};
use tricrlad::diffnet::{xavier_init, Activation, DenseNet};
use tricrlad::harness::{auc_roc, run_experiment_on, RunMetrics};
use tricrlad::iforest::IsolationForest;
use tricrlad::seed_stream;
use tricrlad::synth::synthetic_dataset;

fn report(criterion: &str, passed: bool, detail: &str) {
    println!(
        "acceptance {criterion}: {} ({detail})",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "{criterion}: {detail}");
}

fn skip(criterion: &str, why: &str) {
    println!("acceptance {criterion}: SKIPPED ({why})");
}

fn data_dir() -> PathBuf {
    std::env::var("TRICRLAD_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|_| {
            Path::new(env!("CARGO_MANIFEST_DIR"))
                .join("../../data")
        })
}

fn load_named(name: &str) -> Option<Dataset> {
    let path = data_dir().join(format!("{name}.csv"));
    if !path.exists() {
        return None;
    }
    Some(load_table(&path, "label", ',').expect("supplied dataset must parse"))
}

fn reference_config(out_dir: &Path) -> RunConfig {
    RunConfig {
        output_dir: out_dir.to_string_lossy().into_owned(),
        anomalies_ratio: 0.1,
        contamination_ratio: 0.1,
        seeds: vec![0, 1, 2, 3, 4],
        ..RunConfig::default()
    }
}

fn quantitative_auc(criterion: &str, dataset: &str, floor: f64) {
    let Some(data) = load_named(dataset) else {
        skip(criterion, &format!("{dataset}.csv not found under {}", data_dir().display()));
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let cfg = reference_config(dir.path());
    let metrics = run_experiment_on(&cfg, &data).unwrap();
    report(
        criterion,
        metrics.mean_auc >= floor,
        &format!(
            "{dataset}: mean AUC {:.4} ± {:.4} over {} seeds, need ≥ {floor}",
            metrics.mean_auc,
            metrics.std_auc,
            metrics.seed_results.len()
        ),
    );
}

#[test]
fn criterion_01_cardio_auc() {
    quantitative_auc("criterion 1 (cardio AUC)", "cardio", 0.90);
}

#[test]
fn criterion_02_satimage2_auc() {
    quantitative_auc("criterion 2 (satimage2 AUC)", "satimage2", 0.93);
}

#[test]
fn criterion_03_annthyroid_auc() {
    quantitative_auc("criterion 3 (annthyroid AUC)", "annthyroid", 0.85);
}

#[test]
fn criterion_04_iforest_reference_on_cardio() {
    let criterion = "criterion 4 (isolation-forest cardio reference)";
    let Some(data) = load_named("cardio") else {
        skip(criterion, &format!("cardio.csv not found under {}", data_dir().display()));
        return;
    };
    assert_eq!(
        (data.dim, data.len(), data.anomaly_count()),
        (21, 1831, 176),
        "cardio export shape: 21 features, 1831 rows, 176 anomalies"
    );
    // deterministic unsupervised reference: regime for the first seed,
    // forest fitted on the unlabeled pool, ranked on the held-out test
    let seed = 0;
    let (train_raw, test_raw) = split_train_test(&data, 0.2, seed).unwrap();
    let scaler = MinMaxScaler::fit(&train_raw).unwrap();
    let train = scaler.transform(&train_raw).unwrap();
    let test = scaler.transform(&test_raw).unwrap();
    let regime = build_regime(
        &train,
        0.1,
        0.1,
        seed,
        ContaminationBase::Unlabeled,
        ContaminationShortfall::CapAtAvailable,
    )
    .unwrap();
    let du: Vec<Vec<f64>> = regime.d_u.points.iter().map(|p| p.features.clone()).collect();
    let forest = IsolationForest::fit(&du, 100, 256, seed).unwrap();
    let scores: Vec<f64> = test.points.iter().map(|p| forest.score(&p.features)).collect();
    let auc = auc_roc(&scores, &test.labels()).unwrap();
    report(
        criterion,
        (auc - 0.920).abs() <= 0.03,
        &format!("iforest test AUC {auc:.4}, need within ±0.03 of 0.920"),
    );
}

#[test]
fn criterion_05_ablation_ordering_on_cardio() {
    let criterion = "criterion 5 (ablation ordering)";
    let Some(data) = load_named("cardio") else {
        skip(criterion, &format!("cardio.csv not found under {}", data_dir().display()));
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let run = |flag: Option<&str>| -> RunMetrics {
        let mut cfg = reference_config(dir.path());
        if let Some(f) = flag {
            cfg.ablation.enable(f).unwrap();
        }
        run_experiment_on(&cfg, &data).unwrap()
    };
    let full = run(None);
    let wo_th = run(Some("fixed_threshold"));
    let wo_rw = run(Some("simple_reward"));
    let wo_causal = run(Some("no_causal"));
    let ok = full.mean_auc >= wo_th.mean_auc
        && full.mean_auc >= wo_rw.mean_auc
        && full.mean_auc >= wo_causal.mean_auc;
    report(
        criterion,
        ok,
        &format!(
            "full {:.4} vs wo_th {:.4}, wo_rw {:.4}, wo_causal {:.4}",
            full.mean_auc, wo_th.mean_auc, wo_rw.mean_auc, wo_causal.mean_auc
        ),
    );
}

/// Central-difference oracle for a dense net under the linear loss
/// L(y) = g·y; returns (worst relative error, worst near-zero absolute
/// error). Independent of the backward implementation it checks.
fn dense_finite_diff(net: &DenseNet, x: &[f64], g: &[f64]) -> (f64, f64) {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let (_, tape) = net.forward(x).unwrap();
    let (grads, _) = net.backward(&tape, g).unwrap();
    let h = 1e-5;
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut probe = net.clone();
    for li in 0..net.layers.len() {
        for i in 0..net.layers[li].weights.data.len() {
            let orig = net.layers[li].weights.data[i];
            probe.layers[li].weights.data[i] = orig + h;
            let lp = dot(&probe.infer(x).unwrap(), g);
            probe.layers[li].weights.data[i] = orig - h;
            let lm = dot(&probe.infer(x).unwrap(), g);
            probe.layers[li].weights.data[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads.layers[li].0.data[i];
            let err = (numeric - analytic).abs();
            if analytic.abs() > 1e-6 {
                worst_rel = worst_rel.max(err / analytic.abs());
            } else {
                worst_abs = worst_abs.max(err);
            }
        }
        for i in 0..net.layers[li].bias.len() {
            let orig = net.layers[li].bias[i];
            probe.layers[li].bias[i] = orig + h;
            let lp = dot(&probe.infer(x).unwrap(), g);
            probe.layers[li].bias[i] = orig - h;
            let lm = dot(&probe.infer(x).unwrap(), g);
            probe.layers[li].bias[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads.layers[li].1[i];
            let err = (numeric - analytic).abs();
            if analytic.abs() > 1e-6 {
                worst_rel = worst_rel.max(err / analytic.abs());
            } else {
                worst_abs = worst_abs.max(err);
            }
        }
    }
    (worst_rel, worst_abs)
}

/// Central-difference oracle over every parameter tensor of the combined
/// extractor loss at a pinned bandwidth.
fn cfe_finite_diff(seed: u64) -> (f64, f64) {
    let mut rng = seed_stream(seed, "acc-cfe");
    let d = 4;
    let batch: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let a_sac: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..0.9)).collect();
    let params = CfeParams::init(d, 8, 8, seed.wrapping_add(1000));
    let bw = BandwidthMode::Fixed(0.8);
    let (_, grads) = cfe_loss(&params, &batch, &a_sac, 0.7, bw).unwrap();
    let eval = |p: &CfeParams| cfe_loss(p, &batch, &a_sac, 0.7, bw).unwrap().0;

    let h = 1e-5;
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut check = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * h);
        let err = (numeric - analytic).abs();
        if analytic.abs() > 1e-6 {
            worst_rel = worst_rel.max(err / analytic.abs());
        } else {
            worst_abs = worst_abs.max(err);
        }
    };
    macro_rules! probe_matrix {
        ($field:ident) => {{
            let mut p = params.clone();
            for i in 0..p.$field.data.len() {
                let orig = p.$field.data[i];
                p.$field.data[i] = orig + h;
                let lp = eval(&p);
                p.$field.data[i] = orig - h;
                let lm = eval(&p);
                p.$field.data[i] = orig;
                check(grads.$field.data[i], lp, lm);
            }
        }};
    }
    probe_matrix!(token_scale);
    probe_matrix!(token_offset);
    probe_matrix!(w_query);
    probe_matrix!(w_key);
    probe_matrix!(w_value);
    probe_matrix!(w_out);
    let mut p = params.clone();
    for i in 0..p.b_out.len() {
        let orig = p.b_out[i];
        p.b_out[i] = orig + h;
        let lp = eval(&p);
        p.b_out[i] = orig - h;
        let lm = eval(&p);
        p.b_out[i] = orig;
        check(grads.b_out[i], lp, lm);
    }
    for i in 0..p.w_score.len() {
        let orig = p.w_score[i];
        p.w_score[i] = orig + h;
        let lp = eval(&p);
        p.w_score[i] = orig - h;
        let lm = eval(&p);
        p.w_score[i] = orig;
        check(grads.w_score[i], lp, lm);
    }
    let orig = p.scaler;
    p.scaler = orig + h;
    let lp = eval(&p);
    p.scaler = orig - h;
    let lm = eval(&p);
    p.scaler = orig;
    check(grads.scaler, lp, lm);
    let orig = p.b_score;
    p.b_score = orig + h;
    let lp = eval(&p);
    p.b_score = orig - h;
    let lm = eval(&p);
    p.b_score = orig;
    check(grads.b_score, lp, lm);
    (worst_rel, worst_abs)
}

#[test]
fn criterion_06_gradient_suite() {
    let criterion = "criterion 6 (gradient suite)";
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut instances = 0;

    // 16 random dense networks with mixed shapes and activations
    for seed in 0..16u64 {
        let mut rng = seed_stream(seed, "acc-grad");
        let shapes: [&[usize]; 4] =
            [&[3, 8, 2], &[5, 16, 8, 1], &[2, 32, 4], &[4, 7, 7, 7, 2]];
        let mut net = xavier_init(shapes[(seed % 4) as usize], seed);
        if net.layers.len() > 1 {
            net.layers[0].activation = match seed % 3 {
                0 => Activation::Tanh,
                1 => Activation::Sigmoid,
                _ => Activation::Relu,
            };
        }
        let x: Vec<f64> = (0..net.in_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..net.out_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (rel, abs) = dense_finite_diff(&net, &x, &g);
        worst_rel = worst_rel.max(rel);
        worst_abs = worst_abs.max(abs);
        instances += 1;
    }
    // 5 extractor instances through the combined loss
    for seed in 0..5u64 {
        let (rel, abs) = cfe_finite_diff(seed);
        worst_rel = worst_rel.max(rel);
        worst_abs = worst_abs.max(abs);
        instances += 1;
    }
    report(
        criterion,
        instances >= 20 && worst_rel < 1e-4 && worst_abs < 1e-6,
        &format!(
            "{instances} instances, worst relative error {worst_rel:.2e}, worst near-zero {worst_abs:.2e}"
        ),
    );
}

fn fuzz_env(seed: u64) -> Adie {
    let data = synthetic_dataset(300, 20, 4, seed);
    let labeled: Vec<(usize, Vec<f64>)> = data
        .points
        .iter()
        .filter(|p| p.label == Some(1))
        .take(5)
        .map(|p| (p.id, p.features.clone()))
        .collect();
    let unlabeled: Vec<(usize, Vec<f64>)> = data
        .points
        .iter()
        .filter(|p| p.label != Some(1))
        .map(|p| (p.id, p.features.clone()))
        .collect();
    let scores = labeled
        .iter()
        .chain(&unlabeled)
        .map(|(id, _)| (*id, 0.4 + (*id % 10) as f64 * 0.05))
        .collect();
    let cfg = EnvConfig {
        candidate_cap: 64,
        history_window: 50,
        episode_len: 1_000_000,
        ..EnvConfig::default()
    };
    Adie::new(labeled, unlabeled, Some(scores), cfg, seed).unwrap()
}

#[test]
fn criterion_07_pool_state_machine_fuzz() {
    let criterion = "criterion 7 (pool state-machine fuzz)";
    let mut env = fuzz_env(42);
    let mut rng = seed_stream(42, "acc-fuzz");
    let steps = 100_000;
    for i in 0..steps {
        let action: f64 = rng.random();
        env.step(action).unwrap();
        if let Err(e) = env.check_invariants() {
            report(criterion, false, &format!("violation at step {i}: {e}"));
            return;
        }
    }
    report(criterion, true, &format!("{steps} random steps, zero violations"));
}

#[test]
fn criterion_08_reward_branch_table() {
    let criterion = "criterion 8 (reward branch table)";
    let mut env = fuzz_env(7);
    let mut ok = true;
    let mut detail = String::new();

    // hand-computed branch values at TH = 0.8 (the initial threshold)
    let a_id = {
        let data = synthetic_dataset(300, 20, 4, 7);
        data.points.iter().find(|p| p.label == Some(1)).unwrap().id
    };
    let u_id = {
        let data = synthetic_dataset(300, 20, 4, 7);
        data.points.iter().find(|p| p.label != Some(1)).unwrap().id
    };
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;

    // labeled anomaly, action 1.0: 2·0.2 + 1
    ok &= close(env.reward(a_id, 1.0, Some(0.7)).unwrap(), 1.4);
    // labeled anomaly below threshold: max(0,·) clamps to +1
    ok &= close(env.reward(a_id, 0.5, Some(0.7)).unwrap(), 1.0);
    // unlabeled: (action − TH)·score
    ok &= close(env.reward(u_id, 0.6, Some(0.7)).unwrap(), -0.14);
    // temporary with confidence 2 of 3 above threshold, then below
    env.apply_transition(u_id, 0.9).unwrap();
    env.apply_transition(u_id, 0.9).unwrap();
    assert_eq!(env.pool_of(u_id), Some(PoolId::Temporary));
    ok &= close(env.reward(u_id, 0.9, Some(0.7)).unwrap(), 2.0 / 3.0);
    ok &= close(env.reward(u_id, 0.5, Some(0.7)).unwrap(), -1.0);
    // defensive fallback for an unlabeled point without a forest score
    let u_id2 = {
        let data = synthetic_dataset(300, 20, 4, 7);
        data.points
            .iter()
            .filter(|p| p.label != Some(1))
            .nth(1)
            .unwrap()
            .id
    };
    assert_eq!(env.pool_of(u_id2), Some(PoolId::Unlabeled));
    ok &= close(env.reward(u_id2, 0.9, None).unwrap(), -0.01);
    if !ok {
        detail.push_str("hand-computed branch mismatch; ");
    }

    // bounds under clamped thresholds and arbitrary actions
    let mut env = fuzz_env(8);
    let mut rng = seed_stream(8, "acc-reward");
    let mut min_seen = f64::INFINITY;
    let mut max_seen = f64::NEG_INFINITY;
    for _ in 0..20_000 {
        let out = env.step(rng.random()).unwrap();
        min_seen = min_seen.min(out.reward);
        max_seen = max_seen.max(out.reward);
        if !(-1.0..=2.0).contains(&out.reward) {
            ok = false;
            detail.push_str(&format!("reward {} escaped [-1,2]; ", out.reward));
            break;
        }
    }
    report(
        criterion,
        ok,
        &format!("{detail}rewards observed in [{min_seen:.3}, {max_seen:.3}] ⊂ [-1, 2]"),
    );
}

#[test]
fn criterion_09_threshold_trace() {
    let criterion = "criterion 9 (threshold trace)";
    let mut env = fuzz_env(9);
    let mut rng = seed_stream(9, "acc-th");
    let cfg = EnvConfig::default();
    let mut ok = true;

    // adversarial ratio streams: all-positive, all-negative, random
    for i in 0..10_000 {
        let action: f64 = match i % 3 {
            0 => 1.0,
            1 => 0.0,
            _ => rng.random(),
        };
        env.step(action).unwrap();
        let th = env.threshold();
        if !(cfg.th_min..=cfg.th_max).contains(&th) {
            ok = false;
            break;
        }
    }

    // fixed point: ratio_current == ratio_target leaves TH unchanged;
    // verified through a fresh environment driven to the exact target
    let mut fp_env = fuzz_env(10);
    let target = fp_env.cfg.ratio_target;
    let window = fp_env.cfg.decision_window;
    let positives = (target * window as f64).round() as usize;
    for i in 0..window {
        // actions straddle the threshold to hit the target ratio exactly
        let action = if i % window < positives { 0.99 } else { 0.0 };
        fp_env.step(action).unwrap();
    }
    let before = fp_env.threshold();
    fp_env.update_threshold();
    let fixed_point_holds = (fp_env.threshold() - before).abs() < 1e-12;

    report(
        criterion,
        ok && fixed_point_holds,
        &format!(
            "10000 adversarial updates bounded: {ok}; factor fixed point at target ratio: {fixed_point_holds}"
        ),
    );
}

#[test]
fn criterion_10_mmd_oracle() {
    let criterion = "criterion 10 (MMD oracle)";
    let mut rng = seed_stream(10, "acc-mmd");
    let xs: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let self_mmd = mmd(&xs, &xs, 0.7).unwrap();

    // crafted separated batches against the closed-form kernel sums:
    // n at the origin, m at distance D, bandwidth s:
    //   1 + 1 − 2·exp(−D²/(2s²))
    let ys: Vec<Vec<f64>> = (0..5).map(|_| vec![3.0, 0.0, 0.0]).collect();
    let zs: Vec<Vec<f64>> = (0..4).map(|_| vec![0.0, 0.0, 0.0]).collect();
    let got = mmd(&zs, &ys, 1.5).unwrap();
    let expect = 2.0 - 2.0 * (-9.0f64 / (2.0 * 1.5 * 1.5)).exp();

    let ok = self_mmd <= 1e-9 && (got - expect).abs() <= 1e-9;
    report(
        criterion,
        ok,
        &format!("mmd(X,X) = {self_mmd:.2e}, separated batches {got:.12} vs closed form {expect:.12}"),
    );
}

#[test]
fn criterion_11_auc_oracle() {
    let criterion = "criterion 11 (AUC oracle)";
    let pairwise = |scores: &[f64], labels: &[u8]| {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, sj) in scores.iter().enumerate() {
                if labels[j] == 1 {
                    continue;
                }
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
        num / pairs
    };
    let mut rng = seed_stream(11, "acc-auc");
    let mut checked = 0;
    for _ in 0..200 {
        if checked == 100 {
            break;
        }
        let n = rng.random_range(10..60);
        let quantize: bool = rng.random();
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = rng.random();
                if quantize {
                    (s * 8.0).round() / 8.0
                } else {
                    s
                }
            })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.35)).collect();
        if labels.iter().all(|l| *l == 0) || labels.iter().all(|l| *l == 1) {
            continue;
        }
        let fast = auc_roc(&scores, &labels).unwrap();
        let slow = pairwise(&scores, &labels);
        if fast != slow {
            report(criterion, false, &format!("instance {checked}: {fast} != {slow}"));
            return;
        }
        checked += 1;
    }
    report(criterion, checked >= 100, &format!("{checked} random instances match exactly"));
}

/// Distinct unlabeled points visited over `steps` sampling draws under a
/// given similarity/randomness bias.
fn distinct_visits(alpha: f64, steps: usize, seed: u64) -> usize {
    let dim = 4;
    let mut rng = seed_stream(seed, "acc-divgen");
    let unlabeled: Vec<(usize, Vec<f64>)> = (1..=1000)
        .map(|i| (i, (0..dim).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect();
    let labeled = vec![(0usize, vec![0.5; dim])];
    let scores = labeled
        .iter()
        .chain(&unlabeled)
        .map(|(id, _)| (*id, 0.5))
        .collect();
    let cfg = EnvConfig { alpha_bias: alpha, ..EnvConfig::default() };
    let mut env = Adie::new(labeled, unlabeled, Some(scores), cfg, seed).unwrap();
    let mut visited = std::collections::HashSet::new();
    if env.pool_of(env.current_id()) == Some(PoolId::Unlabeled) {
        visited.insert(env.current_id());
    }
    for _ in 0..steps {
        let id = env.sample_point().unwrap();
        if env.pool_of(id) == Some(PoolId::Unlabeled) {
            visited.insert(id);
        }
    }
    visited.len()
}

#[test]
fn criterion_12_sampling_diversity() {
    let criterion = "criterion 12 (sampling diversity)";
    let full = distinct_visits(EnvConfig::default().alpha_bias, 5000, 12);
    let pure_similarity = distinct_visits(0.0, 5000, 12);
    report(
        criterion,
        full > pure_similarity,
        &format!(
            "distinct visits over 5000 draws: full strategy {full} vs pure similarity {pure_similarity}"
        ),
    );
}

#[test]
fn criterion_13_full_run_determinism() {
    let criterion = "criterion 13 (run determinism)";
    // cardio-sized synthetic data (1831 rows, 21 dims, 9.6% anomalies);
    // step counts and widths scaled so the complete pipeline — uniform
    // warm-up actions, buffered-update gate, per-step updates, threshold
    // and soft target refreshes, episode checkpoints, metrics — runs
    // inside the property-suite budget
    let data = synthetic_dataset(1655, 176, 21, 13);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig {
        output_dir: dir.path().to_string_lossy().into_owned(),
        seeds: vec![5],
        episodes: 3,
        steps_per_episode: 400,
        ..RunConfig::default()
    };
    cfg.sac.warmup_steps = 400;
    cfg.sac.warmup_size = 600;
    cfg.sac.batch_size = 32;
    cfg.sac.hidden_dim = 64;
    cfg.feature_dim = 16;
    cfg.token_dim = 8;
    cfg.env.candidate_cap = 256;
    cfg.env.history_window = 100;
    cfg.iforest_trees = 50;

    let metrics1 = run_experiment_on(&cfg, &data).unwrap();
    let ckpt_path = PathBuf::from(&metrics1.seed_results[0].checkpoint_path);
    let metrics_path = dir.path().join("synthetic_full.metrics.json");
    let ckpt_bytes1 = std::fs::read(&ckpt_path).unwrap();
    let metrics_bytes1 = std::fs::read(&metrics_path).unwrap();

    // second run into the same paths
    let metrics2 = run_experiment_on(&cfg, &data).unwrap();
    let ckpt_bytes2 = std::fs::read(&ckpt_path).unwrap();
    let metrics_bytes2 = std::fs::read(&metrics_path).unwrap();

    let ok = ckpt_bytes1 == ckpt_bytes2 && metrics_bytes1 == metrics_bytes2;
    report(
        criterion,
        ok,
        &format!(
            "checkpoint bytes identical: {}, metrics bytes identical: {}, AUC {:.4} vs {:.4}",
            ckpt_bytes1 == ckpt_bytes2,
            metrics_bytes1 == metrics_bytes2,
            metrics1.mean_auc,
            metrics2.mean_auc
        ),
    );
}

#[test]
fn asymmetric_l2_reflection_holds_at_acceptance_scale() {
    // small auxiliary check shared by the loss suite: τ-weighted
    // residuals mirror under negation
    let us = [0.4, -0.2, 1.3, -0.7];
    let neg: Vec<f64> = us.iter().map(|u| -u).collect();
    assert!((asymmetric_l2(&us, 0.7) - asymmetric_l2(&neg, 0.3)).abs() < 1e-12);
}
