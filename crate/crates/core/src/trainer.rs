//! End-to-end training: regime construction, environment interaction
//! with warm-up phases, per-step network and extractor updates, periodic
//! soft target updates, step logging, and checkpointing.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngExt;

use crate::adie::Adie;
use crate::cfe::{CausalExtractor, FeatureExtractor, PlainExtractor};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{build_regime, load_table, split_train_test, Dataset, MinMaxScaler};
use crate::error::{Error, Result};
use crate::harness;
use crate::iforest::IsolationForest;
use crate::sac::{AgentNets, ReplayBuffer, Transition};
use crate::seed_stream;

/// Everything one training run produces.
#[derive(Debug)]
pub struct TrainOutput {
    pub seed: u64,
    pub test_auc: f64,
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub step_log_path: Option<PathBuf>,
    pub runtime_seconds: f64,
    /// Counterfactual constructions performed by the extractor; zero
    /// under the no_causal ablation.
    pub counterfactual_calls: u64,
}

/// Standardizes unsupervised scores against the unlabeled pool so the
/// reward's sign reflects relative outlierness: zero at the pool's
/// (1 − ratio_target) quantile — the same fraction of the data the
/// threshold mechanism treats as anomaly-leaning — robust-scaled by the
/// upper tail, clamped to [-1, 1]. Raw (0,1) scores can only push
/// unlabeled actions up, which saturates the policy.
fn standardize_scores(scores: &mut HashMap<usize, f64>, unlabeled_ids: &[usize], ratio_target: f64) {
    let mut pool: Vec<f64> = unlabeled_ids.iter().map(|id| scores[id]).collect();
    if pool.len() < 2 {
        return;
    }
    pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| pool[((q * (pool.len() - 1) as f64).round() as usize).min(pool.len() - 1)];
    let center = quantile((1.0 - ratio_target).clamp(0.0, 1.0));
    let scale = (quantile(0.95) - quantile(0.5)).max(0.02);
    for v in scores.values_mut() {
        *v = ((*v - center) / scale).clamp(-1.0, 1.0);
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Output file stem embedding dataset, ablation flags, and seed.
pub fn run_stem(config: &RunConfig, dataset_name: &str, seed: u64) -> String {
    format!("{}_{}_seed{}", sanitize(dataset_name), config.ablation.suffix(), seed)
}

/// Loads the configured dataset and trains one seed.
pub fn train(config: &RunConfig, seed: u64) -> Result<TrainOutput> {
    if config.data_path.is_empty() {
        return Err(Error::config("data_path is not set".to_string()));
    }
    let data = load_table(Path::new(&config.data_path), &config.label_col, config.delimiter)?;
    train_on(config, &data, seed)
}

/// Trains one seed on an in-memory dataset.
pub fn train_on(config: &RunConfig, data: &Dataset, seed: u64) -> Result<TrainOutput> {
    config.validate()?;
    let started = Instant::now();

    // regime: stratified split, scaling fitted on train only
    let (train_raw, test_raw) = split_train_test(data, config.test_fraction, seed)?;
    let scaler = MinMaxScaler::fit(&train_raw)?;
    let train_scaled = scaler.transform(&train_raw)?;
    let regime = build_regime(
        &train_scaled,
        config.anomalies_ratio,
        config.contamination_ratio,
        seed,
        config.contamination_base,
        config.contamination_shortfall,
    )?;

    // unsupervised reference fitted once on the unlabeled pool; scores
    // are precomputed for every training point and stay fixed
    let unlabeled_features: Vec<Vec<f64>> =
        regime.d_u.points.iter().map(|p| p.features.clone()).collect();
    let forest = IsolationForest::fit(
        &unlabeled_features,
        config.iforest_trees,
        config.iforest_subsample,
        seed,
    )?;
    let mut forest_scores: HashMap<usize, f64> = HashMap::new();
    for p in regime.d_a.points.iter().chain(&regime.d_u.points) {
        forest_scores.insert(p.id, forest.score(&p.features));
    }
    if config.iforest_recentered {
        standardize_scores(
            &mut forest_scores,
            &regime.d_u.points.iter().map(|p| p.id).collect::<Vec<_>>(),
            config.effective_ratio_target(),
        );
    }

    let labeled: Vec<(usize, Vec<f64>)> =
        regime.d_a.points.iter().map(|p| (p.id, p.features.clone())).collect();
    let unlabeled: Vec<(usize, Vec<f64>)> =
        regime.d_u.points.iter().map(|p| (p.id, p.features.clone())).collect();

    let env_cfg = config.effective_env_config();
    let mut env = Adie::new(
        labeled.clone(),
        unlabeled.clone(),
        Some(forest_scores.clone()),
        env_cfg.clone(),
        seed,
    )?;

    let mut extractor = if config.ablation.no_causal {
        FeatureExtractor::Plain(PlainExtractor::new(
            data.dim,
            config.plain_hidden_dim,
            config.feature_dim,
            config.cfe_tau,
            config.sac.grad_clip,
            config.cfe_lr,
            seed,
        ))
    } else {
        FeatureExtractor::Causal(CausalExtractor::new(
            data.dim,
            config.token_dim,
            config.feature_dim,
            config.cfe_tau,
            config.mmd_bandwidth_floor,
            config.sac.grad_clip,
            config.cfe_lr,
            seed,
        ))
    };

    let mut agent = AgentNets::new(config.feature_dim, &config.sac, seed);
    let mut buffer = ReplayBuffer::new(config.sac.replay_capacity);
    let mut action_rng = seed_stream(seed, "actions");
    let mut update_rng = seed_stream(seed, "updates");

    std::fs::create_dir_all(&config.output_dir)?;
    let stem = run_stem(config, &data.name, seed);
    let checkpoint_path = Path::new(&config.output_dir).join(format!("{stem}.checkpoint.json"));
    let step_log_path = config
        .write_step_log
        .then(|| Path::new(&config.output_dir).join(format!("{stem}.steps.csv")));
    let mut step_log = match &step_log_path {
        Some(p) => {
            let mut w = std::io::BufWriter::new(std::fs::File::create(p)?);
            writeln!(w, "step,pool,id,action,th,reward")?;
            Some(w)
        }
        None => None,
    };

    let mut global_step: u64 = 0;
    for episode in 1..=config.episodes {
        if config.reset_pools_per_episode && episode > 1 {
            env = Adie::new(
                labeled.clone(),
                unlabeled.clone(),
                Some(forest_scores.clone()),
                env_cfg.clone(),
                seed.wrapping_add(episode),
            )?;
        }
        for step in 1..=config.steps_per_episode {
            global_step += 1;
            let obs = env.current_features().to_vec();

            let action = if global_step <= config.sac.warmup_steps {
                action_rng.random()
            } else {
                let f = extractor.features(&obs)?;
                agent.sample_action(&f, &mut action_rng)?.0
            };

            let outcome = env.step(action).map_err(|e| {
                Error::numerical(format!("episode {episode}, step {step}: {e}"))
            })?;
            let next_obs = env
                .features_of(outcome.next_id)
                .expect("sampled id has features")
                .clone();
            buffer.push(Transition {
                obs,
                action,
                reward: outcome.reward,
                next_obs,
            });

            if let Some(w) = step_log.as_mut() {
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    global_step,
                    outcome.decided_pool.letter(),
                    outcome.decided_id,
                    action,
                    outcome.threshold,
                    outcome.reward
                )?;
            }

            if buffer.len() > config.sac.warmup_size {
                update_step(
                    config,
                    &mut agent,
                    &mut extractor,
                    &buffer,
                    &mut update_rng,
                    global_step,
                )
                .map_err(|e| {
                    Error::numerical(format!("update at episode {episode}, step {step}: {e}"))
                })?;
            }
        }
        // checkpoint at every episode end; the final one remains
        let ckpt = Checkpoint::from_state(&agent, &extractor, &scaler, &config.hash());
        ckpt.save(&checkpoint_path)?;
    }
    if let Some(w) = step_log.as_mut() {
        w.flush()?;
    }

    let checkpoint = Checkpoint::from_state(&agent, &extractor, &scaler, &config.hash());
    checkpoint.save(&checkpoint_path)?;

    let scores = harness::score_with(&extractor, &agent.policy, &scaler, &test_raw)?;
    let test_auc = harness::auc_roc(&scores, &test_raw.labels())?;

    Ok(TrainOutput {
        seed,
        test_auc,
        counterfactual_calls: extractor.counterfactual_calls(),
        checkpoint,
        checkpoint_path,
        step_log_path,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

/// One minibatch update: critics toward the bootstrapped target, value
/// toward the entropy-regularized minimum critic, policy through the
/// reparameterized sample, then the extractor's own loss. The soft
/// target update fires on its configured interval.
fn update_step(
    config: &RunConfig,
    agent: &mut AgentNets,
    extractor: &mut FeatureExtractor,
    buffer: &ReplayBuffer,
    rng: &mut rand_chacha::ChaCha8Rng,
    global_step: u64,
) -> Result<()> {
    let batch = buffer.sample(config.sac.batch_size, rng)?;
    let obs: Vec<Vec<f64>> = batch.iter().map(|t| t.obs.clone()).collect();
    let next_obs: Vec<Vec<f64>> = batch.iter().map(|t| t.next_obs.clone()).collect();
    let actions: Vec<f64> = batch.iter().map(|t| t.action).collect();

    // features are recomputed from raw observations with the current
    // extractor, never cached in the buffer
    let features = extractor.features_batch(&obs)?;
    let next_features = extractor.features_batch(&next_obs)?;

    let targets: Vec<f64> = batch
        .iter()
        .zip(&next_features)
        .map(|(t, fnext)| agent.compute_target(t.reward, fnext))
        .collect::<Result<_>>()?;

    let (loss_q1, loss_q2) = agent.update_critics(&features, &actions, &targets)?;
    let loss_value = agent.update_value(&features, rng)?;
    let loss_policy = agent.update_policy(&features, rng)?;
    let loss_extractor = {
        let policy = &agent.policy;
        extractor.train_step(&obs, &|f| crate::harness::deterministic_action(policy, f))?
    };

    for (name, loss) in [
        ("q1", loss_q1),
        ("q2", loss_q2),
        ("value", loss_value),
        ("policy", loss_policy),
        ("extractor", loss_extractor),
    ] {
        if !loss.is_finite() {
            return Err(Error::numerical(format!("{name} loss became non-finite")));
        }
    }

    if global_step.is_multiple_of(config.sac.target_update_interval) {
        agent.soft_update_target()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_dataset;

    /// Small but complete configuration: exercises the uniform-action
    /// phase, the buffered-updates gate, threshold updates, soft target
    /// updates, and per-episode checkpoints in a few seconds.
    pub(crate) fn tiny_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig {
            output_dir: dir.to_string_lossy().into_owned(),
            episodes: 2,
            steps_per_episode: 220,
            ..RunConfig::default()
        };
        cfg.sac.warmup_steps = 150;
        cfg.sac.warmup_size = 300;
        cfg.sac.batch_size = 16;
        cfg.sac.hidden_dim = 24;
        cfg.feature_dim = 8;
        cfg.token_dim = 6;
        cfg.env.candidate_cap = 64;
        cfg.env.history_window = 40;
        cfg.iforest_trees = 25;
        cfg.iforest_subsample = 64;
        cfg.seeds = vec![0];
        cfg
    }

    #[test]
    fn tiny_run_completes_all_phases_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let data = synthetic_dataset(400, 40, 6, 11);

        let out1 = train_on(&cfg, &data, 0).unwrap();
        assert!(out1.test_auc > 0.0 && out1.test_auc <= 1.0);
        assert!(out1.checkpoint_path.exists());
        assert!(out1.counterfactual_calls > 0);

        let log = std::fs::read_to_string(out1.step_log_path.as_ref().unwrap()).unwrap();
        // header plus one record per step
        assert_eq!(log.lines().count() as u64, 1 + cfg.episodes * cfg.steps_per_episode);

        let bytes1 = std::fs::read(&out1.checkpoint_path).unwrap();
        let out2 = train_on(&cfg, &data, 0).unwrap();
        let bytes2 = std::fs::read(&out2.checkpoint_path).unwrap();
        assert_eq!(bytes1, bytes2, "identical seeds must produce identical checkpoints");
        assert_eq!(out1.test_auc, out2.test_auc);
    }

    #[test]
    fn no_causal_ablation_never_builds_counterfactuals() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.ablation.no_causal = true;
        let data = synthetic_dataset(300, 30, 5, 13);
        let out = train_on(&cfg, &data, 1).unwrap();
        assert_eq!(out.counterfactual_calls, 0);
        assert!(out.checkpoint.no_causal);
    }

    #[test]
    fn fixed_threshold_ablation_keeps_a_constant_trace() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.ablation.fixed_threshold = true;
        let data = synthetic_dataset(300, 30, 5, 17);
        let out = train_on(&cfg, &data, 2).unwrap();
        let log = std::fs::read_to_string(out.step_log_path.unwrap()).unwrap();
        let mut th_values: Vec<&str> = Vec::new();
        for line in log.lines().skip(1) {
            th_values.push(line.split(',').nth(4).unwrap());
        }
        assert!(th_values.iter().all(|t| *t == th_values[0]));
    }

    #[test]
    fn different_seeds_produce_different_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let data = synthetic_dataset(300, 30, 5, 19);
        let a = train_on(&cfg, &data, 0).unwrap();
        let b = train_on(&cfg, &data, 1).unwrap();
        assert_ne!(a.checkpoint.to_json(), b.checkpoint.to_json());
    }

    #[test]
    fn checkpoint_scoring_matches_live_scoring() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let data = synthetic_dataset(300, 30, 5, 23);
        let out = train_on(&cfg, &data, 3).unwrap();

        let reloaded = Checkpoint::load(&out.checkpoint_path).unwrap();
        let scorer = harness::Scorer::from_checkpoint(&reloaded).unwrap();
        let (_, test_raw) = split_train_test(&data, cfg.test_fraction, 3).unwrap();
        let scores = scorer.score(&test_raw).unwrap();
        let auc = harness::auc_roc(&scores, &test_raw.labels()).unwrap();
        assert_eq!(auc, out.test_auc);
    }
}
