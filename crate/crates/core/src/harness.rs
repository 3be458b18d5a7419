//! Evaluation and experiment driving: rank-based AUC-ROC, checkpoint
//! scoring, multi-seed aggregation, and the plot-ready report streams
//! behind the CLI.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{Dataset, MinMaxScaler};
use crate::diffnet::DenseNet;
use crate::error::{Error, Result};
use crate::parallel;
use crate::trainer::{self, TrainOutput};

/// Probability that a uniformly random anomaly outscores a uniformly
/// random normal, ties counted as one half. Computed from average ranks;
/// exactly equal to the pairwise count.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|l| **l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data("auc needs both classes present".to_string()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numerical("auc: non-finite score".to_string()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].partial_cmp(&scores[*b]).unwrap());

    // average ranks over tie groups, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Deterministic (mean) squashed action of a policy head on a feature
/// vector; the anomaly score at evaluation time.
pub fn deterministic_action(policy: &DenseNet, features: &[f64]) -> Result<f64> {
    let out = policy.infer(features)?;
    Ok((out[0].tanh() + 1.0) / 2.0)
}

/// Scores a raw dataset: scale, extract features with the counterfactual
/// query, take the deterministic policy action. Order-aligned with the
/// input.
pub fn score_with(
    extractor: &crate::cfe::FeatureExtractor,
    policy: &DenseNet,
    scaler: &MinMaxScaler,
    data: &Dataset,
) -> Result<Vec<f64>> {
    if data.dim != extractor.input_dim() {
        return Err(Error::shape(format!(
            "dataset dim {} != extractor dim {}",
            data.dim,
            extractor.input_dim()
        )));
    }
    parallel::map_slice(&data.points, |p| {
        let scaled = scaler.transform_vec(&p.features)?;
        let f = extractor.features(&scaled)?;
        deterministic_action(policy, &f)
    })
    .into_iter()
    .collect()
}

/// Sequential twin of [`score_with`] for the execution-mode benchmarks.
pub fn score_with_seq(
    extractor: &crate::cfe::FeatureExtractor,
    policy: &DenseNet,
    scaler: &MinMaxScaler,
    data: &Dataset,
) -> Result<Vec<f64>> {
    parallel::map_slice_seq(&data.points, |p| {
        let scaled = scaler.transform_vec(&p.features)?;
        let f = extractor.features(&scaled)?;
        deterministic_action(policy, &f)
    })
    .into_iter()
    .collect()
}

/// Scoring pipeline rebuilt from a checkpoint.
pub struct Scorer {
    pub extractor: crate::cfe::FeatureExtractor,
    pub policy: DenseNet,
    pub scaler: MinMaxScaler,
}

impl Scorer {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Scorer {
            extractor: ckpt.extractor()?,
            policy: ckpt.policy()?,
            scaler: ckpt.scaler(),
        })
    }

    pub fn score(&self, data: &Dataset) -> Result<Vec<f64>> {
        score_with(&self.extractor, &self.policy, &self.scaler, data)
    }

    /// Per-point feature embeddings for external projection tools.
    pub fn embeddings(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        parallel::map_slice(&data.points, |p| {
            let scaled = self.scaler.transform_vec(&p.features)?;
            self.extractor.features(&scaled)
        })
        .into_iter()
        .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_auc: f64,
    pub checkpoint_path: String,
    pub step_log_path: Option<String>,
}

/// Aggregated outcome of a multi-seed experiment. Wall-clock runtime is
/// kept out of the serialized form so metrics files stay reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub dataset: String,
    pub ablation: String,
    pub config_hash: String,
    pub seed_results: Vec<SeedResult>,
    pub mean_auc: f64,
    pub std_auc: f64,
    #[serde(skip_serializing, default)]
    pub runtime_seconds: f64,
}

pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

/// Trains every configured seed (in parallel when enabled), scores the
/// held-out test set, and writes the metrics files.
pub fn run_experiment(config: &RunConfig) -> Result<RunMetrics> {
    if config.data_path.is_empty() {
        return Err(Error::config("data_path is not set".to_string()));
    }
    let data = crate::dataset::load_table(
        Path::new(&config.data_path),
        &config.label_col,
        config.delimiter,
    )?;
    run_experiment_on(config, &data)
}

pub fn run_experiment_on(config: &RunConfig, data: &Dataset) -> Result<RunMetrics> {
    config.validate()?;
    let started = std::time::Instant::now();
    let outputs: Vec<TrainOutput> = parallel::map_slice(&config.seeds, |seed| {
        trainer::train_on(config, data, *seed)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let aucs: Vec<f64> = outputs.iter().map(|o| o.test_auc).collect();
    let (mean_auc, std_auc) = mean_and_std(&aucs);
    let metrics = RunMetrics {
        dataset: data.name.clone(),
        ablation: config.ablation.suffix(),
        config_hash: config.hash(),
        seed_results: outputs
            .iter()
            .map(|o| SeedResult {
                seed: o.seed,
                test_auc: o.test_auc,
                checkpoint_path: o.checkpoint_path.to_string_lossy().into_owned(),
                step_log_path: o
                    .step_log_path
                    .as_ref()
                    .map(|p| p.to_string_lossy().into_owned()),
            })
            .collect(),
        mean_auc,
        std_auc,
        runtime_seconds: started.elapsed().as_secs_f64(),
    };
    write_metrics(config, &metrics)?;
    Ok(metrics)
}

/// Writes machine-readable JSON, a plot-ready per-seed CSV, and the
/// wall-clock runtime as a separate non-canonical file.
pub fn write_metrics(config: &RunConfig, metrics: &RunMetrics) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(&config.output_dir)?;
    let stem = format!("{}_{}", metrics.dataset, metrics.ablation);
    let json_path = Path::new(&config.output_dir).join(format!("{stem}.metrics.json"));
    let csv_path = Path::new(&config.output_dir).join(format!("{stem}.metrics.csv"));

    let json = serde_json::to_string_pretty(metrics)
        .map_err(|e| Error::data(format!("metrics serialization: {e}")))?;
    std::fs::write(&json_path, json)?;

    let mut csv = String::from("seed,auc\n");
    for r in &metrics.seed_results {
        csv.push_str(&format!("{},{}\n", r.seed, r.test_auc));
    }
    std::fs::write(&csv_path, csv)?;

    let runtime_path = Path::new(&config.output_dir).join(format!("{stem}.runtime.txt"));
    std::fs::write(&runtime_path, format!("{:.3}\n", metrics.runtime_seconds))?;
    Ok((json_path, csv_path))
}

/// One parsed step-log record.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: u64,
    pub pool: char,
    pub id: usize,
    pub action: f64,
    pub threshold: f64,
    pub reward: f64,
}

pub fn read_step_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read step log {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 {
            return Err(Error::data(format!(
                "step log line {}: expected 6 cells, found {}",
                lineno + 1,
                cells.len()
            )));
        }
        let bad = |field: &str| Error::data(format!("step log line {}: bad {field}", lineno + 1));
        records.push(StepRecord {
            step: cells[0].parse().map_err(|_| bad("step"))?,
            pool: cells[1].chars().next().ok_or_else(|| bad("pool"))?,
            id: cells[2].parse().map_err(|_| bad("id"))?,
            action: cells[3].parse().map_err(|_| bad("action"))?,
            threshold: cells[4].parse().map_err(|_| bad("th"))?,
            reward: cells[5].parse().map_err(|_| bad("reward"))?,
        });
    }
    if records.is_empty() {
        return Err(Error::data(format!("step log {} holds no records", path.display())));
    }
    Ok(records)
}

/// Histogram of unlabeled-pool visit counts: (visits, number of points
/// visited that many times), ascending.
pub fn diversity_report(records: &[StepRecord]) -> Vec<(u64, u64)> {
    let mut per_id: std::collections::HashMap<usize, u64> = std::collections::HashMap::new();
    for r in records.iter().filter(|r| r.pool == 'U') {
        *per_id.entry(r.id).or_insert(0) += 1;
    }
    let mut histogram: std::collections::BTreeMap<u64, u64> = std::collections::BTreeMap::new();
    for count in per_id.values() {
        *histogram.entry(*count).or_insert(0) += 1;
    }
    histogram.into_iter().collect()
}

/// Threshold trace: (step, threshold) pairs in step order.
pub fn threshold_report(records: &[StepRecord]) -> Vec<(u64, f64)> {
    records.iter().map(|r| (r.step, r.threshold)).collect()
}

pub fn write_diversity_report(records: &[StepRecord], out: &mut dyn Write) -> Result<()> {
    writeln!(out, "visits,points")?;
    for (visits, points) in diversity_report(records) {
        writeln!(out, "{visits},{points}")?;
    }
    Ok(())
}

pub fn write_threshold_report(records: &[StepRecord], out: &mut dyn Write) -> Result<()> {
    writeln!(out, "step,th")?;
    for (step, th) in threshold_report(records) {
        writeln!(out, "{step},{th}")?;
    }
    Ok(())
}

/// Writes per-point feature embeddings as delimited text for external
/// projection (id, label if present, then the feature columns).
pub fn write_embeddings(
    data: &Dataset,
    embeddings: &[Vec<f64>],
    out: &mut dyn Write,
) -> Result<()> {
    let dim = embeddings.first().map_or(0, |e| e.len());
    let mut header = String::from("id,label");
    for j in 0..dim {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(out, "{header}")?;
    for (p, e) in data.points.iter().zip(embeddings) {
        let label = p.label.map_or(String::new(), |l| l.to_string());
        let features: Vec<String> = e.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{},{},{}", p.id, label, features.join(","))?;
    }
    Ok(())
}
