//! Tabular dataset ingestion, min-max scaling, stratified splitting, and
//! construction of the semi-supervised regime: a small labeled anomaly
//! set and a contaminated unlabeled set.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed_stream;

/// One observation: feature vector plus an optional ground-truth label.
/// The label is hidden from the agent during training; only evaluation
/// and regime construction look at it.
#[derive(Debug, Clone)]
pub struct DataPoint {
    pub id: usize,
    pub features: Vec<f64>,
    pub label: Option<u8>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    pub points: Vec<DataPoint>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, dim: usize, points: Vec<DataPoint>) -> Self {
        debug_assert!(points.iter().all(|p| p.features.len() == dim));
        Dataset { name: name.into(), dim, points }
    }

    pub fn empty(name: impl Into<String>, dim: usize) -> Self {
        Dataset { name: name.into(), dim, points: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.points.iter().map(|p| p.label.unwrap_or(0)).collect()
    }

    pub fn anomaly_count(&self) -> usize {
        self.points.iter().filter(|p| p.label == Some(1)).count()
    }

    fn subset(&self, ids: &[usize], name: &str) -> Dataset {
        let wanted: HashSet<usize> = ids.iter().copied().collect();
        let points = self
            .points
            .iter()
            .filter(|p| wanted.contains(&p.id))
            .cloned()
            .collect();
        Dataset::new(name.to_string(), self.dim, points)
    }
}

/// The semi-supervised regime: `d_a` holds the revealed labeled
/// anomalies, `d_u` the contaminated unlabeled pool, `test` the held-out
/// evaluation set. The three parts are disjoint by id.
#[derive(Debug, Clone)]
pub struct RegimeSplit {
    pub d_a: Dataset,
    pub d_u: Dataset,
    pub test: Dataset,
    pub anomalies_ratio: f64,
    pub contamination_ratio: f64,
    pub seed: u64,
}

/// Which population the contamination ratio is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContaminationBase {
    /// Hidden anomalies as a fraction of the unlabeled pool itself.
    Unlabeled,
    /// Hidden anomalies as a fraction of the full training set.
    TrainSet,
}

/// What to do when the remaining anomalies cannot reach the requested
/// contamination. Low-anomaly datasets cannot reach high ratios at all,
/// so the default keeps every remaining anomaly and accepts the lower
/// achieved contamination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContaminationShortfall {
    CapAtAvailable,
    Error,
}

/// Loads a delimited text file with a header row into a [`Dataset`].
///
/// All columns except the label column must be numeric; the label column
/// must contain only 0/1. Row order is preserved and ids are assigned by
/// row index.
pub fn load_table(path: &Path, label_column: &str, delimiter: char) -> Result<Dataset> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = raw.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::data(format!("{}: empty file", path.display())))?;
    let columns: Vec<&str> = header.split(delimiter).map(str::trim).collect();
    let label_idx = columns
        .iter()
        .position(|c| *c == label_column)
        .ok_or_else(|| {
            Error::data(format!(
                "{}: missing label column '{label_column}' (header: {})",
                path.display(),
                columns.join(",")
            ))
        })?;
    let dim = columns.len() - 1;
    if dim == 0 {
        return Err(Error::data(format!("{}: no feature columns", path.display())));
    }

    let mut points = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(delimiter).map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(Error::data(format!(
                "row {}: expected {} cells, found {}",
                lineno + 1,
                columns.len(),
                cells.len()
            )));
        }
        let mut features = Vec::with_capacity(dim);
        let mut label = None;
        for (ci, cell) in cells.iter().enumerate() {
            if ci == label_idx {
                label = Some(match *cell {
                    "0" => 0u8,
                    "1" => 1u8,
                    other => {
                        return Err(Error::data(format!(
                            "row {}, column '{}': label must be 0/1, found '{other}'",
                            lineno + 1,
                            columns[ci]
                        )))
                    }
                });
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::data(format!(
                        "row {}, column '{}': non-numeric cell '{cell}'",
                        lineno + 1,
                        columns[ci]
                    ))
                })?;
                features.push(v);
            }
        }
        points.push(DataPoint { id: points.len(), features, label });
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Ok(Dataset::new(name, dim, points))
}

/// Per-dimension min-max statistics fitted on training data.
#[derive(Debug, Clone)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub range: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::data("cannot fit scaler on an empty dataset"));
        }
        let d = train.dim;
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for p in &train.points {
            for (j, v) in p.features.iter().enumerate() {
                min[j] = min[j].min(*v);
                max[j] = max[j].max(*v);
            }
        }
        let range = min.iter().zip(&max).map(|(lo, hi)| hi - lo).collect();
        Ok(MinMaxScaler { min, range })
    }

    /// Scales one vector: x' = (x - min) / range, constant dimensions map
    /// to 0, results clamped to [0,1] so out-of-range test values keep
    /// the pool invariants.
    pub fn transform_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.min.len() {
            return Err(Error::shape(format!(
                "scaler fitted on {} dims, input has {}",
                self.min.len(),
                x.len()
            )));
        }
        Ok(x.iter()
            .enumerate()
            .map(|(j, v)| {
                if self.range[j] == 0.0 {
                    0.0
                } else {
                    ((v - self.min[j]) / self.range[j]).clamp(0.0, 1.0)
                }
            })
            .collect())
    }

    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        let mut points = Vec::with_capacity(data.len());
        for p in &data.points {
            points.push(DataPoint {
                id: p.id,
                features: self.transform_vec(&p.features)?,
                label: p.label,
            });
        }
        Ok(Dataset::new(data.name.clone(), data.dim, points))
    }
}

/// Fits min-max statistics on `train` and applies them to `apply_to`.
pub fn minmax_fit_transform(train: &Dataset, apply_to: &Dataset) -> Result<Dataset> {
    if train.dim != apply_to.dim {
        return Err(Error::shape(format!(
            "train dim {} != apply dim {}",
            train.dim, apply_to.dim
        )));
    }
    MinMaxScaler::fit(train)?.transform(apply_to)
}

/// Stratified train/test split, deterministic per seed. The anomaly
/// proportion in each part matches the whole within rounding.
pub fn split_train_test(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test_fraction must be in (0,1), got {test_fraction}"
        )));
    }
    let mut anomalies: Vec<usize> = Vec::new();
    let mut normals: Vec<usize> = Vec::new();
    for p in &data.points {
        match p.label {
            Some(1) => anomalies.push(p.id),
            _ => normals.push(p.id),
        }
    }
    if anomalies.len() < 2 || normals.len() < 2 {
        return Err(Error::data(format!(
            "need at least 2 points per class to split (anomalies={}, normals={})",
            anomalies.len(),
            normals.len()
        )));
    }
    let mut rng = seed_stream(seed, "split");
    anomalies.shuffle(&mut rng);
    normals.shuffle(&mut rng);

    let n_test_anom = (test_fraction * anomalies.len() as f64).round() as usize;
    let n_test_norm = (test_fraction * normals.len() as f64).round() as usize;

    let mut test_ids: Vec<usize> = anomalies[..n_test_anom].to_vec();
    test_ids.extend_from_slice(&normals[..n_test_norm]);
    let mut train_ids: Vec<usize> = anomalies[n_test_anom..].to_vec();
    train_ids.extend_from_slice(&normals[n_test_norm..]);

    Ok((
        data.subset(&train_ids, &data.name),
        data.subset(&test_ids, &data.name),
    ))
}

/// Builds the semi-supervised regime from a training set.
///
/// A fraction `anomalies_ratio` of the train anomalies is revealed as the
/// labeled set `d_a` (at least one point). The remaining anomalies are
/// down-sampled so that hidden anomalies make up `contamination_ratio` of
/// the unlabeled pool; surplus anomalies are discarded, and a shortfall
/// is handled per the `shortfall` policy. All normals go to `d_u`.
pub fn build_regime(
    train: &Dataset,
    anomalies_ratio: f64,
    contamination_ratio: f64,
    seed: u64,
    base: ContaminationBase,
    shortfall: ContaminationShortfall,
) -> Result<RegimeSplit> {
    if !(0.0..=1.0).contains(&anomalies_ratio) || !(0.0..=1.0).contains(&contamination_ratio) {
        return Err(Error::config("ratios must lie in [0,1]".to_string()));
    }
    let mut anomalies: Vec<usize> = Vec::new();
    let mut normals: Vec<usize> = Vec::new();
    for p in &train.points {
        match p.label {
            Some(1) => anomalies.push(p.id),
            _ => normals.push(p.id),
        }
    }
    if anomalies.len() < 2 {
        return Err(Error::data(format!(
            "regime construction needs at least 2 train anomalies, found {}",
            anomalies.len()
        )));
    }
    if anomalies_ratio == 0.0 {
        return Err(Error::config(
            "Tri-CRLAD requires ≥1 labeled anomaly (anomalies_ratio must be > 0)".to_string(),
        ));
    }

    let mut rng = seed_stream(seed, "regime");
    anomalies.shuffle(&mut rng);

    let n_labeled = ((anomalies_ratio * anomalies.len() as f64).round() as usize).max(1);
    let n_labeled = n_labeled.min(anomalies.len());
    let remaining = anomalies.len() - n_labeled;

    // Solve hidden/(normals + hidden) = c for the unlabeled base, or use
    // the full train size for the alternative base.
    let c = contamination_ratio;
    let n_hidden_target = if c == 0.0 {
        0
    } else {
        match base {
            ContaminationBase::Unlabeled => {
                (c * normals.len() as f64 / (1.0 - c)).round() as usize
            }
            ContaminationBase::TrainSet => (c * train.len() as f64).round() as usize,
        }
    };
    let n_hidden = if n_hidden_target > remaining {
        match shortfall {
            ContaminationShortfall::Error => {
                return Err(Error::data(format!(
                    "not enough anomalies to reach contamination {c}: need {n_hidden_target}, have {remaining}"
                )))
            }
            ContaminationShortfall::CapAtAvailable => remaining,
        }
    } else {
        n_hidden_target
    };

    let labeled_ids = &anomalies[..n_labeled];
    let hidden_ids = &anomalies[n_labeled..n_labeled + n_hidden];
    let mut unlabeled_ids: Vec<usize> = normals.clone();
    unlabeled_ids.extend_from_slice(hidden_ids);

    Ok(RegimeSplit {
        d_a: train.subset(labeled_ids, "d_a"),
        d_u: train.subset(&unlabeled_ids, "d_u"),
        test: Dataset::empty("test", train.dim),
        anomalies_ratio,
        contamination_ratio,
        seed,
    })
}

impl RegimeSplit {
    pub fn with_test(mut self, test: Dataset) -> Self {
        self.test = test;
        self
    }
}
