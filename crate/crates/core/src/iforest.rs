//! From-scratch isolation forest. Supplies the unsupervised anomaly
//! score used by the unlabeled reward branch and serves as the
//! unsupervised reference detector.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::parallel;
use crate::seed_stream;

const EULER_MASCHERONI: f64 = 0.577_215_664_9;

/// Average unsuccessful-search path length of a binary search tree over
/// `n` points; normalizes isolation depths.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let nf = n as f64;
            let harmonic = (nf - 1.0).ln() + EULER_MASCHERONI;
            2.0 * harmonic - 2.0 * (nf - 1.0) / nf
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Internal {
        dim: usize,
        split: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationTree {
    root: Node,
    pub height_limit: usize,
}

impl IsolationTree {
    fn build(points: &[&[f64]], seed: u64, height_limit: usize) -> Self {
        let mut rng = seed_stream(seed, "itree");
        let indices: Vec<usize> = (0..points.len()).collect();
        let root = grow(points, &indices, 0, height_limit, &mut rng);
        IsolationTree { root, height_limit }
    }

    /// Depth of the leaf reached by `x`, adjusted by the average path
    /// length of the subsample that settled there.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = &self.root;
        let mut depth = 0usize;
        loop {
            match node {
                Node::Leaf { size } => return depth as f64 + average_path_length(*size),
                Node::Internal { dim, split, left, right } => {
                    node = if x[*dim] < *split { left } else { right };
                    depth += 1;
                }
            }
        }
    }
}

fn grow(
    points: &[&[f64]],
    indices: &[usize],
    depth: usize,
    height_limit: usize,
    rng: &mut ChaCha8Rng,
) -> Node {
    if indices.len() <= 1 || depth >= height_limit {
        return Node::Leaf { size: indices.len() };
    }
    let dim_count = points[0].len();
    // dimensions that can still be split (min < max over this sample)
    let mut extents = vec![(f64::INFINITY, f64::NEG_INFINITY); dim_count];
    for &i in indices {
        for (e, v) in extents.iter_mut().zip(points[i]) {
            e.0 = e.0.min(*v);
            e.1 = e.1.max(*v);
        }
    }
    let splittable: Vec<(usize, f64, f64)> = extents
        .into_iter()
        .enumerate()
        .filter(|(_, (lo, hi))| lo < hi)
        .map(|(d, (lo, hi))| (d, lo, hi))
        .collect();
    if splittable.is_empty() {
        return Node::Leaf { size: indices.len() };
    }
    let (split_dim, lo, hi) = splittable[rng.random_range(0..splittable.len())];
    let split = loop {
        let s = lo + rng.random::<f64>() * (hi - lo);
        if s > lo && s < hi {
            break s;
        }
    };
    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
        indices.iter().partition(|&&i| points[i][split_dim] < split);
    Node::Internal {
        dim: split_dim,
        split,
        left: Box::new(grow(points, &left_idx, depth + 1, height_limit, rng)),
        right: Box::new(grow(points, &right_idx, depth + 1, height_limit, rng)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationForest {
    pub trees: Vec<IsolationTree>,
    pub subsample: usize,
    /// c(ψ): normalizer for the effective subsample size.
    pub normalizer: f64,
}

impl IsolationForest {
    /// Fits `n_trees` trees, each on a uniform random subsample of size
    /// min(subsample, |data|). Deterministic per seed; trees are grown in
    /// parallel from independently derived seeds.
    pub fn fit(data: &[Vec<f64>], n_trees: usize, subsample: usize, seed: u64) -> Result<Self> {
        Self::fit_impl(data, n_trees, subsample, seed, true)
    }

    /// Sequential twin of [`IsolationForest::fit`], kept for the
    /// execution-mode benchmarks.
    pub fn fit_seq(data: &[Vec<f64>], n_trees: usize, subsample: usize, seed: u64) -> Result<Self> {
        Self::fit_impl(data, n_trees, subsample, seed, false)
    }

    fn fit_impl(
        data: &[Vec<f64>],
        n_trees: usize,
        subsample: usize,
        seed: u64,
        par: bool,
    ) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::data(format!(
                "isolation forest needs at least 2 points, got {}",
                data.len()
            )));
        }
        if subsample < 2 || n_trees == 0 {
            return Err(Error::config(
                "isolation forest needs subsample ≥ 2 and n_trees ≥ 1".to_string(),
            ));
        }
        let psi = subsample.min(data.len());
        let height_limit = (psi as f64).log2().ceil() as usize;

        let build_one = |t: usize| {
            let mut rng = seed_stream(seed.wrapping_add(t as u64), "itree-sample");
            let chosen = rand::seq::index::sample(&mut rng, data.len(), psi);
            let sample: Vec<&[f64]> = chosen.iter().map(|i| data[i].as_slice()).collect();
            IsolationTree::build(&sample, seed.wrapping_add(t as u64), height_limit)
        };
        let trees = if par {
            parallel::map_range(n_trees, build_one)
        } else {
            parallel::map_range_seq(n_trees, build_one)
        };
        Ok(IsolationForest { trees, subsample: psi, normalizer: average_path_length(psi) })
    }

    /// Anomaly score in (0,1): 2^(−E(h(x))/c(ψ)), higher = more
    /// anomalous.
    pub fn score(&self, x: &[f64]) -> f64 {
        let total: f64 = self.trees.iter().map(|t| t.path_length(x)).sum();
        let avg = total / self.trees.len() as f64;
        anomaly_score(avg, self.normalizer)
    }

    pub fn score_batch(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        parallel::map_slice(xs, |x| self.score(x))
    }

    pub fn score_batch_seq(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        parallel::map_slice_seq(xs, |x| self.score(x))
    }
}

#[inline]
fn anomaly_score(avg_path: f64, normalizer: f64) -> f64 {
    2f64.powf(-avg_path / normalizer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer_matches_formula() {
        assert_eq!(average_path_length(1), 0.0);
        assert_eq!(average_path_length(2), 1.0);
        assert!((average_path_length(256) - 10.2448).abs() < 1e-3);
    }

    #[test]
    fn score_is_half_at_the_normalizer_and_monotone() {
        let c = average_path_length(256);
        assert!((anomaly_score(c, c) - 0.5).abs() < 1e-12);
        let mut last = 1.0;
        for i in 1..20 {
            let s = anomaly_score(i as f64, c);
            assert!(s < last);
            last = s;
        }
    }

    fn two_cluster_set() -> Vec<Vec<f64>> {
        // 15 points in two tight clusters plus one far outlier
        let mut pts = Vec::new();
        for i in 0..8 {
            pts.push(vec![0.20 + 0.005 * i as f64, 0.20 - 0.005 * i as f64]);
        }
        for i in 0..7 {
            pts.push(vec![0.80 - 0.004 * i as f64, 0.78 + 0.004 * i as f64]);
        }
        pts.push(vec![10.0, -9.0]);
        pts
    }

    #[test]
    fn outlier_scores_above_cluster_members() {
        let data = two_cluster_set();
        let forest = IsolationForest::fit(&data, 100, 16, 17).unwrap();
        let outlier = forest.score(&data[15]);
        for p in &data[..15] {
            assert!(
                outlier > forest.score(p),
                "outlier {outlier} should beat inlier {}",
                forest.score(p)
            );
        }
    }

    #[test]
    fn identical_data_gives_identical_scores() {
        let data: Vec<Vec<f64>> = (0..10).map(|_| vec![0.4, 0.4, 0.4]).collect();
        let forest = IsolationForest::fit(&data, 20, 8, 3).unwrap();
        let scores = forest.score_batch(&data);
        for s in &scores {
            assert_eq!(*s, scores[0]);
        }
    }

    #[test]
    fn fit_is_reproducible_per_seed() {
        let data = two_cluster_set();
        let a = IsolationForest::fit(&data, 25, 16, 99).unwrap();
        let b = IsolationForest::fit(&data, 25, 16, 99).unwrap();
        assert_eq!(a, b);
        let c = IsolationForest::fit(&data, 25, 16, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parallel_and_sequential_fits_agree() {
        let data = two_cluster_set();
        let a = IsolationForest::fit(&data, 30, 12, 5).unwrap();
        let b = IsolationForest::fit_seq(&data, 30, 12, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.score_batch(&data), b.score_batch_seq(&data));
    }

    #[test]
    fn scores_stay_strictly_inside_unit_interval() {
        let data = two_cluster_set();
        let forest = IsolationForest::fit(&data, 50, 16, 1).unwrap();
        for p in &data {
            let s = forest.score(p);
            assert!(s > 0.0 && s < 1.0, "score {s}");
        }
    }

    #[test]
    fn fit_rejects_degenerate_inputs() {
        assert!(IsolationForest::fit(&[vec![1.0]], 10, 8, 0).is_err());
        let data: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        assert!(IsolationForest::fit(&data, 10, 1, 0).is_err());
        assert!(IsolationForest::fit(&data, 0, 8, 0).is_err());
    }
}
