//! Synthetic tabular sensor data for tests, benchmarks, and dry runs
//! without external files.

use rand::RngExt;

use crate::dataset::{DataPoint, Dataset};
use crate::seed_stream;

/// Two-population dataset: normals concentrated around a reference
/// operating point, anomalies shifted away on a subset of dimensions.
/// Labels are 1 for anomalies. Deterministic per seed.
pub fn synthetic_dataset(n_normal: usize, n_anomaly: usize, dim: usize, seed: u64) -> Dataset {
    let mut rng = seed_stream(seed, "synth");
    let mut points = Vec::with_capacity(n_normal + n_anomaly);

    // per-dimension operating point for the normal population
    let centers: Vec<f64> = (0..dim).map(|_| rng.random_range(0.35..0.55)).collect();
    // anomalies deviate on roughly a third of the dimensions
    let shifted: Vec<bool> = (0..dim).map(|_| rng.random::<f64>() < 0.35).collect();

    for i in 0..n_normal + n_anomaly {
        let anomalous = i >= n_normal;
        let features: Vec<f64> = (0..dim)
            .map(|j| {
                let noise: f64 = rng.random_range(-0.08..0.08);
                let base = centers[j] + noise;
                if anomalous && (shifted[j] || rng.random::<f64>() < 0.1) {
                    let push: f64 = rng.random_range(0.25..0.45);
                    (base + push).clamp(0.0, 1.0)
                } else {
                    base.clamp(0.0, 1.0)
                }
            })
            .collect();
        points.push(DataPoint { id: i, features, label: Some(u8::from(anomalous)) });
    }
    Dataset::new("synthetic", dim, points)
}
