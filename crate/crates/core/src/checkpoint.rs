//! Checkpoint format: a versioned JSON bundle of named tensors covering
//! the five agent networks, the feature extractor, and the scaler
//! statistics needed to score raw data. JSON keeps the format
//! byte-order-free; floats serialize as shortest round-trip decimals, so
//! identical state always produces identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cfe::{CausalExtractor, CfeParams, FeatureExtractor, PlainExtractor};
use crate::dataset::MinMaxScaler;
use crate::diffnet::{Activation, DenseNet, Layer};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::sac::AgentNets;

pub const CHECKPOINT_FORMAT: &str = "tricrlad-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    fn matrix(name: impl Into<String>, m: &Matrix) -> Self {
        NamedTensor { name: name.into(), shape: vec![m.rows, m.cols], data: m.data.clone() }
    }

    fn vector(name: impl Into<String>, v: &[f64]) -> Self {
        NamedTensor { name: name.into(), shape: vec![v.len()], data: v.to_vec() }
    }

    fn scalar(name: impl Into<String>, v: f64) -> Self {
        NamedTensor { name: name.into(), shape: vec![], data: vec![v] }
    }

    fn to_matrix(&self) -> Result<Matrix> {
        if self.shape.len() != 2 || self.shape[0] * self.shape[1] != self.data.len() {
            return Err(Error::data(format!("tensor '{}' is not a matrix", self.name)));
        }
        Ok(Matrix { rows: self.shape[0], cols: self.shape[1], data: self.data.clone() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub input_dim: usize,
    pub feature_dim: usize,
    pub no_causal: bool,
    pub scaler_min: Vec<f64>,
    pub scaler_range: Vec<f64>,
    pub tensors: Vec<NamedTensor>,
}

fn dense_to_tensors(prefix: &str, net: &DenseNet, out: &mut Vec<NamedTensor>) {
    for (i, layer) in net.layers.iter().enumerate() {
        out.push(NamedTensor::matrix(format!("{prefix}.{i}.weight"), &layer.weights));
        out.push(NamedTensor::vector(format!("{prefix}.{i}.bias"), &layer.bias));
    }
}

/// Rebuilds a dense net laid out by [`dense_to_tensors`]: relu hidden
/// layers with the given output activation.
fn dense_from_tensors(
    prefix: &str,
    tensors: &[NamedTensor],
    output_activation: Activation,
) -> Result<DenseNet> {
    let mut layers = Vec::new();
    for i in 0.. {
        let wname = format!("{prefix}.{i}.weight");
        let Some(w) = tensors.iter().find(|t| t.name == wname) else {
            break;
        };
        let bname = format!("{prefix}.{i}.bias");
        let b = tensors
            .iter()
            .find(|t| t.name == bname)
            .ok_or_else(|| Error::data(format!("checkpoint missing tensor '{bname}'")))?;
        layers.push(Layer {
            weights: w.to_matrix()?,
            bias: b.data.clone(),
            activation: Activation::Relu,
        });
    }
    if layers.is_empty() {
        return Err(Error::data(format!("checkpoint has no tensors for '{prefix}'")));
    }
    layers.last_mut().unwrap().activation = output_activation;
    Ok(DenseNet { layers })
}

fn find<'a>(tensors: &'a [NamedTensor], name: &str) -> Result<&'a NamedTensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::data(format!("checkpoint missing tensor '{name}'")))
}

impl Checkpoint {
    /// Snapshots the full learnable state plus scaler statistics.
    pub fn from_state(
        agent: &AgentNets,
        extractor: &FeatureExtractor,
        scaler: &MinMaxScaler,
        config_hash: &str,
    ) -> Self {
        let mut tensors = Vec::new();
        dense_to_tensors("policy", &agent.policy, &mut tensors);
        dense_to_tensors("q1", &agent.q1, &mut tensors);
        dense_to_tensors("q2", &agent.q2, &mut tensors);
        dense_to_tensors("value", &agent.value, &mut tensors);
        dense_to_tensors("target_value", &agent.target_value, &mut tensors);
        match extractor {
            FeatureExtractor::Causal(c) => {
                let p = &c.params;
                tensors.push(NamedTensor::matrix("cfe.token_scale", &p.token_scale));
                tensors.push(NamedTensor::matrix("cfe.token_offset", &p.token_offset));
                tensors.push(NamedTensor::matrix("cfe.w_query", &p.w_query));
                tensors.push(NamedTensor::matrix("cfe.w_key", &p.w_key));
                tensors.push(NamedTensor::matrix("cfe.w_value", &p.w_value));
                tensors.push(NamedTensor::matrix("cfe.w_out", &p.w_out));
                tensors.push(NamedTensor::vector("cfe.b_out", &p.b_out));
                tensors.push(NamedTensor::scalar("cfe.scaler", p.scaler));
                tensors.push(NamedTensor::vector("cfe.w_score", &p.w_score));
                tensors.push(NamedTensor::scalar("cfe.b_score", p.b_score));
            }
            FeatureExtractor::Plain(p) => {
                dense_to_tensors("encoder", &p.encoder, &mut tensors);
                dense_to_tensors("score_head", &p.score_head, &mut tensors);
            }
        }
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            input_dim: extractor.input_dim(),
            feature_dim: extractor.out_dim(),
            no_causal: !extractor.is_causal(),
            scaler_min: scaler.min.clone(),
            scaler_range: scaler.range.clone(),
            tensors,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::data(format!("malformed checkpoint: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::data(format!("unexpected checkpoint format '{}'", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn scaler(&self) -> MinMaxScaler {
        MinMaxScaler { min: self.scaler_min.clone(), range: self.scaler_range.clone() }
    }

    pub fn policy(&self) -> Result<DenseNet> {
        dense_from_tensors("policy", &self.tensors, Activation::Linear)
    }

    /// Rebuilds the feature extractor for scoring. Optimizer state is
    /// not checkpointed; the returned extractor carries fresh state.
    pub fn extractor(&self) -> Result<FeatureExtractor> {
        if self.no_causal {
            let encoder = dense_from_tensors("encoder", &self.tensors, Activation::Linear)?;
            let score_head = dense_from_tensors("score_head", &self.tensors, Activation::Sigmoid)?;
            let mut plain = PlainExtractor::new(
                encoder.in_dim(),
                encoder.layers[0].weights.rows,
                encoder.out_dim(),
                0.7,
                5.0,
                5e-4,
                0,
            );
            plain.encoder = encoder;
            plain.score_head = score_head;
            Ok(FeatureExtractor::Plain(plain))
        } else {
            let token_scale = find(&self.tensors, "cfe.token_scale")?.to_matrix()?;
            let token_dim = token_scale.cols;
            let mut causal = CausalExtractor::new(
                self.input_dim,
                token_dim,
                self.feature_dim,
                0.7,
                1e-3,
                5.0,
                5e-4,
                0,
            );
            causal.params = CfeParams {
                token_scale,
                token_offset: find(&self.tensors, "cfe.token_offset")?.to_matrix()?,
                w_query: find(&self.tensors, "cfe.w_query")?.to_matrix()?,
                w_key: find(&self.tensors, "cfe.w_key")?.to_matrix()?,
                w_value: find(&self.tensors, "cfe.w_value")?.to_matrix()?,
                w_out: find(&self.tensors, "cfe.w_out")?.to_matrix()?,
                b_out: find(&self.tensors, "cfe.b_out")?.data.clone(),
                scaler: find(&self.tensors, "cfe.scaler")?.data[0],
                w_score: find(&self.tensors, "cfe.w_score")?.data.clone(),
                b_score: find(&self.tensors, "cfe.b_score")?.data[0],
            };
            Ok(FeatureExtractor::Causal(causal))
        }
    }
}
