//! Minimal differentiable dense-network core: forward passes with a
//! recorded tape, exact reverse-mode gradients for parameters and inputs,
//! Adam with bias correction, Xavier initialization, and soft target
//! updates. Everything the agent and the feature extractor train with.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seed_stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
    /// Softmax over the whole output vector of the layer.
    SoftmaxRow,
}

impl Activation {
    fn apply(self, z: &[f64]) -> Vec<f64> {
        match self {
            Activation::Linear => z.to_vec(),
            Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
            Activation::Tanh => z.iter().map(|v| v.tanh()).collect(),
            Activation::Sigmoid => z.iter().map(|v| sigmoid(*v)).collect(),
            Activation::SoftmaxRow => {
                let mut out = z.to_vec();
                crate::linalg::softmax_inplace(&mut out);
                out
            }
        }
    }

    /// dL/dz given dL/da, using pre-activations `z` and outputs `a`.
    fn backprop(self, z: &[f64], a: &[f64], da: &[f64]) -> Vec<f64> {
        match self {
            Activation::Linear => da.to_vec(),
            Activation::Relu => z
                .iter()
                .zip(da)
                .map(|(zv, dv)| if *zv > 0.0 { *dv } else { 0.0 })
                .collect(),
            Activation::Tanh => a.iter().zip(da).map(|(av, dv)| dv * (1.0 - av * av)).collect(),
            Activation::Sigmoid => a.iter().zip(da).map(|(av, dv)| dv * av * (1.0 - av)).collect(),
            Activation::SoftmaxRow => {
                let inner: f64 = a.iter().zip(da).map(|(av, dv)| av * dv).sum();
                a.iter().zip(da).map(|(av, dv)| av * (dv - inner)).collect()
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One dense layer: y = act(W x + b), weights stored row-major out×in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

/// Recorded forward values: the input and every layer's pre-activation
/// and output, enough to replay exact reverse-mode gradients.
#[derive(Debug, Clone)]
pub struct GradTape {
    pub input: Vec<f64>,
    pub pre_activations: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

impl GradTape {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().map(|v| v.as_slice()).unwrap_or(&self.input)
    }
}

/// Per-layer parameter gradients, shapes mirroring the network.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        NetGrads {
            layers: net
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.weights.rows, l.weights.cols), vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.add_assign(ow);
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.scale(s);
            for x in b.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for (w, b) in &self.layers {
            sq += w.data.iter().map(|v| v * v).sum::<f64>();
            sq += b.iter().map(|v| v * v).sum::<f64>();
        }
        sq.sqrt()
    }

    /// Scales the gradients down if their global norm exceeds `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }
}

impl DenseNet {
    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weights.cols)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.rows)
    }

    /// Forward pass without a tape, for inference-only call sites.
    pub fn infer(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::shape(format!(
                "forward: input dim {} != net in_dim {}",
                x.len(),
                self.in_dim()
            )));
        }
        let mut cur = x.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.matvec(&cur);
            for (zv, bv) in z.iter_mut().zip(&layer.bias) {
                *zv += bv;
            }
            cur = layer.activation.apply(&z);
            if cur.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite activation at layer {li}"
                )));
            }
        }
        Ok(cur)
    }

    /// Forward pass that records a [`GradTape`].
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, GradTape)> {
        if x.len() != self.in_dim() {
            return Err(Error::shape(format!(
                "forward: input dim {} != net in_dim {}",
                x.len(),
                self.in_dim()
            )));
        }
        let mut tape = GradTape {
            input: x.to_vec(),
            pre_activations: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.matvec(&cur);
            for (zv, bv) in z.iter_mut().zip(&layer.bias) {
                *zv += bv;
            }
            let a = layer.activation.apply(&z);
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite activation at layer {li}"
                )));
            }
            tape.pre_activations.push(z);
            tape.outputs.push(a.clone());
            cur = a;
        }
        Ok((cur, tape))
    }

    /// Exact reverse-mode gradients of a scalar loss with upstream
    /// gradient `dloss_dy`, for every parameter and for the input.
    pub fn backward(&self, tape: &GradTape, dloss_dy: &[f64]) -> Result<(NetGrads, Vec<f64>)> {
        if dloss_dy.len() != self.out_dim() {
            return Err(Error::shape(format!(
                "backward: dloss_dy dim {} != net out_dim {}",
                dloss_dy.len(),
                self.out_dim()
            )));
        }
        let mut grads = NetGrads::zeros_like(self);
        let mut da = dloss_dy.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let z = &tape.pre_activations[li];
            let a = &tape.outputs[li];
            let dz = layer.activation.backprop(z, a, &da);
            let layer_in: &[f64] = if li == 0 { &tape.input } else { &tape.outputs[li - 1] };
            let (gw, gb) = &mut grads.layers[li];
            gw.add_outer(1.0, &dz, layer_in);
            for (b, d) in gb.iter_mut().zip(&dz) {
                *b += d;
            }
            da = layer.weights.matvec_transposed(&dz);
        }
        Ok((grads, da))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data.len() + l.bias.len())
            .sum()
    }
}

/// Samples a weight matrix uniform in ±sqrt(6/(fan_in+fan_out)).
pub fn xavier_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
    m
}

/// Builds a dense net with the given layer sizes: relu hidden layers, a
/// linear output layer, Xavier-uniform weights, zero biases.
/// Deterministic per seed.
pub fn xavier_init(sizes: &[usize], seed: u64) -> DenseNet {
    assert!(sizes.len() >= 2, "need at least input and output sizes");
    assert!(sizes.iter().all(|s| *s >= 1));
    let mut rng = seed_stream(seed, "xavier");
    let mut layers = Vec::with_capacity(sizes.len() - 1);
    for w in sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let activation = if layers.len() + 2 == sizes.len() {
            Activation::Linear
        } else {
            Activation::Relu
        };
        layers.push(Layer {
            weights: xavier_matrix(fan_out, fan_in, &mut rng),
            bias: vec![0.0; fan_out],
            activation,
        });
    }
    DenseNet { layers }
}

/// Standard Adam with bias correction over a whole network.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub first_moment: Vec<(Matrix, Vec<f64>)>,
    pub second_moment: Vec<(Matrix, Vec<f64>)>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(net: &DenseNet, learning_rate: f64) -> Self {
        let zeros = || {
            net.layers
                .iter()
                .map(|l| (Matrix::zeros(l.weights.rows, l.weights.cols), vec![0.0; l.bias.len()]))
                .collect::<Vec<_>>()
        };
        OptimizerState {
            first_moment: zeros(),
            second_moment: zeros(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Scalar Adam update shared by the network and tensor paths.
#[inline]
#[allow(clippy::too_many_arguments)]
pub fn adam_scalar(
    param: &mut f64,
    grad: f64,
    m: &mut f64,
    v: &mut f64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    *m = beta1 * *m + (1.0 - beta1) * grad;
    *v = beta2 * *v + (1.0 - beta2) * grad * grad;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *param -= lr * m_hat / (v_hat.sqrt() + eps);
}

/// One Adam step over every parameter of the network.
pub fn adam_step(net: &mut DenseNet, grads: &NetGrads, opt: &mut OptimizerState) {
    debug_assert_eq!(net.layers.len(), grads.layers.len());
    opt.step += 1;
    let bc1 = 1.0 - opt.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - opt.beta2.powi(opt.step as i32);
    for (li, layer) in net.layers.iter_mut().enumerate() {
        let (gw, gb) = &grads.layers[li];
        let (mw, mb) = &mut opt.first_moment[li];
        let (vw, vb) = &mut opt.second_moment[li];
        for i in 0..layer.weights.data.len() {
            adam_scalar(
                &mut layer.weights.data[i],
                gw.data[i],
                &mut mw.data[i],
                &mut vw.data[i],
                opt.learning_rate,
                opt.beta1,
                opt.beta2,
                opt.epsilon,
                bc1,
                bc2,
            );
        }
        for i in 0..layer.bias.len() {
            adam_scalar(
                &mut layer.bias[i],
                gb[i],
                &mut mb[i],
                &mut vb[i],
                opt.learning_rate,
                opt.beta1,
                opt.beta2,
                opt.epsilon,
                bc1,
                bc2,
            );
        }
    }
}

/// target' = (1 - tau) * target + tau * source, element-wise.
pub fn soft_update(target: &mut DenseNet, source: &DenseNet, tau: f64) -> Result<()> {
    if target.layers.len() != source.layers.len() {
        return Err(Error::shape("soft_update: layer count mismatch".to_string()));
    }
    for (t, s) in target.layers.iter_mut().zip(&source.layers) {
        if t.weights.rows != s.weights.rows || t.weights.cols != s.weights.cols {
            return Err(Error::shape("soft_update: layer shape mismatch".to_string()));
        }
        for (tv, sv) in t.weights.data.iter_mut().zip(&s.weights.data) {
            *tv = (1.0 - tau) * *tv + tau * sv;
        }
        for (tv, sv) in t.bias.iter_mut().zip(&s.bias) {
            *tv = (1.0 - tau) * *tv + tau * sv;
        }
    }
    Ok(())
}
