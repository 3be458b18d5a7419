//! Causal feature extraction.
//!
//! Each input dimension becomes a token; a cross-attention pass between
//! the original tokens and tokens built from a counterfactual input (the
//! per-point dimension mean) produces the intrinsic causal feature `F`
//! and a self-generated anomaly score. Training minimizes an MMD term
//! that keeps counterfactual features on the original feature
//! distribution plus an asymmetric L2 term that ties the self-score to
//! the agent's score.

use std::sync::atomic::{AtomicU64, Ordering};


use crate::diffnet::{
    adam_scalar, sigmoid, xavier_matrix, Activation, DenseNet, NetGrads, OptimizerState,
};
use crate::error::{Error, Result};
use crate::linalg::{add_scaled, dot, softmax_inplace, squared_distance, Matrix};
use crate::parallel;
use crate::seed_stream;

/// Batch items per gradient-accumulation chunk. Chunks are computed
/// independently (possibly in parallel) and folded in fixed order, so the
/// result is bit-identical regardless of thread count.
const GRAD_CHUNK: usize = 16;

/// Which input builds the attention query tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySource {
    Original,
    Counterfactual,
}

/// Learnable parameters of the causal feature extractor.
#[derive(Debug, Clone)]
pub struct CfeParams {
    /// Per-dimension token scale embeddings, row j is u_j ∈ R^k.
    pub token_scale: Matrix,
    /// Per-dimension token offset embeddings, row j is b_j ∈ R^k.
    pub token_offset: Matrix,
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub w_value: Matrix,
    /// Output head: feature_dim × (d·k).
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
    /// Learnable scalar applied to the output head.
    pub scaler: f64,
    pub w_score: Vec<f64>,
    pub b_score: f64,
}

/// The extracted feature and the extractor's own anomaly score.
#[derive(Debug, Clone)]
pub struct CausalFeature {
    pub f_vec: Vec<f64>,
    pub a_causal: f64,
}

impl CfeParams {
    pub fn init(input_dim: usize, token_dim: usize, feature_dim: usize, seed: u64) -> Self {
        assert!(input_dim >= 1 && token_dim >= 1 && feature_dim >= 1);
        let mut rng = seed_stream(seed, "cfe");
        let token_scale = xavier_matrix(input_dim, token_dim, &mut rng);
        let token_offset = xavier_matrix(input_dim, token_dim, &mut rng);
        let w_query = xavier_matrix(token_dim, token_dim, &mut rng);
        let w_key = xavier_matrix(token_dim, token_dim, &mut rng);
        let w_value = xavier_matrix(token_dim, token_dim, &mut rng);
        let w_out = xavier_matrix(feature_dim, input_dim * token_dim, &mut rng);
        let w_score_m = xavier_matrix(1, feature_dim, &mut rng);
        CfeParams {
            token_scale,
            token_offset,
            w_query,
            w_key,
            w_value,
            w_out,
            b_out: vec![0.0; feature_dim],
            scaler: 1.0,
            w_score: w_score_m.data,
            b_score: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.token_scale.rows
    }

    pub fn token_dim(&self) -> usize {
        self.token_scale.cols
    }

    pub fn feature_dim(&self) -> usize {
        self.b_out.len()
    }
}

/// Replaces every component with the mean over dimensions.
pub fn counterfactual(x: &[f64]) -> Vec<f64> {
    debug_assert!(!x.is_empty());
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    vec![mean; x.len()]
}

/// Everything recorded during a forward pass that the backward pass
/// needs.
#[derive(Debug, Clone)]
pub struct CfeTrace {
    x: Vec<f64>,
    xq: Vec<f64>,
    x_tokens: Matrix,
    q_tokens: Matrix,
    qw: Matrix,
    kw: Matrix,
    vw: Matrix,
    attention: Matrix,
    context_flat: Vec<f64>,
    head_out: Vec<f64>,
    pub f_vec: Vec<f64>,
    pub a_causal: f64,
}

fn build_tokens(params: &CfeParams, x: &[f64]) -> Matrix {
    let d = params.input_dim();
    let k = params.token_dim();
    let mut tokens = Matrix::zeros(d, k);
    for (j, xj) in x.iter().enumerate() {
        let row = tokens.row_mut(j);
        let scale = params.token_scale.row(j);
        let offset = params.token_offset.row(j);
        for i in 0..k {
            row[i] = xj * scale[i] + offset[i];
        }
    }
    tokens
}

fn forward_traced(params: &CfeParams, x: &[f64], source: QuerySource) -> Result<CfeTrace> {
    let d = params.input_dim();
    if x.len() != d {
        return Err(Error::shape(format!(
            "cfe forward: input dim {} != extractor dim {d}",
            x.len()
        )));
    }
    let k = params.token_dim();
    let xq = match source {
        QuerySource::Original => x.to_vec(),
        QuerySource::Counterfactual => counterfactual(x),
    };
    let x_tokens = build_tokens(params, x);
    let q_tokens = build_tokens(params, &xq);

    let qw = q_tokens.matmul(&params.w_query);
    let kw = x_tokens.matmul(&params.w_key);
    let vw = x_tokens.matmul(&params.w_value);

    let inv_sqrt_k = 1.0 / (k as f64).sqrt();
    let mut attention = qw.matmul_bt(&kw);
    attention.scale(inv_sqrt_k);
    for r in 0..d {
        softmax_inplace(attention.row_mut(r));
    }

    let context = attention.matmul(&vw);
    let context_flat = context.data;

    let mut head_out = params.w_out.matvec(&context_flat);
    for (h, b) in head_out.iter_mut().zip(&params.b_out) {
        *h += b;
    }
    let f_vec: Vec<f64> = head_out.iter().map(|v| v * params.scaler).collect();
    if f_vec.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite causal feature".to_string()));
    }
    let score_logit = dot(&params.w_score, &f_vec) + params.b_score;
    let a_causal = sigmoid(score_logit);

    Ok(CfeTrace {
        x: x.to_vec(),
        xq,
        x_tokens,
        q_tokens,
        qw,
        kw,
        vw,
        attention,
        context_flat,
        head_out,
        f_vec,
        a_causal,
    })
}

/// Forward pass producing the causal feature and the extractor's own
/// anomaly score.
pub fn cfe_forward(params: &CfeParams, x: &[f64], source: QuerySource) -> Result<CausalFeature> {
    let trace = forward_traced(params, x, source)?;
    Ok(CausalFeature { f_vec: trace.f_vec, a_causal: trace.a_causal })
}

/// Gradients mirroring [`CfeParams`].
#[derive(Debug, Clone)]
pub struct CfeGrads {
    pub token_scale: Matrix,
    pub token_offset: Matrix,
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub w_value: Matrix,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
    pub scaler: f64,
    pub w_score: Vec<f64>,
    pub b_score: f64,
}

impl CfeGrads {
    pub fn zeros_like(params: &CfeParams) -> Self {
        CfeGrads {
            token_scale: Matrix::zeros(params.token_scale.rows, params.token_scale.cols),
            token_offset: Matrix::zeros(params.token_offset.rows, params.token_offset.cols),
            w_query: Matrix::zeros(params.w_query.rows, params.w_query.cols),
            w_key: Matrix::zeros(params.w_key.rows, params.w_key.cols),
            w_value: Matrix::zeros(params.w_value.rows, params.w_value.cols),
            w_out: Matrix::zeros(params.w_out.rows, params.w_out.cols),
            b_out: vec![0.0; params.b_out.len()],
            scaler: 0.0,
            w_score: vec![0.0; params.w_score.len()],
            b_score: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &CfeGrads) {
        self.token_scale.add_assign(&other.token_scale);
        self.token_offset.add_assign(&other.token_offset);
        self.w_query.add_assign(&other.w_query);
        self.w_key.add_assign(&other.w_key);
        self.w_value.add_assign(&other.w_value);
        self.w_out.add_assign(&other.w_out);
        add_scaled(&mut self.b_out, &other.b_out, 1.0);
        self.scaler += other.scaler;
        add_scaled(&mut self.w_score, &other.w_score, 1.0);
        self.b_score += other.b_score;
    }

    fn for_each_tensor(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(&mut self.token_scale.data);
        f(&mut self.token_offset.data);
        f(&mut self.w_query.data);
        f(&mut self.w_key.data);
        f(&mut self.w_value.data);
        f(&mut self.w_out.data);
        f(&mut self.b_out);
        let mut s = [self.scaler];
        f(&mut s);
        self.scaler = s[0];
        f(&mut self.w_score);
        let mut b = [self.b_score];
        f(&mut b);
        self.b_score = b[0];
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        let mut clone = self.clone();
        clone.for_each_tensor(|t| sq += t.iter().map(|v| v * v).sum::<f64>());
        sq.sqrt()
    }

    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            self.for_each_tensor(|t| {
                for v in t.iter_mut() {
                    *v *= s;
                }
            });
        }
    }
}

/// Accumulates gradients for one traced forward into `grads`, given the
/// loss gradient on the feature vector and on the self-score.
fn backward_into(
    params: &CfeParams,
    trace: &CfeTrace,
    d_f: &[f64],
    d_a_causal: f64,
    grads: &mut CfeGrads,
) {
    let d = params.input_dim();
    let k = params.token_dim();
    let inv_sqrt_k = 1.0 / (k as f64).sqrt();

    // score head
    let ds = d_a_causal * trace.a_causal * (1.0 - trace.a_causal);
    add_scaled(&mut grads.w_score, &trace.f_vec, ds);
    grads.b_score += ds;
    let mut d_f_total = d_f.to_vec();
    add_scaled(&mut d_f_total, &params.w_score, ds);

    // scaler and output head
    grads.scaler += dot(&d_f_total, &trace.head_out);
    let d_head: Vec<f64> = d_f_total.iter().map(|v| v * params.scaler).collect();
    grads.w_out.add_outer(1.0, &d_head, &trace.context_flat);
    add_scaled(&mut grads.b_out, &d_head, 1.0);
    let d_flat = params.w_out.matvec_transposed(&d_head);
    let d_context = Matrix { rows: d, cols: k, data: d_flat };

    // context = attention · vw
    let d_attention = d_context.matmul_bt(&trace.vw);
    let d_vw = trace.attention.matmul_at(&d_context);

    // softmax rows
    let mut d_logits = Matrix::zeros(d, d);
    for r in 0..d {
        let a = trace.attention.row(r);
        let da = d_attention.row(r);
        let inner: f64 = a.iter().zip(da).map(|(av, dv)| av * dv).sum();
        let row = d_logits.row_mut(r);
        for c in 0..d {
            row[c] = a[c] * (da[c] - inner);
        }
    }
    d_logits.scale(inv_sqrt_k);

    // logits = qw · kw^T (already rescaled above)
    let d_qw = d_logits.matmul(&trace.kw);
    let d_kw = d_logits.matmul_at(&trace.qw);

    // projections
    let d_q_tokens = d_qw.matmul_bt(&params.w_query);
    grads.w_query.add_assign(&trace.q_tokens.matmul_at(&d_qw));
    let mut d_x_tokens = d_kw.matmul_bt(&params.w_key);
    grads.w_key.add_assign(&trace.x_tokens.matmul_at(&d_kw));
    d_x_tokens.add_assign(&d_vw.matmul_bt(&params.w_value));
    grads.w_value.add_assign(&trace.x_tokens.matmul_at(&d_vw));

    // tokens: E_j = x_j·u_j + b_j for keys/values, and again with xq for
    // the queries
    for j in 0..d {
        let dx_row = d_x_tokens.row(j);
        let dq_row = d_q_tokens.row(j);
        let su = grads.token_scale.row_mut(j);
        for i in 0..k {
            su[i] += trace.x[j] * dx_row[i] + trace.xq[j] * dq_row[i];
        }
        let sb = grads.token_offset.row_mut(j);
        for i in 0..k {
            sb[i] += dx_row[i] + dq_row[i];
        }
    }
}

/// Biased Gaussian-kernel MMD² estimate, clamped at zero. The kernel is
/// exp(-‖x-y‖² / (2·bandwidth²)).
pub fn mmd(xs: &[Vec<f64>], ys: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    Ok(mmd_with_grads(xs, ys, bandwidth, false)?.0)
}

/// MMD value with its gradients for every vector of both batches
/// (empty when gradients were not requested or the estimate clamped).
pub type MmdWithGrads = (f64, Vec<Vec<f64>>, Vec<Vec<f64>>);

/// MMD value plus, when `want_grads`, its gradients with respect to every
/// vector of both batches.
pub fn mmd_with_grads(
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    bandwidth: f64,
    want_grads: bool,
) -> Result<MmdWithGrads> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::data("mmd: both batches must be nonempty".to_string()));
    }
    let dim = xs[0].len();
    if xs.iter().chain(ys.iter()).any(|v| v.len() != dim) {
        return Err(Error::shape("mmd: inconsistent vector lengths".to_string()));
    }
    if bandwidth.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::config(format!("mmd: bandwidth must be > 0, got {bandwidth}")));
    }
    let n = xs.len();
    let m = ys.len();
    let denom = 2.0 * bandwidth * bandwidth;
    let kernel = |a: &[f64], b: &[f64]| (-squared_distance(a, b) / denom).exp();

    // Row sums computed independently, folded in order: bit-stable under
    // any thread count.
    let xx_rows = parallel::map_range(n, |i| xs.iter().map(|x| kernel(&xs[i], x)).sum::<f64>());
    let yy_rows = parallel::map_range(m, |i| ys.iter().map(|y| kernel(&ys[i], y)).sum::<f64>());
    let xy_rows = parallel::map_range(n, |i| ys.iter().map(|y| kernel(&xs[i], y)).sum::<f64>());

    let term_xx = xx_rows.iter().sum::<f64>() / (n * n) as f64;
    let term_yy = yy_rows.iter().sum::<f64>() / (m * m) as f64;
    let term_xy = xy_rows.iter().sum::<f64>() / (n * m) as f64;
    let raw = term_xx + term_yy - 2.0 * term_xy;
    let value = raw.max(0.0);

    if !want_grads || raw <= 0.0 {
        return Ok((value, Vec::new(), Vec::new()));
    }

    let inv_s2 = 1.0 / (bandwidth * bandwidth);
    let d_xs = parallel::map_range(n, |i| {
        let mut g = vec![0.0; dim];
        for x in xs {
            let kv = kernel(&xs[i], x);
            for (gd, (a, b)) in g.iter_mut().zip(xs[i].iter().zip(x)) {
                *gd += (2.0 / (n * n) as f64) * kv * (-(a - b) * inv_s2);
            }
        }
        for y in ys {
            let kv = kernel(&xs[i], y);
            for (gd, (a, b)) in g.iter_mut().zip(xs[i].iter().zip(y)) {
                *gd -= (2.0 / (n * m) as f64) * kv * (-(a - b) * inv_s2);
            }
        }
        g
    });
    let d_ys = parallel::map_range(m, |i| {
        let mut g = vec![0.0; dim];
        for y in ys {
            let kv = kernel(&ys[i], y);
            for (gd, (a, b)) in g.iter_mut().zip(ys[i].iter().zip(y)) {
                *gd += (2.0 / (m * m) as f64) * kv * (-(a - b) * inv_s2);
            }
        }
        for x in xs {
            let kv = kernel(&ys[i], x);
            for (gd, (a, b)) in g.iter_mut().zip(ys[i].iter().zip(x)) {
                *gd -= (2.0 / (n * m) as f64) * kv * (-(a - b) * inv_s2);
            }
        }
        g
    });
    Ok((value, d_xs, d_ys))
}

/// Median pairwise Euclidean distance of the combined batch, floored.
pub fn median_bandwidth(batches: &[&[Vec<f64>]], floor: f64) -> f64 {
    let combined: Vec<&Vec<f64>> = batches.iter().flat_map(|b| b.iter()).collect();
    let n = combined.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(squared_distance(combined[i], combined[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return floor;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    median.max(floor)
}

/// (1/N)·Σ [tau·max(0,u)² + (1−tau)·max(0,−u)²]
pub fn asymmetric_l2(residuals: &[f64], tau: f64) -> f64 {
    debug_assert!(!residuals.is_empty());
    let n = residuals.len() as f64;
    residuals
        .iter()
        .map(|u| {
            let pos = u.max(0.0);
            let neg = (-u).max(0.0);
            tau * pos * pos + (1.0 - tau) * neg * neg
        })
        .sum::<f64>()
        / n
}

fn asymmetric_l2_grad(residuals: &[f64], tau: f64) -> Vec<f64> {
    let n = residuals.len() as f64;
    residuals
        .iter()
        .map(|u| (2.0 * tau * u.max(0.0) - 2.0 * (1.0 - tau) * (-u).max(0.0)) / n)
        .collect()
}

/// How the MMD bandwidth is chosen inside the combined loss.
#[derive(Debug, Clone, Copy)]
pub enum BandwidthMode {
    /// Median pairwise distance of the combined feature batch, floored.
    Median { floor: f64 },
    /// Pinned value, used by the gradient checks.
    Fixed(f64),
}

/// Combined loss of one extractor update: MMD between original-query and
/// counterfactual-query features, plus the asymmetric L2 gap between the
/// agent's scores (constants) and the extractor's own counterfactual
/// score. Returns the loss and gradients for every parameter.
pub fn cfe_loss(
    params: &CfeParams,
    batch: &[Vec<f64>],
    a_sac: &[f64],
    tau: f64,
    bandwidth: BandwidthMode,
) -> Result<(f64, CfeGrads)> {
    if batch.is_empty() {
        return Err(Error::data("cfe_loss: empty batch".to_string()));
    }
    if batch.len() != a_sac.len() {
        return Err(Error::shape(format!(
            "cfe_loss: batch size {} != a_sac size {}",
            batch.len(),
            a_sac.len()
        )));
    }

    let traces: Vec<(CfeTrace, CfeTrace)> = {
        let results = parallel::map_slice(batch, |x| {
            let orig = forward_traced(params, x, QuerySource::Original)?;
            let cf = forward_traced(params, x, QuerySource::Counterfactual)?;
            Ok::<_, Error>((orig, cf))
        });
        results.into_iter().collect::<Result<Vec<_>>>()?
    };

    let f_orig: Vec<Vec<f64>> = traces.iter().map(|(o, _)| o.f_vec.clone()).collect();
    let f_cf: Vec<Vec<f64>> = traces.iter().map(|(_, c)| c.f_vec.clone()).collect();

    let bw = match bandwidth {
        BandwidthMode::Median { floor } => median_bandwidth(&[&f_orig, &f_cf], floor),
        BandwidthMode::Fixed(b) => b,
    };
    let (mmd_val, d_f_orig, d_f_cf) = mmd_with_grads(&f_orig, &f_cf, bw, true)?;

    let residuals: Vec<f64> = a_sac
        .iter()
        .zip(traces.iter())
        .map(|(s, (_, c))| s - c.a_causal)
        .collect();
    let asym_val = asymmetric_l2(&residuals, tau);
    let d_residual = asymmetric_l2_grad(&residuals, tau);

    let zero_f = vec![0.0; params.feature_dim()];
    let mmd_positive = !d_f_orig.is_empty();

    let indices: Vec<usize> = (0..traces.len()).collect();
    let chunk_grads: Vec<CfeGrads> = {
        let chunks: Vec<&[usize]> = indices.chunks(GRAD_CHUNK).collect();
        parallel::map_slice(&chunks, |chunk| {
            let mut g = CfeGrads::zeros_like(params);
            for &i in chunk.iter() {
                let (orig, cf) = &traces[i];
                let d_orig = if mmd_positive { &d_f_orig[i] } else { &zero_f };
                let d_cf = if mmd_positive { &d_f_cf[i] } else { &zero_f };
                backward_into(params, orig, d_orig, 0.0, &mut g);
                backward_into(params, cf, d_cf, -d_residual[i], &mut g);
            }
            g
        })
    };
    let mut grads = CfeGrads::zeros_like(params);
    for g in &chunk_grads {
        grads.add_assign(g);
    }

    Ok((mmd_val + asym_val, grads))
}

/// Adam state shaped like [`CfeParams`].
#[derive(Debug, Clone)]
pub struct CfeAdam {
    m: CfeGrads,
    v: CfeGrads,
    step: u64,
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl CfeAdam {
    pub fn new(params: &CfeParams, learning_rate: f64) -> Self {
        CfeAdam {
            m: CfeGrads::zeros_like(params),
            v: CfeGrads::zeros_like(params),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn apply(&mut self, params: &mut CfeParams, grads: &CfeGrads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (lr, b1, b2, eps) = (self.learning_rate, self.beta1, self.beta2, self.epsilon);
        let upd = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                adam_scalar(&mut p[i], g[i], &mut m[i], &mut v[i], lr, b1, b2, eps, bc1, bc2);
            }
        };
        upd(&mut params.token_scale.data, &grads.token_scale.data, &mut self.m.token_scale.data, &mut self.v.token_scale.data);
        upd(&mut params.token_offset.data, &grads.token_offset.data, &mut self.m.token_offset.data, &mut self.v.token_offset.data);
        upd(&mut params.w_query.data, &grads.w_query.data, &mut self.m.w_query.data, &mut self.v.w_query.data);
        upd(&mut params.w_key.data, &grads.w_key.data, &mut self.m.w_key.data, &mut self.v.w_key.data);
        upd(&mut params.w_value.data, &grads.w_value.data, &mut self.m.w_value.data, &mut self.v.w_value.data);
        upd(&mut params.w_out.data, &grads.w_out.data, &mut self.m.w_out.data, &mut self.v.w_out.data);
        upd(&mut params.b_out, &grads.b_out, &mut self.m.b_out, &mut self.v.b_out);
        {
            let mut p = [params.scaler];
            let mut m = [self.m.scaler];
            let mut v = [self.v.scaler];
            adam_scalar(&mut p[0], grads.scaler, &mut m[0], &mut v[0], lr, b1, b2, eps, bc1, bc2);
            params.scaler = p[0];
            self.m.scaler = m[0];
            self.v.scaler = v[0];
        }
        upd(&mut params.w_score, &grads.w_score, &mut self.m.w_score, &mut self.v.w_score);
        {
            let mut p = [params.b_score];
            let mut m = [self.m.b_score];
            let mut v = [self.v.b_score];
            adam_scalar(&mut p[0], grads.b_score, &mut m[0], &mut v[0], lr, b1, b2, eps, bc1, bc2);
            params.b_score = p[0];
            self.m.b_score = m[0];
            self.v.b_score = v[0];
        }
    }
}

/// Causal extractor bundled with its optimizer and loss settings.
#[derive(Debug)]
pub struct CausalExtractor {
    pub params: CfeParams,
    opt: CfeAdam,
    pub tau: f64,
    pub bandwidth_floor: f64,
    pub grad_clip: f64,
    counterfactual_calls: AtomicU64,
}

impl CausalExtractor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        input_dim: usize,
        token_dim: usize,
        feature_dim: usize,
        tau: f64,
        bandwidth_floor: f64,
        grad_clip: f64,
        learning_rate: f64,
        seed: u64,
    ) -> Self {
        let params = CfeParams::init(input_dim, token_dim, feature_dim, seed);
        let opt = CfeAdam::new(&params, learning_rate);
        CausalExtractor {
            params,
            opt,
            tau,
            bandwidth_floor,
            grad_clip,
            counterfactual_calls: AtomicU64::new(0),
        }
    }
}

/// Plain two-layer dense encoder used by the `no_causal` ablation:
/// same output width, trained by the asymmetric L2 term only.
#[derive(Debug)]
pub struct PlainExtractor {
    pub encoder: DenseNet,
    pub score_head: DenseNet,
    opt_encoder: OptimizerState,
    opt_head: OptimizerState,
    pub tau: f64,
    pub grad_clip: f64,
}

impl PlainExtractor {
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        feature_dim: usize,
        tau: f64,
        grad_clip: f64,
        learning_rate: f64,
        seed: u64,
    ) -> Self {
        let encoder = crate::diffnet::xavier_init(&[input_dim, hidden_dim, feature_dim], seed);
        let mut score_head = crate::diffnet::xavier_init(&[feature_dim, 1], seed.wrapping_add(1));
        score_head.layers[0].activation = Activation::Sigmoid;
        let opt_encoder = OptimizerState::new(&encoder, learning_rate);
        let opt_head = OptimizerState::new(&score_head, learning_rate);
        PlainExtractor { encoder, score_head, opt_encoder, opt_head, tau, grad_clip }
    }
}

/// The feature pipeline the agent sees: either the causal extractor or
/// the plain dense stand-in.
#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
pub enum FeatureExtractor {
    Causal(CausalExtractor),
    Plain(PlainExtractor),
}

impl FeatureExtractor {
    pub fn out_dim(&self) -> usize {
        match self {
            FeatureExtractor::Causal(c) => c.params.feature_dim(),
            FeatureExtractor::Plain(p) => p.encoder.out_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FeatureExtractor::Causal(c) => c.params.input_dim(),
            FeatureExtractor::Plain(p) => p.encoder.in_dim(),
        }
    }

    pub fn is_causal(&self) -> bool {
        matches!(self, FeatureExtractor::Causal(_))
    }

    /// Number of counterfactual constructions performed so far; the
    /// `no_causal` wiring check asserts this stays at zero.
    pub fn counterfactual_calls(&self) -> u64 {
        match self {
            FeatureExtractor::Causal(c) => c.counterfactual_calls.load(Ordering::Relaxed),
            FeatureExtractor::Plain(_) => 0,
        }
    }

    /// The feature vector the agent acts on.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            FeatureExtractor::Causal(c) => {
                c.counterfactual_calls.fetch_add(1, Ordering::Relaxed);
                Ok(cfe_forward(&c.params, x, QuerySource::Counterfactual)?.f_vec)
            }
            FeatureExtractor::Plain(p) => p.encoder.infer(x),
        }
    }

    pub fn features_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        parallel::map_slice(xs, |x| self.features(x))
            .into_iter()
            .collect()
    }

    /// One training step on a batch of raw observations. `agent_score`
    /// maps a feature vector to the agent's (detached) anomaly score.
    pub fn train_step(
        &mut self,
        batch: &[Vec<f64>],
        agent_score: &(dyn Fn(&[f64]) -> Result<f64> + Sync),
    ) -> Result<f64> {
        match self {
            FeatureExtractor::Causal(c) => {
                c.counterfactual_calls
                    .fetch_add(batch.len() as u64 * 2, Ordering::Relaxed);
                let a_sac = {
                    let results = parallel::map_slice(batch, |x| {
                        let f = cfe_forward(&c.params, x, QuerySource::Counterfactual)?;
                        agent_score(&f.f_vec)
                    });
                    results.into_iter().collect::<Result<Vec<f64>>>()?
                };
                let (loss, mut grads) = cfe_loss(
                    &c.params,
                    batch,
                    &a_sac,
                    c.tau,
                    BandwidthMode::Median { floor: c.bandwidth_floor },
                )?;
                grads.clip_global_norm(c.grad_clip);
                c.opt.apply(&mut c.params, &grads);
                Ok(loss)
            }
            FeatureExtractor::Plain(p) => {
                let n = batch.len() as f64;
                let mut enc_grads = NetGrads::zeros_like(&p.encoder);
                let mut head_grads = NetGrads::zeros_like(&p.score_head);
                let mut residuals = Vec::with_capacity(batch.len());
                let mut tapes = Vec::with_capacity(batch.len());
                for x in batch {
                    let (f, enc_tape) = p.encoder.forward(x)?;
                    let (score, head_tape) = p.score_head.forward(&f)?;
                    let a_sac = agent_score(&f)?;
                    residuals.push(a_sac - score[0]);
                    tapes.push((enc_tape, head_tape));
                }
                let tau = p.tau;
                for (u, (enc_tape, head_tape)) in residuals.iter().zip(&tapes) {
                    let du = (2.0 * tau * u.max(0.0) - 2.0 * (1.0 - tau) * (-u).max(0.0)) / n;
                    let d_score = -du;
                    let (hg, d_f) = p.score_head.backward(head_tape, &[d_score])?;
                    head_grads.add_assign(&hg);
                    let (eg, _) = p.encoder.backward(enc_tape, &d_f)?;
                    enc_grads.add_assign(&eg);
                }
                enc_grads.clip_global_norm(p.grad_clip);
                head_grads.clip_global_norm(p.grad_clip);
                crate::diffnet::adam_step(&mut p.encoder, &enc_grads, &mut p.opt_encoder);
                crate::diffnet::adam_step(&mut p.score_head, &head_grads, &mut p.opt_head);
                Ok(asymmetric_l2(&residuals, tau))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counterfactual_is_the_dimension_mean() {
        assert_eq!(counterfactual(&[1.0, 2.0, 3.0]), vec![2.0, 2.0, 2.0]);
        assert_eq!(counterfactual(&[0.7, 0.7]), vec![0.7, 0.7]);
        assert_eq!(counterfactual(&[0.0, 1.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let params = CfeParams::init(5, 8, 4, 3);
        let x = [0.1, 0.9, 0.4, 0.2, 0.6];
        for source in [QuerySource::Original, QuerySource::Counterfactual] {
            let trace = forward_traced(&params, &x, source).unwrap();
            for r in 0..5 {
                let s: f64 = trace.attention.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
            }
        }
    }

    #[test]
    fn zero_scaler_annihilates_the_feature() {
        let mut params = CfeParams::init(4, 6, 3, 1);
        params.scaler = 0.0;
        let out = cfe_forward(&params, &[0.3, 0.1, 0.8, 0.5], QuerySource::Counterfactual).unwrap();
        assert!(out.f_vec.iter().all(|v| *v == 0.0));
        assert!((out.a_causal - sigmoid(params.b_score)).abs() < 1e-12);
    }

    #[test]
    fn a_causal_is_strictly_inside_unit_interval() {
        let params = CfeParams::init(6, 8, 5, 9);
        for i in 0..20 {
            let x: Vec<f64> = (0..6).map(|j| ((i * 7 + j) as f64 * 0.37).sin().abs()).collect();
            let out = cfe_forward(&params, &x, QuerySource::Counterfactual).unwrap();
            assert!(out.a_causal > 0.0 && out.a_causal < 1.0);
        }
    }

    #[test]
    fn permuting_dims_and_embeddings_together_preserves_the_feature() {
        let d = 3;
        let k = 4;
        let f = 5;
        let params = CfeParams::init(d, k, f, 11);
        let x = [0.2, 0.9, 0.5];
        let perm = [2usize, 0, 1];

        let mut permuted = params.clone();
        for (new_j, old_j) in perm.iter().enumerate() {
            permuted
                .token_scale
                .row_mut(new_j)
                .copy_from_slice(params.token_scale.row(*old_j));
            permuted
                .token_offset
                .row_mut(new_j)
                .copy_from_slice(params.token_offset.row(*old_j));
            // context rows permute with the tokens, so the flattened
            // layout moves in blocks of k: remap the output-head columns
            for i in 0..f {
                for c in 0..k {
                    let v = params.w_out.get(i, old_j * k + c);
                    permuted.w_out.set(i, new_j * k + c, v);
                }
            }
        }
        let x_perm: Vec<f64> = perm.iter().map(|j| x[*j]).collect();

        let base = cfe_forward(&params, &x, QuerySource::Counterfactual).unwrap();
        let moved = cfe_forward(&permuted, &x_perm, QuerySource::Counterfactual).unwrap();
        for (a, b) in base.f_vec.iter().zip(&moved.f_vec) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn mmd_identical_batches_vanish() {
        let xs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.3, 1.0 - i as f64 * 0.1]).collect();
        let v = mmd(&xs, &xs, 1.0).unwrap();
        assert!(v <= 1e-9, "mmd(X,X) = {v}");
    }

    #[test]
    fn mmd_matches_closed_form_for_separated_batches() {
        // all xs at the origin, all ys at distance 10, bandwidth 1:
        // 1 + 1 - 2·exp(-50)
        let xs: Vec<Vec<f64>> = (0..4).map(|_| vec![0.0, 0.0]).collect();
        let ys: Vec<Vec<f64>> = (0..5).map(|_| vec![10.0, 0.0]).collect();
        let v = mmd(&xs, &ys, 1.0).unwrap();
        let expect = 2.0 - 2.0 * (-50.0f64).exp();
        assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
    }

    #[test]
    fn mmd_is_symmetric() {
        let xs: Vec<Vec<f64>> = (0..5).map(|i| vec![(i as f64).sin(), (i as f64).cos()]).collect();
        let ys: Vec<Vec<f64>> = (0..7).map(|i| vec![(i as f64) * 0.2, 0.4]).collect();
        let a = mmd(&xs, &ys, 0.7).unwrap();
        let b = mmd(&ys, &xs, 0.7).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_l2_branch_values() {
        assert!((asymmetric_l2(&[1.0], 0.7) - 0.7).abs() < 1e-12);
        assert!((asymmetric_l2(&[-1.0], 0.7) - 0.3).abs() < 1e-12);
        assert_eq!(asymmetric_l2(&[0.0, 0.0, 0.0], 0.7), 0.0);
    }

    proptest! {
        #[test]
        fn asymmetric_l2_reflection_identity(
            us in proptest::collection::vec(-3.0f64..3.0, 1..20),
            tau in 0.05f64..0.95,
        ) {
            let neg: Vec<f64> = us.iter().map(|u| -u).collect();
            let a = asymmetric_l2(&us, tau);
            let b = asymmetric_l2(&neg, 1.0 - tau);
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn mmd_is_nonnegative(
            seed in 0u64..500,
        ) {
            let mut rng = seed_stream(seed, "mmdprop");
            use rand::RngExt;
            let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let ys: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            prop_assert!(mmd(&xs, &ys, 0.5).unwrap() >= 0.0);
        }
    }

    fn toy_batch(d: usize, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        use rand::RngExt;
        let mut rng = seed_stream(seed, "cfebatch");
        let batch: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let a_sac: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        (batch, a_sac)
    }

    #[test]
    fn cfe_loss_vanishes_when_paths_and_scores_align() {
        // constant vectors are fixed points of the counterfactual, so
        // both query paths produce identical features; matching the
        // agent scores to the self-scores kills the second term too
        let params = CfeParams::init(4, 6, 5, 3);
        let batch: Vec<Vec<f64>> = vec![vec![0.3; 4], vec![0.8; 4], vec![0.55; 4]];
        let a_sac: Vec<f64> = batch
            .iter()
            .map(|x| cfe_forward(&params, x, QuerySource::Counterfactual).unwrap().a_causal)
            .collect();
        let (loss, _) = cfe_loss(&params, &batch, &a_sac, 0.7, BandwidthMode::Fixed(1.0)).unwrap();
        assert!(loss <= 1e-12, "loss {loss}");
    }

    #[test]
    fn cfe_loss_is_nonnegative_and_descends() {
        let (batch, a_sac) = toy_batch(5, 8, 2);
        let mut params = CfeParams::init(5, 8, 6, 7);
        let bw = BandwidthMode::Fixed(1.0);
        let (loss0, grads) = cfe_loss(&params, &batch, &a_sac, 0.7, bw).unwrap();
        assert!(loss0 >= 0.0);

        let mut opt = CfeAdam::new(&params, 1e-3);
        opt.apply(&mut params, &grads);
        let (loss1, _) = cfe_loss(&params, &batch, &a_sac, 0.7, bw).unwrap();
        assert!(loss1 < loss0, "one Adam step should decrease the batch loss: {loss0} -> {loss1}");
    }

    /// Central-difference check of every parameter group of the combined
    /// loss on a small instance, shared with the acceptance suite.
    pub(crate) fn cfe_finite_diff(seed: u64) -> (f64, f64) {
        let d = 4;
        let (batch, a_sac) = toy_batch(d, 6, seed);
        let params = CfeParams::init(d, 8, 8, seed.wrapping_add(40));
        let bw = BandwidthMode::Fixed(0.8);
        let tau = 0.7;
        let (_, grads) = cfe_loss(&params, &batch, &a_sac, tau, bw).unwrap();

        let eval = |p: &CfeParams| cfe_loss(p, &batch, &a_sac, tau, bw).unwrap().0;
        let h = 1e-5;
        let mut worst_rel: f64 = 0.0;
        let mut worst_abs: f64 = 0.0;
        let mut check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * h);
            let abs = (numeric - analytic).abs();
            if analytic.abs() > 1e-6 {
                worst_rel = worst_rel.max(abs / analytic.abs());
            } else {
                worst_abs = worst_abs.max(abs);
            }
        };

        macro_rules! probe_tensor {
            ($field:ident, $grad:expr) => {{
                let mut p = params.clone();
                for i in 0..p.$field.data.len() {
                    let orig = p.$field.data[i];
                    p.$field.data[i] = orig + h;
                    let lp = eval(&p);
                    p.$field.data[i] = orig - h;
                    let lm = eval(&p);
                    p.$field.data[i] = orig;
                    check($grad.data[i], lp, lm);
                }
            }};
        }
        probe_tensor!(token_scale, grads.token_scale);
        probe_tensor!(token_offset, grads.token_offset);
        probe_tensor!(w_query, grads.w_query);
        probe_tensor!(w_key, grads.w_key);
        probe_tensor!(w_value, grads.w_value);
        probe_tensor!(w_out, grads.w_out);

        {
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
        }
        (worst_rel, worst_abs)
    }

    #[test]
    fn cfe_gradients_match_finite_differences() {
        let (rel, abs) = cfe_finite_diff(5);
        assert!(rel < 1e-4, "worst relative error {rel}");
        assert!(abs < 1e-6, "worst near-zero abs error {abs}");
    }

    #[test]
    fn extractor_counts_counterfactual_invocations() {
        let causal = FeatureExtractor::Causal(CausalExtractor::new(
            4, 6, 5, 0.7, 1e-3, 5.0, 5e-4, 1,
        ));
        assert_eq!(causal.counterfactual_calls(), 0);
        causal.features(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(causal.counterfactual_calls(), 1);

        let mut plain = FeatureExtractor::Plain(PlainExtractor::new(4, 8, 5, 0.7, 5.0, 5e-4, 1));
        plain.features(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let (batch, _) = toy_batch(4, 6, 3);
        plain.train_step(&batch, &|_| Ok(0.5)).unwrap();
        assert_eq!(plain.counterfactual_calls(), 0);
    }

    #[test]
    fn plain_extractor_training_reduces_score_gap() {
        let mut plain = FeatureExtractor::Plain(PlainExtractor::new(3, 8, 4, 0.7, 5.0, 1e-2, 5));
        let (batch, _) = toy_batch(3, 10, 9);
        let target = |_: &[f64]| Ok(0.9);
        let first = plain.train_step(&batch, &target).unwrap();
        let mut last = first;
        for _ in 0..60 {
            last = plain.train_step(&batch, &target).unwrap();
        }
        assert!(last < first, "asymmetric loss should fall: {first} -> {last}");
    }
}
