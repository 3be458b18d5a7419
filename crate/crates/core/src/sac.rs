//! Soft actor-critic over extracted features: a squashed-Gaussian policy
//! on the action space (0,1), twin critics, a value network with a
//! softly-updated target, and a uniform replay buffer.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::diffnet::{adam_step, soft_update, xavier_init, DenseNet, NetGrads, OptimizerState};
use crate::error::{Error, Result};
use crate::seed_stream;

const LOG_STD_MIN: f64 = -20.0;
const LOG_STD_MAX: f64 = 2.0;

/// Agent hyperparameters. Defaults: two hidden layers of 128 relu units
/// everywhere, learning rate 5e-4 for actor and critics, soft target
/// updates every 20 steps, uniform warm-up actions for the first 5000
/// steps, updates gated on 10000 buffered transitions.
#[derive(Debug, Clone)]
pub struct SacConfig {
    pub hidden_dim: usize,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub value_lr: f64,
    pub tau_soft: f64,
    pub target_update_interval: u64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub warmup_steps: u64,
    pub warmup_size: usize,
    pub grad_clip: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            hidden_dim: 128,
            gamma: 0.99,
            entropy_coef: 0.2,
            actor_lr: 5e-4,
            critic_lr: 5e-4,
            value_lr: 5e-4,
            tau_soft: 0.01,
            target_update_interval: 20,
            batch_size: 64,
            replay_capacity: 100_000,
            warmup_steps: 5000,
            warmup_size: 10_000,
            grad_clip: 5.0,
        }
    }
}

/// One replay record over raw observations.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: f64,
    pub reward: f64,
    pub next_obs: Vec<f64>,
}

/// FIFO ring with uniform without-replacement batch sampling.
#[derive(Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReplayBuffer { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn sample(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Transition>> {
        if batch_size > self.items.len() {
            return Err(Error::data(format!(
                "replay buffer holds {} transitions, cannot sample {batch_size}",
                self.items.len()
            )));
        }
        Ok(rand::seq::index::sample(rng, self.items.len(), batch_size)
            .iter()
            .map(|i| self.items[i].clone())
            .collect())
    }
}

/// Box-Muller standard normal draw; two uniform draws per sample keeps
/// the stream layout fixed.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// All learnable agent state: policy, twin critics, value and target
/// value networks with their optimizers.
#[derive(Debug, Clone)]
pub struct AgentNets {
    pub policy: DenseNet,
    pub q1: DenseNet,
    pub q2: DenseNet,
    pub value: DenseNet,
    pub target_value: DenseNet,
    opt_policy: OptimizerState,
    opt_q1: OptimizerState,
    opt_q2: OptimizerState,
    opt_value: OptimizerState,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub tau_soft: f64,
    pub grad_clip: f64,
}

impl AgentNets {
    pub fn new(feature_dim: usize, cfg: &SacConfig, seed: u64) -> Self {
        let mut seeder = seed_stream(seed, "agent-init");
        let mut next = || seeder.random::<u64>();
        let h = cfg.hidden_dim;
        let policy = xavier_init(&[feature_dim, h, h, 2], next());
        let q1 = xavier_init(&[feature_dim + 1, h, h, 1], next());
        let q2 = xavier_init(&[feature_dim + 1, h, h, 1], next());
        let value = xavier_init(&[feature_dim, h, h, 1], next());
        let target_value = value.clone();
        AgentNets {
            opt_policy: OptimizerState::new(&policy, cfg.actor_lr),
            opt_q1: OptimizerState::new(&q1, cfg.critic_lr),
            opt_q2: OptimizerState::new(&q2, cfg.critic_lr),
            opt_value: OptimizerState::new(&value, cfg.value_lr),
            policy,
            q1,
            q2,
            value,
            target_value,
            entropy_coef: cfg.entropy_coef,
            gamma: cfg.gamma,
            tau_soft: cfg.tau_soft,
            grad_clip: cfg.grad_clip,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.policy.in_dim()
    }

    fn policy_head(&self, features: &[f64]) -> Result<(f64, f64, f64)> {
        let out = self.policy.infer(features)?;
        let mean = out[0];
        let log_std = out[1].clamp(LOG_STD_MIN, LOG_STD_MAX);
        Ok((mean, log_std, out[1]))
    }

    /// Log-density of the squashed-and-shifted Gaussian policy at a
    /// pre-squash value `u`: the Gaussian term plus the change-of-
    /// variables correction for a = (tanh(u)+1)/2.
    fn log_prob_from_u(mean: f64, log_std: f64, u: f64) -> f64 {
        let std = log_std.exp();
        let eps = (u - mean) / std;
        let gauss = -log_std - 0.5 * (2.0 * PI).ln() - 0.5 * eps * eps;
        // -ln(1 - tanh²(u)) + ln 2 in a saturation-safe form
        let correction = 2.0 * u + 2.0 * softplus(-2.0 * u) - (2.0f64).ln();
        gauss + correction
    }

    /// Draws an action from the current policy. Returns the action in
    /// (0,1) and its log-density.
    pub fn sample_action(&self, features: &[f64], rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let (mean, log_std, _) = self.policy_head(features)?;
        let eps = standard_normal(rng);
        let u = mean + log_std.exp() * eps;
        let action = (u.tanh() + 1.0) / 2.0;
        if !action.is_finite() {
            return Err(Error::numerical("non-finite policy action".to_string()));
        }
        Ok((action.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON), Self::log_prob_from_u(mean, log_std, u)))
    }

    /// Deterministic (mean) squashed action; the anomaly score at
    /// evaluation time.
    pub fn act_deterministic(&self, features: &[f64]) -> Result<f64> {
        let (mean, _, _) = self.policy_head(features)?;
        Ok((mean.tanh() + 1.0) / 2.0)
    }

    /// Log-density of an arbitrary action in (0,1) under the current
    /// policy; the quadrature oracle integrates its exponential.
    pub fn action_log_prob(&self, features: &[f64], action: f64) -> Result<f64> {
        if !(0.0 < action && action < 1.0) {
            return Err(Error::config(format!("action {action} outside (0,1)")));
        }
        let (mean, log_std, _) = self.policy_head(features)?;
        // invert the squash: u = atanh(2a-1)
        let u = 0.5 * (action / (1.0 - action)).ln();
        Ok(Self::log_prob_from_u(mean, log_std, u))
    }

    /// y = r + γ·V'(F')
    pub fn compute_target(&self, reward: f64, next_features: &[f64]) -> Result<f64> {
        let v = self.target_value.infer(next_features)?[0];
        Ok(reward + self.gamma * v)
    }

    fn critic_input(features: &[f64], action: f64) -> Vec<f64> {
        let mut input = Vec::with_capacity(features.len() + 1);
        input.extend_from_slice(features);
        input.push(action);
        input
    }

    /// Mean-squared-error losses and gradients of both critics toward
    /// the targets `ys`.
    pub fn critic_losses_and_grads(
        &self,
        features: &[Vec<f64>],
        actions: &[f64],
        ys: &[f64],
    ) -> Result<(f64, f64, NetGrads, NetGrads)> {
        let n = features.len() as f64;
        let mut g1 = NetGrads::zeros_like(&self.q1);
        let mut g2 = NetGrads::zeros_like(&self.q2);
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for ((f, a), y) in features.iter().zip(actions).zip(ys) {
            let input = Self::critic_input(f, *a);
            for (net, grads, loss) in [
                (&self.q1, &mut g1, &mut l1),
                (&self.q2, &mut g2, &mut l2),
            ] {
                let (out, tape) = net.forward(&input)?;
                let residual = out[0] - y;
                *loss += residual * residual / n;
                let (g, _) = net.backward(&tape, &[2.0 * residual / n])?;
                grads.add_assign(&g);
            }
        }
        Ok((l1, l2, g1, g2))
    }

    /// One Adam step on each critic toward the targets.
    pub fn update_critics(
        &mut self,
        features: &[Vec<f64>],
        actions: &[f64],
        ys: &[f64],
    ) -> Result<(f64, f64)> {
        let (l1, l2, mut g1, mut g2) = self.critic_losses_and_grads(features, actions, ys)?;
        g1.clip_global_norm(self.grad_clip);
        g2.clip_global_norm(self.grad_clip);
        adam_step(&mut self.q1, &g1, &mut self.opt_q1);
        adam_step(&mut self.q2, &g2, &mut self.opt_q2);
        Ok((l1, l2))
    }

    /// Value-network loss and gradients: regression toward
    /// min(Q1,Q2)(F, ã) − α·log π(ã|F) with a fresh policy sample ã,
    /// all treated as constants.
    pub fn value_loss_and_grads(
        &self,
        features: &[Vec<f64>],
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, NetGrads)> {
        let n = features.len() as f64;
        let mut grads = NetGrads::zeros_like(&self.value);
        let mut loss = 0.0;
        for f in features {
            let (action, log_prob) = self.sample_action(f, rng)?;
            let input = Self::critic_input(f, action);
            let q1 = self.q1.infer(&input)?[0];
            let q2 = self.q2.infer(&input)?[0];
            let target = q1.min(q2) - self.entropy_coef * log_prob;
            let (out, tape) = self.value.forward(f)?;
            let residual = out[0] - target;
            loss += residual * residual / n;
            let (g, _) = self.value.backward(&tape, &[2.0 * residual / n])?;
            grads.add_assign(&g);
        }
        Ok((loss, grads))
    }

    pub fn update_value(&mut self, features: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<f64> {
        let (loss, mut grads) = self.value_loss_and_grads(features, rng)?;
        grads.clip_global_norm(self.grad_clip);
        adam_step(&mut self.value, &grads, &mut self.opt_value);
        Ok(loss)
    }

    /// Policy loss and gradients: maximizes
    /// min(Q1,Q2)(F, a_φ) − α·log π(a_φ|F) through the reparameterized
    /// sample a_φ, so critic input-gradients flow into the policy.
    pub fn policy_loss_and_grads(
        &self,
        features: &[Vec<f64>],
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, NetGrads)> {
        let n = features.len() as f64;
        let alpha = self.entropy_coef;
        let mut grads = NetGrads::zeros_like(&self.policy);
        let mut loss = 0.0;
        for f in features {
            let (out, tape) = self.policy.forward(f)?;
            let mean = out[0];
            let raw_log_std = out[1];
            let log_std = raw_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX);
            let std = log_std.exp();
            let eps = standard_normal(rng);
            let u = mean + std * eps;
            let t = u.tanh();
            let action = (t + 1.0) / 2.0;
            let log_prob = Self::log_prob_from_u(mean, log_std, u);

            let input = Self::critic_input(f, action);
            let (q1_out, q1_tape) = self.q1.forward(&input)?;
            let (q2_out, q2_tape) = self.q2.forward(&input)?;
            let (q_min, min_net, min_tape) = if q1_out[0] <= q2_out[0] {
                (q1_out[0], &self.q1, &q1_tape)
            } else {
                (q2_out[0], &self.q2, &q2_tape)
            };
            loss += (alpha * log_prob - q_min) / n;

            // dq/da through the chosen critic's input gradient
            let (_, input_grad) = min_net.backward(min_tape, &[1.0])?;
            let dq_da = input_grad[f.len()];

            let da_du = (1.0 - t * t) / 2.0;
            let dlogp_dmean = 2.0 * t;
            let dlogp_dlogstd = -1.0 + 2.0 * t * std * eps;

            let d_mean = (-dq_da * da_du + alpha * dlogp_dmean) / n;
            let clamp_gate =
                if (LOG_STD_MIN..LOG_STD_MAX).contains(&raw_log_std) { 1.0 } else { 0.0 };
            let d_log_std =
                clamp_gate * (-dq_da * da_du * std * eps + alpha * dlogp_dlogstd) / n;

            let (g, _) = self.policy.backward(&tape, &[d_mean, d_log_std])?;
            grads.add_assign(&g);
        }
        Ok((loss, grads))
    }

    pub fn update_policy(&mut self, features: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<f64> {
        let (loss, mut grads) = self.policy_loss_and_grads(features, rng)?;
        grads.clip_global_norm(self.grad_clip);
        adam_step(&mut self.policy, &grads, &mut self.opt_policy);
        Ok(loss)
    }

    /// target ← (1−τ)·target + τ·value
    pub fn soft_update_target(&mut self) -> Result<()> {
        soft_update(&mut self.target_value, &self.value, self.tau_soft)
    }
}
