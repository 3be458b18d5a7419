//! The anomaly decision-making interactive environment.
//!
//! Maintains the three data pools (labeled anomalies, temporary
//! suspects, unlabeled) with per-point confidence counters, samples the
//! next observation by historical similarity, smooths the anomaly
//! threshold toward a target decision ratio, and emits pool-dependent
//! rewards.

use std::collections::{HashMap, VecDeque};

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::squared_distance;
use crate::parallel;
use crate::seed_stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolId {
    Anomaly,
    Temporary,
    Unlabeled,
}

impl PoolId {
    pub fn letter(self) -> char {
        match self {
            PoolId::Anomaly => 'A',
            PoolId::Temporary => 'T',
            PoolId::Unlabeled => 'U',
        }
    }
}

/// Set with O(1) membership, O(1) uniform choice, O(1) swap-removal.
/// Iteration happens only over the insertion-ordered vector, never over
/// the map, so behavior is reproducible.
#[derive(Debug, Clone, Default)]
pub struct IndexedSet {
    items: Vec<usize>,
    positions: HashMap<usize, usize>,
}

impl IndexedSet {
    pub fn from_ids(ids: impl IntoIterator<Item = usize>) -> Self {
        let mut s = IndexedSet::default();
        for id in ids {
            s.insert(id);
        }
        s
    }

    pub fn insert(&mut self, id: usize) {
        if !self.positions.contains_key(&id) {
            self.positions.insert(id, self.items.len());
            self.items.push(id);
        }
    }

    pub fn remove(&mut self, id: usize) -> bool {
        match self.positions.remove(&id) {
            None => false,
            Some(pos) => {
                let last = self.items.len() - 1;
                self.items.swap(pos, last);
                self.items.pop();
                if pos < self.items.len() {
                    self.positions.insert(self.items[pos], pos);
                }
                true
            }
        }
    }

    pub fn contains(&self, id: usize) -> bool {
        self.positions.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.items
    }

    pub fn choose(&self, rng: &mut ChaCha8Rng) -> Option<usize> {
        if self.items.is_empty() {
            None
        } else {
            Some(self.items[rng.random_range(0..self.items.len())])
        }
    }
}

/// Environment hyperparameters. Defaults carry the reference settings:
/// pool probabilities (0.3, 0.3, 0.4), threshold initialized at 0.8 and
/// refreshed every 10 steps inside clamped bounds.
#[derive(Debug, Clone)]
pub struct EnvConfig {
    pub pool_probs: [f64; 3],
    pub th_init: f64,
    pub th_min: f64,
    pub th_max: f64,
    pub factor_min: f64,
    pub factor_max: f64,
    pub confidence_max: u32,
    pub ratio_target: f64,
    pub th_update_interval: u64,
    pub history_window: usize,
    pub decision_window: usize,
    pub alpha_bias: f64,
    pub candidate_cap: usize,
    pub sigma2_floor: f64,
    pub episode_len: u64,
    /// Ablation: freeze the threshold at `th_init`.
    pub adaptive_threshold: bool,
    /// Ablation: replace the adaptive reward with the flat {+1, -1, 0}
    /// shape.
    pub simple_reward: bool,
    /// Alternative reading: the unlabeled reward branch only applies to
    /// points judged anomalous; others get the small exploration penalty.
    pub u_reward_gated: bool,
    /// Alternative reading of the confidence bonus: an extra increment
    /// when the action exceeds the pool's mean historical action.
    pub tc_surpass_bonus: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            pool_probs: [0.3, 0.3, 0.4],
            th_init: 0.8,
            th_min: 0.5,
            th_max: 0.95,
            factor_min: 0.95,
            factor_max: 1.05,
            confidence_max: 3,
            ratio_target: 0.1,
            th_update_interval: 10,
            history_window: 200,
            decision_window: 100,
            alpha_bias: 0.7,
            candidate_cap: 1024,
            sigma2_floor: 1e-6,
            episode_len: 5000,
            adaptive_threshold: true,
            simple_reward: false,
            u_reward_gated: false,
            tc_surpass_bonus: false,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.pool_probs;
        if (p[0] + p[1] + p[2] - 1.0).abs() > 1e-9 || p.iter().any(|v| *v < 0.0) {
            return Err(Error::config(format!(
                "pool probabilities must be non-negative and sum to 1, got {p:?}"
            )));
        }
        if !(self.th_min <= self.th_init && self.th_init <= self.th_max) {
            return Err(Error::config("th_init must lie within [th_min, th_max]".to_string()));
        }
        if self.confidence_max == 0 {
            return Err(Error::config("confidence_max must be ≥ 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.alpha_bias) {
            return Err(Error::config("alpha_bias must lie in [0,1]".to_string()));
        }
        if self.th_update_interval == 0 || self.episode_len == 0 {
            return Err(Error::config("intervals must be ≥ 1".to_string()));
        }
        Ok(())
    }
}

/// Similarity score of one candidate: a history kernel term mixed with a
/// uniform random draw by the bias `alpha`. With empty history the
/// similarity term is zero.
pub fn score_candidate(
    observation: &[f64],
    history: &[Vec<f64>],
    sigma2: f64,
    alpha: f64,
    random: f64,
) -> f64 {
    let similarity = if history.is_empty() {
        0.0
    } else {
        history
            .iter()
            .map(|h| (-squared_distance(observation, h) / (2.0 * sigma2)).exp())
            .sum::<f64>()
            / history.len() as f64
    };
    (1.0 - alpha) * similarity + alpha * random
}

/// Outcome of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    /// Point the action was applied to, and its pool at decision time.
    pub decided_id: usize,
    pub decided_pool: PoolId,
    /// Threshold in force when the decision was made.
    pub threshold: f64,
    /// Point sampled for the next step.
    pub next_id: usize,
}

#[derive(Debug, Clone)]
struct RunningMean {
    sum: f64,
    count: u64,
}

impl RunningMean {
    fn new() -> Self {
        RunningMean { sum: 0.0, count: 0 }
    }

    fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// The environment state: pool partition, confidence counters, adaptive
/// threshold, sampling history, and the decision window.
#[derive(Debug, Clone)]
pub struct Adie {
    pub cfg: EnvConfig,
    features: HashMap<usize, Vec<f64>>,
    pool_a: IndexedSet,
    pool_t: IndexedSet,
    pool_u: IndexedSet,
    confidence: HashMap<usize, u32>,
    /// Ids seeded from the labeled anomaly set; exempt from the
    /// confidence invariant on promoted points.
    original_labeled: IndexedSet,
    threshold: f64,
    history: VecDeque<Vec<f64>>,
    decisions: VecDeque<bool>,
    step_count: u64,
    current: usize,
    iforest_scores: Option<HashMap<usize, f64>>,
    pool_action_means: [RunningMean; 3],
    rng: ChaCha8Rng,
}

impl Adie {
    /// Builds the environment from the labeled anomaly points and the
    /// unlabeled points with their (scaled) feature vectors, then
    /// samples the first observation.
    pub fn new(
        labeled: Vec<(usize, Vec<f64>)>,
        unlabeled: Vec<(usize, Vec<f64>)>,
        iforest_scores: Option<HashMap<usize, f64>>,
        cfg: EnvConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if labeled.is_empty() {
            return Err(Error::data(
                "Tri-CRLAD requires ≥1 labeled anomaly in the anomaly pool".to_string(),
            ));
        }
        if unlabeled.is_empty() {
            return Err(Error::data("the unlabeled pool must not be empty".to_string()));
        }
        let mut features = HashMap::new();
        let mut confidence = HashMap::new();
        let a_ids: Vec<usize> = labeled.iter().map(|(id, _)| *id).collect();
        let u_ids: Vec<usize> = unlabeled.iter().map(|(id, _)| *id).collect();
        for (id, f) in labeled.into_iter().chain(unlabeled) {
            if features.insert(id, f).is_some() {
                return Err(Error::data(format!("duplicate point id {id}")));
            }
            confidence.insert(id, 0);
        }
        let mut env = Adie {
            cfg,
            features,
            pool_a: IndexedSet::from_ids(a_ids.iter().copied()),
            pool_t: IndexedSet::default(),
            pool_u: IndexedSet::from_ids(u_ids),
            confidence,
            original_labeled: IndexedSet::from_ids(a_ids),
            threshold: 0.0,
            history: VecDeque::new(),
            decisions: VecDeque::new(),
            step_count: 0,
            current: 0,
            iforest_scores,
            pool_action_means: [RunningMean::new(), RunningMean::new(), RunningMean::new()],
            rng: seed_stream(seed, "env"),
        };
        env.threshold = env.cfg.th_init;
        env.current = env.sample_point()?;
        Ok(env)
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn current_id(&self) -> usize {
        self.current
    }

    pub fn current_features(&self) -> &[f64] {
        &self.features[&self.current]
    }

    pub fn features_of(&self, id: usize) -> Option<&Vec<f64>> {
        self.features.get(&id)
    }

    pub fn pool_sizes(&self) -> (usize, usize, usize) {
        (self.pool_a.len(), self.pool_t.len(), self.pool_u.len())
    }

    pub fn pool_of(&self, id: usize) -> Option<PoolId> {
        if self.pool_a.contains(id) {
            Some(PoolId::Anomaly)
        } else if self.pool_t.contains(id) {
            Some(PoolId::Temporary)
        } else if self.pool_u.contains(id) {
            Some(PoolId::Unlabeled)
        } else {
            None
        }
    }

    /// Draws a pool by the configured probabilities; an empty draw falls
    /// back in order U → T → A to the first nonempty pool.
    pub fn select_pool(&mut self) -> Result<PoolId> {
        let z: f64 = self.rng.random();
        let drawn = if z < self.cfg.pool_probs[0] {
            PoolId::Anomaly
        } else if z < self.cfg.pool_probs[0] + self.cfg.pool_probs[1] {
            PoolId::Temporary
        } else {
            PoolId::Unlabeled
        };
        let nonempty = |p: PoolId| match p {
            PoolId::Anomaly => !self.pool_a.is_empty(),
            PoolId::Temporary => !self.pool_t.is_empty(),
            PoolId::Unlabeled => !self.pool_u.is_empty(),
        };
        if nonempty(drawn) {
            return Ok(drawn);
        }
        for fallback in [PoolId::Unlabeled, PoolId::Temporary, PoolId::Anomaly] {
            if nonempty(fallback) {
                return Ok(fallback);
            }
        }
        Err(Error::data("all pools are empty".to_string()))
    }

    /// Total variance (per-dimension variances summed) of a set of
    /// vectors; zero for fewer than two.
    fn total_variance<'a>(vectors: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> f64 {
        let n = vectors.clone().count();
        if n < 2 {
            return 0.0;
        }
        let nf = n as f64;
        let mut mean = vec![0.0; dim];
        for v in vectors.clone() {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= nf;
        }
        let mut var_sum = 0.0;
        for v in vectors {
            for (m, x) in mean.iter().zip(v) {
                let d = x - m;
                var_sum += d * d;
            }
        }
        var_sum / nf
    }

    /// Kernel scale for candidate scoring. The kernel divides a full
    /// squared distance — which grows with the dimension count — so the
    /// scale is the *total* variance of the history; while the history
    /// is short or degenerate the candidate spread supplies the scale
    /// instead, otherwise the kernel collapses to an exact-match
    /// indicator and the argmax locks onto the first sampled point.
    fn kernel_scale(&self, candidates: &[usize]) -> f64 {
        let dim = self.history.front().map_or_else(
            || candidates.first().map_or(1, |id| self.features[id].len()),
            |h| h.len(),
        );
        let history_var =
            Self::total_variance(self.history.iter().map(|v| v.as_slice()), dim);
        let candidate_var = Self::total_variance(
            candidates.iter().map(|id| self.features[id].as_slice()),
            dim,
        );
        history_var.max(candidate_var).max(self.cfg.sigma2_floor)
    }

    /// Samples the next observation: uniform from the anomaly or
    /// temporary pool, similarity-guided argmax over a capped candidate
    /// subset of the unlabeled pool (ties broken by lowest id). The
    /// chosen unlabeled point's features are appended to the history
    /// buffer.
    pub fn sample_point(&mut self) -> Result<usize> {
        let pool = self.select_pool()?;
        match pool {
            PoolId::Anomaly => Ok(self.pool_a.choose(&mut self.rng).expect("nonempty")),
            PoolId::Temporary => Ok(self.pool_t.choose(&mut self.rng).expect("nonempty")),
            PoolId::Unlabeled => {
                let u_len = self.pool_u.len();
                let cap = self.cfg.candidate_cap.min(u_len);
                let candidates: Vec<usize> = if cap == u_len {
                    self.pool_u.ids().to_vec()
                } else {
                    rand::seq::index::sample(&mut self.rng, u_len, cap)
                        .iter()
                        .map(|i| self.pool_u.ids()[i])
                        .collect()
                };
                // randomness is drawn sequentially so the scoring
                // fan-out cannot perturb the rng stream
                let randoms: Vec<f64> =
                    (0..candidates.len()).map(|_| self.rng.random()).collect();
                let sigma2 = self.kernel_scale(&candidates);
                let alpha = self.cfg.alpha_bias;
                let history: Vec<Vec<f64>> = self.history.iter().cloned().collect();
                let features = &self.features;
                let scores = parallel::map_range(candidates.len(), |i| {
                    score_candidate(&features[&candidates[i]], &history, sigma2, alpha, randoms[i])
                });
                let mut best = 0usize;
                for i in 1..candidates.len() {
                    let better = scores[i] > scores[best]
                        || (scores[i] == scores[best] && candidates[i] < candidates[best]);
                    if better {
                        best = i;
                    }
                }
                if std::env::var("TRICRLAD_DEBUG_SAMPLER").is_ok() {
                    let mean_sim: f64 = scores
                        .iter()
                        .zip(&randoms)
                        .map(|(s, r)| (s - alpha * r) / (1.0 - alpha).max(1e-9))
                        .sum::<f64>()
                        / scores.len() as f64;
                    eprintln!(
                        "dbg sample: |cand|={} sigma2={:.4} hist={} best_score={:.4} best_r={:.4} mean_sim={:.4}",
                        candidates.len(), sigma2, self.history.len(), scores[best], randoms[best], mean_sim
                    );
                }
                let chosen = candidates[best];
                if self.history.len() == self.cfg.history_window {
                    self.history.pop_front();
                }
                self.history.push_back(self.features[&chosen].clone());
                Ok(chosen)
            }
        }
    }

    /// Pool-dependent reward for applying `action` to `id`, using the
    /// supplied unsupervised score for the unlabeled branch.
    pub fn reward(&self, id: usize, action: f64, iforest_score: Option<f64>) -> Result<f64> {
        let pool = self
            .pool_of(id)
            .ok_or_else(|| Error::data(format!("reward: unknown point id {id}")))?;
        if self.cfg.simple_reward {
            return Ok(match pool {
                PoolId::Anomaly => {
                    if action >= self.threshold {
                        1.0
                    } else {
                        -1.0
                    }
                }
                PoolId::Temporary if action < self.threshold => -1.0,
                _ => 0.0,
            });
        }
        Ok(match pool {
            PoolId::Anomaly => 2.0 * (action - self.threshold).max(0.0) + 1.0,
            PoolId::Temporary => {
                if action >= self.threshold {
                    f64::from(self.confidence[&id]) / f64::from(self.cfg.confidence_max)
                } else {
                    -1.0
                }
            }
            PoolId::Unlabeled => match iforest_score {
                Some(score) => {
                    if self.cfg.u_reward_gated && action < self.threshold {
                        -0.01
                    } else {
                        (action - self.threshold) * score
                    }
                }
                // unreachable while the pools partition the data and a
                // forest is wired in; kept as the defensive fallback
                None => -0.01,
            },
        })
    }

    /// Confidence updates and pool migrations for one decision.
    pub fn apply_transition(&mut self, id: usize, action: f64) -> Result<()> {
        let pool = self
            .pool_of(id)
            .ok_or_else(|| Error::data(format!("transition: unknown point id {id}")))?;
        if action > self.threshold {
            let mut increment = 1u32;
            if self.cfg.tc_surpass_bonus
                && action > self.pool_action_means[pool_index(pool)].mean()
            {
                increment += 1;
            }
            let c = self.confidence.entry(id).or_insert(0);
            *c += increment;
            let c = *c;
            if pool == PoolId::Unlabeled {
                self.pool_u.remove(id);
                self.pool_t.insert(id);
            }
            if c >= self.cfg.confidence_max && self.pool_t.contains(id) {
                self.pool_t.remove(id);
                self.pool_a.insert(id);
            }
        } else if pool == PoolId::Temporary {
            let c = self.confidence.entry(id).or_insert(0);
            *c = c.saturating_sub(1);
            if *c == 0 {
                self.pool_t.remove(id);
                self.pool_u.insert(id);
            }
        }
        self.pool_action_means[pool_index(pool)].push(action);
        Ok(())
    }

    /// Smooths the threshold toward the target decision ratio; called on
    /// the configured interval. An empty decision window leaves it
    /// untouched.
    pub fn update_threshold(&mut self) {
        if !self.cfg.adaptive_threshold || self.decisions.is_empty() {
            return;
        }
        let positives = self.decisions.iter().filter(|d| **d).count() as f64;
        let ratio_current = positives / self.decisions.len() as f64;
        let factor = (1.0 + ratio_current - self.cfg.ratio_target)
            .clamp(self.cfg.factor_min, self.cfg.factor_max);
        self.threshold = (factor * self.threshold).clamp(self.cfg.th_min, self.cfg.th_max);
    }

    /// One full environment step: reward, pool transitions, decision
    /// recording, periodic threshold refresh, next-point sampling.
    pub fn step(&mut self, action: f64) -> Result<StepOutcome> {
        if !action.is_finite() || !(0.0..=1.0).contains(&action) {
            return Err(Error::numerical(format!("action {action} outside [0,1]")));
        }
        let id = self.current;
        let pool = self
            .pool_of(id)
            .ok_or_else(|| Error::data(format!("step: current id {id} in no pool")))?;
        let threshold = self.threshold;
        let iforest_score = self.iforest_scores.as_ref().map(|m| m[&id]);
        let reward = self.reward(id, action, iforest_score)?;
        self.apply_transition(id, action)?;

        if self.decisions.len() == self.cfg.decision_window {
            self.decisions.pop_front();
        }
        self.decisions.push_back(action >= threshold);

        if (self.step_count + 1).is_multiple_of(self.cfg.th_update_interval) {
            self.update_threshold();
        }

        let next_id = self.sample_point()?;
        self.current = next_id;
        self.step_count += 1;
        let done = self.step_count.is_multiple_of(self.cfg.episode_len);

        Ok(StepOutcome { reward, done, decided_id: id, decided_pool: pool, threshold, next_id })
    }

    /// Checks the full state-machine invariant set; used by the fuzz
    /// suites.
    pub fn check_invariants(&self) -> Result<()> {
        let total = self.pool_a.len() + self.pool_t.len() + self.pool_u.len();
        if total != self.features.len() {
            return Err(Error::data(format!(
                "pools cover {total} ids, expected {}",
                self.features.len()
            )));
        }
        for id in self.pool_a.ids() {
            if self.pool_t.contains(*id) || self.pool_u.contains(*id) {
                return Err(Error::data(format!("id {id} in multiple pools")));
            }
            if !self.original_labeled.contains(*id)
                && self.confidence[id] < self.cfg.confidence_max
            {
                return Err(Error::data(format!(
                    "promoted id {id} has confidence {} < {}",
                    self.confidence[id], self.cfg.confidence_max
                )));
            }
        }
        for id in self.pool_t.ids() {
            if self.pool_u.contains(*id) {
                return Err(Error::data(format!("id {id} in multiple pools")));
            }
            let c = self.confidence[id];
            if c == 0 || c >= self.cfg.confidence_max {
                return Err(Error::data(format!(
                    "temporary id {id} has confidence {c} outside [1, {})",
                    self.cfg.confidence_max
                )));
            }
        }
        for id in self.pool_u.ids() {
            if self.confidence[id] != 0 {
                return Err(Error::data(format!(
                    "unlabeled id {id} has confidence {}",
                    self.confidence[id]
                )));
            }
        }
        if !(self.cfg.th_min..=self.cfg.th_max).contains(&self.threshold) {
            return Err(Error::data(format!("threshold {} escaped bounds", self.threshold)));
        }
        Ok(())
    }
}

fn pool_index(pool: PoolId) -> usize {
    match pool {
        PoolId::Anomaly => 0,
        PoolId::Temporary => 1,
        PoolId::Unlabeled => 2,
    }
}
