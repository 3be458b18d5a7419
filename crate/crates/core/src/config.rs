//! Experiment configuration: a flat key=value text format covering every
//! tunable default, with single-key overrides and a stable content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adie::EnvConfig;
use crate::dataset::{ContaminationBase, ContaminationShortfall};
use crate::error::{Error, Result};
use crate::sac::SacConfig;

/// Component-disabling switches for the ablation study.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Freeze the anomaly threshold at its initial value.
    pub fixed_threshold: bool,
    /// Replace the adaptive reward with the flat {+1, -1, 0} shape.
    pub simple_reward: bool,
    /// Replace the causal extractor with a plain dense encoder.
    pub no_causal: bool,
}

impl AblationFlags {
    pub fn any(&self) -> bool {
        self.fixed_threshold || self.simple_reward || self.no_causal
    }

    /// Short tag embedded in output filenames.
    pub fn suffix(&self) -> String {
        if !self.any() {
            return "full".to_string();
        }
        let mut parts = Vec::new();
        if self.fixed_threshold {
            parts.push("wo_th");
        }
        if self.simple_reward {
            parts.push("wo_rw");
        }
        if self.no_causal {
            parts.push("wo_causal");
        }
        parts.join("+")
    }

    pub fn enable(&mut self, flag: &str) -> Result<()> {
        match flag {
            "fixed_threshold" => self.fixed_threshold = true,
            "simple_reward" => self.simple_reward = true,
            "no_causal" => self.no_causal = true,
            other => {
                return Err(Error::config(format!(
                    "unknown ablation flag '{other}' (expected fixed_threshold, simple_reward, or no_causal)"
                )))
            }
        }
        Ok(())
    }
}

/// A fully reproducible experiment description.
#[derive(Debug, Clone)]
pub struct RunConfig {
    // dataset and regime
    pub data_path: String,
    pub label_col: String,
    pub delimiter: char,
    pub test_fraction: f64,
    pub anomalies_ratio: f64,
    pub contamination_ratio: f64,
    pub contamination_base: ContaminationBase,
    pub contamination_shortfall: ContaminationShortfall,

    // environment
    pub env: EnvConfig,
    /// Target decision ratio for the threshold update; `None` follows
    /// the contamination ratio.
    pub ratio_target: Option<f64>,

    // isolation forest
    pub iforest_trees: usize,
    pub iforest_subsample: usize,
    /// Standardize unsupervised scores against the unlabeled pool before
    /// they enter the reward: centered at the (1 − ratio_target)
    /// quantile, robust-scaled, clamped to [-1, 1]. Off restores the raw
    /// (0,1) score.
    pub iforest_recentered: bool,

    // causal feature extractor
    pub token_dim: usize,
    pub feature_dim: usize,
    pub cfe_tau: f64,
    pub cfe_lr: f64,
    pub mmd_bandwidth_floor: f64,
    /// Hidden width of the plain encoder used by the no_causal ablation.
    pub plain_hidden_dim: usize,

    // agent
    pub sac: SacConfig,

    // trainer
    pub episodes: u64,
    pub steps_per_episode: u64,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub write_step_log: bool,
    pub reset_pools_per_episode: bool,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_path: String::new(),
            label_col: "label".to_string(),
            delimiter: ',',
            test_fraction: 0.2,
            anomalies_ratio: 0.1,
            contamination_ratio: 0.1,
            contamination_base: ContaminationBase::Unlabeled,
            contamination_shortfall: ContaminationShortfall::CapAtAvailable,
            env: EnvConfig::default(),
            ratio_target: None,
            iforest_trees: 100,
            iforest_subsample: 256,
            iforest_recentered: true,
            token_dim: 16,
            feature_dim: 32,
            cfe_tau: 0.7,
            cfe_lr: 5e-4,
            mmd_bandwidth_floor: 1e-3,
            plain_hidden_dim: 64,
            sac: SacConfig::default(),
            episodes: 10,
            steps_per_episode: 5000,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: "runs".to_string(),
            write_step_log: true,
            reset_pools_per_episode: false,
            ablation: AblationFlags::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("key '{key}': cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("key '{key}': expected a boolean, got '{value}'"))),
    }
}

impl RunConfig {
    /// Parses the flat key=value format: one assignment per line, `#`
    /// comments, unknown keys rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_path" => self.data_path = value.to_string(),
            "label_col" => self.label_col = value.to_string(),
            "delimiter" => {
                let mut chars = value.chars();
                self.delimiter = match (chars.next(), chars.next()) {
                    (Some(c), None) => c,
                    _ => return Err(Error::config("delimiter must be a single character".to_string())),
                };
            }
            "test_fraction" => self.test_fraction = parse_num(key, value)?,
            "anomalies_ratio" => self.anomalies_ratio = parse_num(key, value)?,
            "contamination_ratio" => self.contamination_ratio = parse_num(key, value)?,
            "contamination_base" => {
                self.contamination_base = match value {
                    "du" | "unlabeled" => ContaminationBase::Unlabeled,
                    "train" => ContaminationBase::TrainSet,
                    _ => {
                        return Err(Error::config(format!(
                            "contamination_base must be 'du' or 'train', got '{value}'"
                        )))
                    }
                };
            }
            "contamination_shortfall" => {
                self.contamination_shortfall = match value {
                    "cap" => ContaminationShortfall::CapAtAvailable,
                    "error" => ContaminationShortfall::Error,
                    _ => {
                        return Err(Error::config(format!(
                            "contamination_shortfall must be 'cap' or 'error', got '{value}'"
                        )))
                    }
                };
            }
            "p_a" => self.env.pool_probs[0] = parse_num(key, value)?,
            "p_t" => self.env.pool_probs[1] = parse_num(key, value)?,
            "p_u" => self.env.pool_probs[2] = parse_num(key, value)?,
            "th_init" => self.env.th_init = parse_num(key, value)?,
            "th_min" => self.env.th_min = parse_num(key, value)?,
            "th_max" => self.env.th_max = parse_num(key, value)?,
            "factor_min" => self.env.factor_min = parse_num(key, value)?,
            "factor_max" => self.env.factor_max = parse_num(key, value)?,
            "tc_max" => self.env.confidence_max = parse_num(key, value)?,
            "ratio_target" => {
                self.ratio_target = if value == "auto" { None } else { Some(parse_num(key, value)?) };
            }
            "th_update_interval" => self.env.th_update_interval = parse_num(key, value)?,
            "history_window" => self.env.history_window = parse_num(key, value)?,
            "decision_window" => self.env.decision_window = parse_num(key, value)?,
            "alpha_bias" => self.env.alpha_bias = parse_num(key, value)?,
            "candidate_cap" => self.env.candidate_cap = parse_num(key, value)?,
            "sigma2_floor" => self.env.sigma2_floor = parse_num(key, value)?,
            "u_reward_gated" => self.env.u_reward_gated = parse_bool(key, value)?,
            "iforest_recentered" => self.iforest_recentered = parse_bool(key, value)?,
            "tc_surpass_bonus" => self.env.tc_surpass_bonus = parse_bool(key, value)?,
            "iforest_trees" => self.iforest_trees = parse_num(key, value)?,
            "iforest_subsample" => self.iforest_subsample = parse_num(key, value)?,
            "token_dim" => self.token_dim = parse_num(key, value)?,
            "feature_dim" => self.feature_dim = parse_num(key, value)?,
            "cfe_tau" => self.cfe_tau = parse_num(key, value)?,
            "cfe_lr" => self.cfe_lr = parse_num(key, value)?,
            "mmd_bandwidth_floor" => self.mmd_bandwidth_floor = parse_num(key, value)?,
            "plain_hidden_dim" => self.plain_hidden_dim = parse_num(key, value)?,
            "hidden_dim" => self.sac.hidden_dim = parse_num(key, value)?,
            "gamma" => self.sac.gamma = parse_num(key, value)?,
            "entropy_coef" => self.sac.entropy_coef = parse_num(key, value)?,
            "actor_lr" => self.sac.actor_lr = parse_num(key, value)?,
            "critic_lr" => self.sac.critic_lr = parse_num(key, value)?,
            "value_lr" => self.sac.value_lr = parse_num(key, value)?,
            "tau_soft" => self.sac.tau_soft = parse_num(key, value)?,
            "target_update_interval" => self.sac.target_update_interval = parse_num(key, value)?,
            "batch_size" => self.sac.batch_size = parse_num(key, value)?,
            "replay_capacity" => self.sac.replay_capacity = parse_num(key, value)?,
            "warmup_steps" => self.sac.warmup_steps = parse_num(key, value)?,
            "warmup_size" => self.sac.warmup_size = parse_num(key, value)?,
            "grad_clip" => self.sac.grad_clip = parse_num(key, value)?,
            "episodes" => self.episodes = parse_num(key, value)?,
            "steps_per_episode" => self.steps_per_episode = parse_num(key, value)?,
            "seeds" => {
                let seeds: Result<Vec<u64>> = value
                    .split(',')
                    .map(|s| parse_num::<u64>("seeds", s.trim()))
                    .collect();
                self.seeds = seeds?;
                if self.seeds.is_empty() {
                    return Err(Error::config("seeds must not be empty".to_string()));
                }
            }
            "output_dir" => self.output_dir = value.to_string(),
            "write_step_log" => self.write_step_log = parse_bool(key, value)?,
            "reset_pools_per_episode" => self.reset_pools_per_episode = parse_bool(key, value)?,
            "fixed_threshold" => self.ablation.fixed_threshold = parse_bool(key, value)?,
            "simple_reward" => self.ablation.simple_reward = parse_bool(key, value)?,
            "no_causal" => self.ablation.no_causal = parse_bool(key, value)?,
            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Every key in a fixed order with its current value; the same text
    /// round-trips through [`RunConfig::parse`] and feeds the content
    /// hash.
    pub fn canonical_string(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        kv("data_path", self.data_path.clone());
        kv("label_col", self.label_col.clone());
        kv("delimiter", self.delimiter.to_string());
        kv("test_fraction", self.test_fraction.to_string());
        kv("anomalies_ratio", self.anomalies_ratio.to_string());
        kv("contamination_ratio", self.contamination_ratio.to_string());
        kv(
            "contamination_base",
            match self.contamination_base {
                ContaminationBase::Unlabeled => "du".to_string(),
                ContaminationBase::TrainSet => "train".to_string(),
            },
        );
        kv(
            "contamination_shortfall",
            match self.contamination_shortfall {
                ContaminationShortfall::CapAtAvailable => "cap".to_string(),
                ContaminationShortfall::Error => "error".to_string(),
            },
        );
        kv("p_a", self.env.pool_probs[0].to_string());
        kv("p_t", self.env.pool_probs[1].to_string());
        kv("p_u", self.env.pool_probs[2].to_string());
        kv("th_init", self.env.th_init.to_string());
        kv("th_min", self.env.th_min.to_string());
        kv("th_max", self.env.th_max.to_string());
        kv("factor_min", self.env.factor_min.to_string());
        kv("factor_max", self.env.factor_max.to_string());
        kv("tc_max", self.env.confidence_max.to_string());
        kv(
            "ratio_target",
            self.ratio_target.map_or("auto".to_string(), |v| v.to_string()),
        );
        kv("th_update_interval", self.env.th_update_interval.to_string());
        kv("history_window", self.env.history_window.to_string());
        kv("decision_window", self.env.decision_window.to_string());
        kv("alpha_bias", self.env.alpha_bias.to_string());
        kv("candidate_cap", self.env.candidate_cap.to_string());
        kv("sigma2_floor", self.env.sigma2_floor.to_string());
        kv("u_reward_gated", self.env.u_reward_gated.to_string());
        kv("iforest_recentered", self.iforest_recentered.to_string());
        kv("tc_surpass_bonus", self.env.tc_surpass_bonus.to_string());
        kv("iforest_trees", self.iforest_trees.to_string());
        kv("iforest_subsample", self.iforest_subsample.to_string());
        kv("token_dim", self.token_dim.to_string());
        kv("feature_dim", self.feature_dim.to_string());
        kv("cfe_tau", self.cfe_tau.to_string());
        kv("cfe_lr", self.cfe_lr.to_string());
        kv("mmd_bandwidth_floor", self.mmd_bandwidth_floor.to_string());
        kv("plain_hidden_dim", self.plain_hidden_dim.to_string());
        kv("hidden_dim", self.sac.hidden_dim.to_string());
        kv("gamma", self.sac.gamma.to_string());
        kv("entropy_coef", self.sac.entropy_coef.to_string());
        kv("actor_lr", self.sac.actor_lr.to_string());
        kv("critic_lr", self.sac.critic_lr.to_string());
        kv("value_lr", self.sac.value_lr.to_string());
        kv("tau_soft", self.sac.tau_soft.to_string());
        kv("target_update_interval", self.sac.target_update_interval.to_string());
        kv("batch_size", self.sac.batch_size.to_string());
        kv("replay_capacity", self.sac.replay_capacity.to_string());
        kv("warmup_steps", self.sac.warmup_steps.to_string());
        kv("warmup_size", self.sac.warmup_size.to_string());
        kv("grad_clip", self.sac.grad_clip.to_string());
        kv("episodes", self.episodes.to_string());
        kv("steps_per_episode", self.steps_per_episode.to_string());
        kv(
            "seeds",
            self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("output_dir", self.output_dir.clone());
        kv("write_step_log", self.write_step_log.to_string());
        kv("reset_pools_per_episode", self.reset_pools_per_episode.to_string());
        kv("fixed_threshold", self.ablation.fixed_threshold.to_string());
        kv("simple_reward", self.ablation.simple_reward.to_string());
        kv("no_causal", self.ablation.no_causal.to_string());
        out
    }

    /// FNV-1a hash of the canonical text, hex-encoded.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.canonical_string().as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// The decision-ratio target the environment should chase.
    pub fn effective_ratio_target(&self) -> f64 {
        self.ratio_target.unwrap_or(self.contamination_ratio)
    }

    /// Environment configuration with the trainer-level settings and
    /// ablation switches folded in.
    pub fn effective_env_config(&self) -> EnvConfig {
        let mut env = self.env.clone();
        env.ratio_target = self.effective_ratio_target();
        env.episode_len = self.steps_per_episode;
        if self.ablation.fixed_threshold {
            env.adaptive_threshold = false;
        }
        if self.ablation.simple_reward {
            env.simple_reward = true;
        }
        env
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction must lie in (0,1)".to_string()));
        }
        if self.episodes == 0 || self.steps_per_episode == 0 {
            return Err(Error::config("episodes and steps_per_episode must be ≥ 1".to_string()));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty".to_string()));
        }
        if self.sac.batch_size == 0 || self.sac.batch_size > self.sac.warmup_size {
            return Err(Error::config(
                "batch_size must be ≥ 1 and ≤ warmup_size".to_string(),
            ));
        }
        self.effective_env_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_the_canonical_text() {
        let cfg = RunConfig::default();
        let text = cfg.canonical_string();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed.canonical_string(), text);
        assert_eq!(parsed.hash(), cfg.hash());
    }

    #[test]
    fn overrides_change_the_hash() {
        let mut cfg = RunConfig::default();
        let h0 = cfg.hash();
        cfg.set("gamma", "0.95").unwrap();
        assert_ne!(cfg.hash(), h0);
        assert_eq!(cfg.sac.gamma, 0.95);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("not_a_key", "1").is_err());
        assert!(cfg.set("gamma", "fast").is_err());
        assert!(cfg.set("write_step_log", "maybe").is_err());
        assert!(RunConfig::parse("gamma 0.9").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# comment\n\nepisodes = 3 # trailing\nseeds=7,8\n").unwrap();
        assert_eq!(cfg.episodes, 3);
        assert_eq!(cfg.seeds, vec![7, 8]);
    }

    #[test]
    fn ablation_flags_validate_and_tag() {
        let mut flags = AblationFlags::default();
        assert_eq!(flags.suffix(), "full");
        flags.enable("no_causal").unwrap();
        assert_eq!(flags.suffix(), "wo_causal");
        flags.enable("fixed_threshold").unwrap();
        assert_eq!(flags.suffix(), "wo_th+wo_causal");
        assert!(flags.enable("bogus").is_err());
    }

    #[test]
    fn effective_env_config_applies_trainer_settings() {
        let mut cfg = RunConfig {
            contamination_ratio: 0.07,
            steps_per_episode: 123,
            ..RunConfig::default()
        };
        cfg.ablation.fixed_threshold = true;
        let env = cfg.effective_env_config();
        assert_eq!(env.ratio_target, 0.07);
        assert_eq!(env.episode_len, 123);
        assert!(!env.adaptive_threshold);

        cfg.ratio_target = Some(0.2);
        assert_eq!(cfg.effective_env_config().ratio_target, 0.2);
    }
}
