use std::fmt;
use std::str::FromStr;

use super::TrainError;
use crate::kv::FlatConfig;
use crate::mdp::{MdpKind, MdpSpec};
use crate::retrieval::{Metric, Strategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Iql,
    Td3Bc,
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "icql-iql" => Ok(Variant::Iql),
            "icql-td3bc" => Ok(Variant::Td3Bc),
            _ => Err(format!("unknown variant `{s}` (expected icql-iql or icql-td3bc)")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Iql => "icql-iql",
            Variant::Td3Bc => "icql-td3bc",
        })
    }
}

/// Every training knob. Serialized as flat `key = value` text; the
/// environment lives under the `env.` prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub env: MdpSpec,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    /// Metrics (and evaluation) cadence in steps.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub gamma: f64,
    pub beta_rtg: f64,
    pub tau: f64,
    pub beta_awr: f64,
    pub alpha_bc: f64,
    pub context: usize,
    pub layers: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub feature_hidden_layers: usize,
    pub layer_norm: bool,
    pub dropout: f64,
    pub policy_hidden: usize,
    pub policy_dropout: f64,
    pub critic_lr: f64,
    pub policy_lr: f64,
    pub clip_norm: f64,
    pub value_samples: usize,
    pub awr_clip: f64,
    pub polyak: f64,
    pub policy_delay: usize,
    pub target_noise: f64,
    pub noise_clip: f64,
    pub normalize_q: bool,
    pub retrieval: Strategy,
    pub metric: Metric,
    /// Record elapsed wall time in the metrics (breaks byte-identical logs).
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Iql,
            env: MdpSpec::four_rooms(),
            seed: 0,
            steps: 50_000,
            batch: 64,
            eval_interval: 1000,
            eval_episodes: 10,
            gamma: 0.99,
            beta_rtg: 1.0,
            tau: 0.7,
            beta_awr: 1.0,
            alpha_bc: 2.5,
            context: 20,
            layers: 4,
            feature_dim: 16,
            hidden: 64,
            feature_hidden_layers: 2,
            layer_norm: true,
            dropout: 0.1,
            policy_hidden: 64,
            policy_dropout: 0.1,
            critic_lr: 3e-4,
            policy_lr: 3e-4,
            clip_norm: 10.0,
            value_samples: 4,
            awr_clip: 100.0,
            polyak: 0.005,
            policy_delay: 2,
            target_noise: 0.0,
            noise_clip: 0.5,
            normalize_q: false,
            retrieval: Strategy::StateSimilar,
            metric: Metric::L2,
            wall_clock: false,
        }
    }
}

/// 0.5 on sparse-reward envs (a chain with no step reward), 1 otherwise.
pub fn default_beta_rtg(env: &MdpSpec) -> f64 {
    match &env.kind {
        MdpKind::Chain(p) if p.step_reward == 0.0 => 0.5,
        _ => 1.0,
    }
}

impl TrainConfig {
    pub fn to_config(&self) -> FlatConfig {
        let mut c = FlatConfig::new();
        c.set("variant", self.variant);
        c.set("seed", self.seed);
        c.set("steps", self.steps);
        c.set("batch", self.batch);
        c.set("eval_interval", self.eval_interval);
        c.set("eval_episodes", self.eval_episodes);
        c.set("gamma", self.gamma);
        c.set("beta_rtg", self.beta_rtg);
        c.set("tau", self.tau);
        c.set("beta_awr", self.beta_awr);
        c.set("alpha_bc", self.alpha_bc);
        c.set("context", self.context);
        c.set("layers", self.layers);
        c.set("feature_dim", self.feature_dim);
        c.set("hidden", self.hidden);
        c.set("feature_hidden_layers", self.feature_hidden_layers);
        c.set("layer_norm", self.layer_norm);
        c.set("dropout", self.dropout);
        c.set("policy_hidden", self.policy_hidden);
        c.set("policy_dropout", self.policy_dropout);
        c.set("critic_lr", self.critic_lr);
        c.set("policy_lr", self.policy_lr);
        c.set("clip_norm", self.clip_norm);
        c.set("value_samples", self.value_samples);
        c.set("awr_clip", self.awr_clip);
        c.set("polyak", self.polyak);
        c.set("policy_delay", self.policy_delay);
        c.set("target_noise", self.target_noise);
        c.set("noise_clip", self.noise_clip);
        c.set("normalize_q", self.normalize_q);
        c.set("retrieval", self.retrieval);
        c.set("metric", self.metric);
        c.set("wall_clock", self.wall_clock);
        for (k, v) in self.env.to_config().iter() {
            c.set(&format!("env.{k}"), v);
        }
        c
    }

    pub fn to_text(&self) -> String {
        self.to_config().to_text()
    }

    /// First 16 hex digits of the SHA-256 of [`to_text`](Self::to_text).
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_text().as_bytes()))[..16].to_string()
    }

    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        Self::from_config(&FlatConfig::parse(text)?)
    }

    /// Absent keys take defaults; unknown keys and invalid values are all
    /// reported together.
    pub fn from_config(cfg: &FlatConfig) -> Result<Self, TrainError> {
        let d = Self::default();
        let mut r = cfg.reader();
        let mut env_cfg = FlatConfig::new();
        for (k, v) in r.with_prefix("env.") {
            env_cfg.set(&k["env.".len()..], v);
        }
        let mut problems = Vec::new();
        let env = if env_cfg.iter().next().is_none() {
            d.env.clone()
        } else {
            match MdpSpec::from_config(&env_cfg) {
                Ok(e) => e,
                Err(e) => {
                    problems.push(format!("env: {e}"));
                    d.env.clone()
                }
            }
        };
        let retrieval = match r.raw("retrieval").map(str::to_string) {
            None => d.retrieval,
            Some(v) => v.parse().unwrap_or_else(|e| {
                problems.push(format!("`retrieval` = `{v}`: {e}"));
                d.retrieval
            }),
        };
        let metric = match r.raw("metric").map(str::to_string) {
            None => d.metric,
            Some(v) => v.parse().unwrap_or_else(|e| {
                problems.push(format!("`metric` = `{v}`: {e}"));
                d.metric
            }),
        };
        let beta_rtg = r.get_or("beta_rtg", default_beta_rtg(&env));
        let c = Self {
            variant: r.get_or("variant", d.variant),
            env,
            seed: r.get_or("seed", d.seed),
            steps: r.get_or("steps", d.steps),
            batch: r.get_or("batch", d.batch),
            eval_interval: r.get_or("eval_interval", d.eval_interval),
            eval_episodes: r.get_or("eval_episodes", d.eval_episodes),
            gamma: r.get_or("gamma", d.gamma),
            beta_rtg,
            tau: r.get_or("tau", d.tau),
            beta_awr: r.get_or("beta_awr", d.beta_awr),
            alpha_bc: r.get_or("alpha_bc", d.alpha_bc),
            context: r.get_or("context", d.context),
            layers: r.get_or("layers", d.layers),
            feature_dim: r.get_or("feature_dim", d.feature_dim),
            hidden: r.get_or("hidden", d.hidden),
            feature_hidden_layers: r.get_or("feature_hidden_layers", d.feature_hidden_layers),
            layer_norm: r.get_or("layer_norm", d.layer_norm),
            dropout: r.get_or("dropout", d.dropout),
            policy_hidden: r.get_or("policy_hidden", d.policy_hidden),
            policy_dropout: r.get_or("policy_dropout", d.policy_dropout),
            critic_lr: r.get_or("critic_lr", d.critic_lr),
            policy_lr: r.get_or("policy_lr", d.policy_lr),
            clip_norm: r.get_or("clip_norm", d.clip_norm),
            value_samples: r.get_or("value_samples", d.value_samples),
            awr_clip: r.get_or("awr_clip", d.awr_clip),
            polyak: r.get_or("polyak", d.polyak),
            policy_delay: r.get_or("policy_delay", d.policy_delay),
            target_noise: r.get_or("target_noise", d.target_noise),
            noise_clip: r.get_or("noise_clip", d.noise_clip),
            normalize_q: r.get_or("normalize_q", d.normalize_q),
            retrieval,
            metric,
            wall_clock: r.get_or("wall_clock", d.wall_clock),
        };
        for p in problems.into_iter().chain(c.problems()) {
            r.error(p);
        }
        r.finish()?;
        Ok(c)
    }

    /// Every violated constraint, in key order.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                p.push(msg);
            }
        };
        need(self.batch >= 1, "batch must be at least 1".into());
        need(self.eval_interval >= 1, "eval_interval must be at least 1".into());
        need((0.0..1.0).contains(&self.gamma), format!("gamma {} outside [0, 1)", self.gamma));
        need((0.0..=1.0).contains(&self.beta_rtg), format!("beta_rtg {} outside [0, 1]", self.beta_rtg));
        need(self.tau > 0.0 && self.tau < 1.0, format!("tau {} outside (0, 1)", self.tau));
        need(self.beta_awr > 0.0, format!("beta_awr {} must be positive", self.beta_awr));
        need(self.alpha_bc >= 0.0, format!("alpha_bc {} must be non-negative", self.alpha_bc));
        need(self.context >= 1, "context must be at least 1".into());
        need(self.layers >= 1, "layers must be at least 1".into());
        need(self.feature_dim >= 1, "feature_dim must be at least 1".into());
        need(self.hidden >= 1 && self.policy_hidden >= 1, "hidden widths must be at least 1".into());
        need((0.0..1.0).contains(&self.dropout), format!("dropout {} outside [0, 1)", self.dropout));
        need(
            (0.0..1.0).contains(&self.policy_dropout),
            format!("policy_dropout {} outside [0, 1)", self.policy_dropout),
        );
        need(self.critic_lr > 0.0 && self.policy_lr > 0.0, "learning rates must be positive".into());
        need(self.clip_norm > 0.0, format!("clip_norm {} must be positive", self.clip_norm));
        need(self.value_samples >= 1, "value_samples must be at least 1".into());
        need(self.awr_clip > 0.0, format!("awr_clip {} must be positive", self.awr_clip));
        need((0.0..=1.0).contains(&self.polyak), format!("polyak {} outside [0, 1]", self.polyak));
        need(self.policy_delay >= 1, "policy_delay must be at least 1".into());
        need(self.target_noise >= 0.0 && self.noise_clip >= 0.0, "target noise settings must be non-negative".into());
        if let Strategy::HighReward { pool } = self.retrieval {
            need(pool >= self.context, format!("high-reward pool {pool} is smaller than context {}", self.context));
        }
        if self.variant == Variant::Td3Bc {
            need(
                !self.env.is_tabular(),
                "icql-td3bc needs a continuous action space; use icql-iql for tabular envs".into(),
            );
        }
        p
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(p))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.retrieval = Strategy::HighReward { pool: 60 };
        c.env = MdpSpec::point_mass();
        c.variant = Variant::Td3Bc;
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_all_reported() {
        let err = TrainConfig::from_text("stepz = 5\ntau = 1.5\nbatch = x\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stepz"), "{msg}");
        assert!(msg.contains("tau"), "{msg}");
        assert!(msg.contains("batch"), "{msg}");
    }

    #[test]
    fn beta_rtg_default_follows_reward_density() {
        let chain = TrainConfig::from_text("env.family = chain\n").unwrap();
        assert_eq!(chain.beta_rtg, 0.5);
        assert_eq!(TrainConfig::from_text("").unwrap().beta_rtg, 1.0);
        let set = TrainConfig::from_text("env.family = chain\nbeta_rtg = 0.9\n").unwrap();
        assert_eq!(set.beta_rtg, 0.9);
    }

    #[test]
    fn td3bc_on_tabular_is_rejected() {
        let err = TrainConfig::from_text("variant = icql-td3bc\n").unwrap_err();
        assert!(err.to_string().contains("continuous"));
    }
}
