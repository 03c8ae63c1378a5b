//! Run configuration.
//!
//! Plain text, one `key = value` per line, `#` starts a comment:
//!
//! ```text
//! mixer = qplex
//! env.grid_height = 8
//! train.lambda = 0.001
//! model.awareness = false
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::awareness::DEFAULT_AWARENESS_DIM;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::mixer::MixerKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub target_update_interval: usize,
    pub epsilon_start: f64,
    pub epsilon_finish: f64,
    pub epsilon_anneal_steps: usize,
    pub total_env_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub lr: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    /// Global-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub double_q: bool,
    /// Bootstrap through steps cut by the episode limit instead of treating
    /// them as terminal.
    pub bootstrap_timeouts: bool,
    /// Checkpoint every this many env steps; 0 writes only the final one.
    pub checkpoint_interval: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            gamma: 0.99,
            lambda: 1e-3,
            buffer_capacity: 5000,
            batch_size: 32,
            target_update_interval: 200,
            epsilon_start: 1.0,
            epsilon_finish: 0.05,
            epsilon_anneal_steps: 50_000,
            total_env_steps: 500_000,
            eval_interval: 10_000,
            eval_episodes: 32,
            lr: 5e-4,
            rms_alpha: 0.99,
            rms_eps: 1e-5,
            grad_clip: 10.0,
            double_q: false,
            bootstrap_timeouts: false,
            checkpoint_interval: 0,
        }
    }
}

impl TrainingConfig {
    /// Linear schedule from `epsilon_start` to `epsilon_finish`.
    pub fn epsilon_at(&self, env_steps: usize) -> f64 {
        if env_steps >= self.epsilon_anneal_steps {
            return self.epsilon_finish;
        }
        let frac = env_steps as f64 / self.epsilon_anneal_steps as f64;
        self.epsilon_start + frac * (self.epsilon_finish - self.epsilon_start)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config(format!("train.gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("train.lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if self.buffer_capacity < self.batch_size {
            return Err(Error::config(format!(
                "train.buffer_capacity ({}) must be at least train.batch_size ({})",
                self.buffer_capacity, self.batch_size
            )));
        }
        if self.target_update_interval == 0 {
            return Err(Error::config("train.target_update_interval must be at least 1"));
        }
        for (key, v) in [("train.epsilon_start", self.epsilon_start), ("train.epsilon_finish", self.epsilon_finish)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{key} must lie in [0, 1], got {v}")));
            }
        }
        if self.eval_interval == 0 {
            return Err(Error::config("train.eval_interval must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.rms_alpha) {
            return Err(Error::config("train.rms_alpha must lie in [0, 1)"));
        }
        if !(self.rms_eps > 0.0) {
            return Err(Error::config("train.rms_eps must be positive"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("train.grad_clip must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub awareness: bool,
    pub awareness_dim: usize,
    pub encoder_hidden: usize,
    pub estimator_hidden: usize,
    pub utility_hidden: usize,
    pub mixer_embed: usize,
    pub hypernet_hidden: usize,
    pub shared_params: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            awareness: true,
            awareness_dim: DEFAULT_AWARENESS_DIM,
            encoder_hidden: 64,
            estimator_hidden: 64,
            utility_hidden: 64,
            mixer_embed: 32,
            hypernet_hidden: 32,
            shared_params: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("model.hidden_dim", self.hidden_dim),
            ("model.awareness_dim", self.awareness_dim),
            ("model.encoder_hidden", self.encoder_hidden),
            ("model.estimator_hidden", self.estimator_hidden),
            ("model.utility_hidden", self.utility_hidden),
            ("model.mixer_embed", self.mixer_embed),
            ("model.hypernet_hidden", self.hypernet_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{key} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mixer: MixerKind,
    /// Master seed; every RNG stream of a run derives from it.
    pub seed: u64,
    pub env: EnvConfig,
    /// `None`: the environment seed derives from the master seed.
    pub env_seed: Option<u64>,
    pub train: TrainingConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mixer: MixerKind::Vdn,
            seed: 0,
            env: EnvConfig::default(),
            env_seed: None,
            train: TrainingConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

/// Every accepted key, in dump order.
pub const KEYS: &[&str] = &[
    "mixer",
    "seed",
    "env.grid_height",
    "env.grid_width",
    "env.n_agents",
    "env.n_foods",
    "env.max_agent_level",
    "env.visibility_radius",
    "env.episode_limit",
    "env.seed",
    "train.gamma",
    "train.lambda",
    "train.buffer_capacity",
    "train.batch_size",
    "train.target_update_interval",
    "train.epsilon_start",
    "train.epsilon_finish",
    "train.epsilon_anneal_steps",
    "train.total_env_steps",
    "train.eval_interval",
    "train.eval_episodes",
    "train.lr",
    "train.rms_alpha",
    "train.rms_eps",
    "train.grad_clip",
    "train.double_q",
    "train.bootstrap_timeouts",
    "train.checkpoint_interval",
    "model.hidden_dim",
    "model.awareness",
    "model.awareness_dim",
    "model.encoder_hidden",
    "model.estimator_hidden",
    "model.utility_hidden",
    "model.mixer_embed",
    "model.hypernet_hidden",
    "model.shared_params",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?} as {}", std::any::type_name::<T>())))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl RunConfig {
    /// Parses config text on top of the defaults and validates the result.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines without validating.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {raw:?}", lineno + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Applies one `KEY=VALUE` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not KEY=VALUE")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (t, m, e) = (&mut self.train, &mut self.model, &mut self.env);
        match key {
            "mixer" => self.mixer = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "env.grid_height" => e.grid_height = parse(key, value)?,
            "env.grid_width" => e.grid_width = parse(key, value)?,
            "env.n_agents" => e.n_agents = parse(key, value)?,
            "env.n_foods" => e.n_foods = parse(key, value)?,
            "env.max_agent_level" => e.max_agent_level = parse(key, value)?,
            "env.visibility_radius" => e.visibility_radius = parse(key, value)?,
            "env.episode_limit" => e.episode_limit = parse(key, value)?,
            "env.seed" => {
                self.env_seed = match value {
                    "" | "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "train.gamma" => t.gamma = parse(key, value)?,
            "train.lambda" => t.lambda = parse(key, value)?,
            "train.buffer_capacity" => t.buffer_capacity = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.target_update_interval" => t.target_update_interval = parse(key, value)?,
            "train.epsilon_start" => t.epsilon_start = parse(key, value)?,
            "train.epsilon_finish" => t.epsilon_finish = parse(key, value)?,
            "train.epsilon_anneal_steps" => t.epsilon_anneal_steps = parse(key, value)?,
            "train.total_env_steps" => t.total_env_steps = parse(key, value)?,
            "train.eval_interval" => t.eval_interval = parse(key, value)?,
            "train.eval_episodes" => t.eval_episodes = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.rms_alpha" => t.rms_alpha = parse(key, value)?,
            "train.rms_eps" => t.rms_eps = parse(key, value)?,
            "train.grad_clip" => t.grad_clip = parse(key, value)?,
            "train.double_q" => t.double_q = parse_bool(key, value)?,
            "train.bootstrap_timeouts" => t.bootstrap_timeouts = parse_bool(key, value)?,
            "train.checkpoint_interval" => t.checkpoint_interval = parse(key, value)?,
            "model.hidden_dim" => m.hidden_dim = parse(key, value)?,
            "model.awareness" => m.awareness = parse_bool(key, value)?,
            "model.awareness_dim" => m.awareness_dim = parse(key, value)?,
            "model.encoder_hidden" => m.encoder_hidden = parse(key, value)?,
            "model.estimator_hidden" => m.estimator_hidden = parse(key, value)?,
            "model.utility_hidden" => m.utility_hidden = parse(key, value)?,
            "model.mixer_embed" => m.mixer_embed = parse(key, value)?,
            "model.hypernet_hidden" => m.hypernet_hidden = parse(key, value)?,
            "model.shared_params" => m.shared_params = parse_bool(key, value)?,
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        self.model.validate()
    }

    /// Environment config with its seed resolved.
    pub fn resolved_env(&self) -> EnvConfig {
        EnvConfig {
            seed: self.env_seed.unwrap_or(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED),
            ..self.env.clone()
        }
    }

    /// Every key with its resolved value, in [`KEYS`] order. Round-trips
    /// through [`RunConfig::from_text`].
    pub fn to_text(&self) -> String {
        let (t, m, e) = (&self.train, &self.model, &self.env);
        let values: Vec<String> = vec![
            self.mixer.to_string(),
            self.seed.to_string(),
            e.grid_height.to_string(),
            e.grid_width.to_string(),
            e.n_agents.to_string(),
            e.n_foods.to_string(),
            e.max_agent_level.to_string(),
            e.visibility_radius.to_string(),
            e.episode_limit.to_string(),
            self.env_seed.map_or_else(|| "auto".to_string(), |s| s.to_string()),
            t.gamma.to_string(),
            t.lambda.to_string(),
            t.buffer_capacity.to_string(),
            t.batch_size.to_string(),
            t.target_update_interval.to_string(),
            t.epsilon_start.to_string(),
            t.epsilon_finish.to_string(),
            t.epsilon_anneal_steps.to_string(),
            t.total_env_steps.to_string(),
            t.eval_interval.to_string(),
            t.eval_episodes.to_string(),
            t.lr.to_string(),
            t.rms_alpha.to_string(),
            t.rms_eps.to_string(),
            t.grad_clip.to_string(),
            t.double_q.to_string(),
            t.bootstrap_timeouts.to_string(),
            t.checkpoint_interval.to_string(),
            m.hidden_dim.to_string(),
            m.awareness.to_string(),
            m.awareness_dim.to_string(),
            m.encoder_hidden.to_string(),
            m.estimator_hidden.to_string(),
            m.utility_hidden.to_string(),
            m.mixer_embed.to_string(),
            m.hypernet_hidden.to_string(),
            m.shared_params.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
