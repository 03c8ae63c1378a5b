#![allow(dead_code)]

use linda_core::config::ModelConfig;
use linda_core::diffcore::ParameterSet;
use linda_core::env::{EnvConfig, LbfEnv};
use linda_core::mixer::MixerKind;
use linda_core::trainer::{collect_episode, EpisodeRecord, Model, ModelDims};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_env(limit: usize) -> EnvConfig {
    EnvConfig {
        grid_height: 5,
        grid_width: 5,
        n_agents: 2,
        n_foods: 1,
        max_agent_level: 2,
        visibility_radius: 1,
        episode_limit: limit,
        seed: 3,
    }
}

pub fn small_model(awareness: bool) -> ModelConfig {
    ModelConfig {
        hidden_dim: 6,
        awareness,
        awareness_dim: 2,
        encoder_hidden: 5,
        estimator_hidden: 5,
        utility_hidden: 5,
        mixer_embed: 4,
        hypernet_hidden: 4,
        shared_params: true,
    }
}

pub fn build(env: &EnvConfig, model: &ModelConfig, mixer: MixerKind, seed: u64) -> (Model, ParameterSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ModelDims {
        obs_dim: env.obs_dim(),
        n_actions: 6,
        n_agents: env.n_agents,
        state_dim: env.state_dim(),
    };
    let mut params = ParameterSet::new();
    let m = Model::build(&mut params, dims, model, mixer, &mut rng).unwrap();
    (m, params)
}

/// Random-policy episodes; with `limit` small every episode is cut by the time limit.
pub fn episodes(model: &Model, params: &ParameterSet, env: &EnvConfig, count: usize, seed: u64) -> Vec<EpisodeRecord> {
    let mut env = LbfEnv::new(EnvConfig { seed, ..env.clone() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    (0..count)
        .map(|_| collect_episode(&mut env, &model.agent, params, 1.0, &mut rng).unwrap())
        .collect()
}

/// Copy of `params` with every value moved by up to `scale`.
pub fn jitter(params: &ParameterSet, scale: f64, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = params.clone();
    for id in out.ids().collect::<Vec<_>>() {
        for v in out.values_mut(id) {
            *v += rng.random_range(-scale..scale);
        }
    }
    out
}
