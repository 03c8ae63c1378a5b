//! Cooperative partially observable environments.
//!
//! [`MultiAgentEnv`] is the decentralized-POMDP surface the trainer talks to:
//! per-agent local observations, a joint discrete action, one shared reward,
//! and a global state vector that only centralized training may read.

mod lbf;

pub use lbf::{
    global_state, observe, Action, AgentState, EnvConfig, FoodState, LbfEnv, StepOutcome, WorldState,
    N_ACTIONS,
};

use crate::error::Result;

pub trait MultiAgentEnv {
    fn n_agents(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn episode_limit(&self) -> usize;

    /// Starts a new episode and returns every agent's first observation.
    fn reset(&mut self) -> Vec<Vec<f64>>;

    /// Advances one step with a joint action (one index per agent).
    fn step(&mut self, actions: &[usize]) -> Result<StepOutcome>;

    fn observation(&self, agent: usize) -> Vec<f64>;
    fn global_state(&self) -> Vec<f64>;
    fn avail_actions(&self, agent: usize) -> Vec<bool>;
}
