use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One collected episode of length `T`.
///
/// Observations, states and availability masks have `T + 1` entries: the last
/// one is what the agents saw after the final transition and feeds the
/// bootstrap target. Padding is implicit; batches align episodes by time and
/// mask every step past an episode's own length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// `[T+1][n][obs_dim]`.
    pub obs: Vec<Vec<Vec<f64>>>,
    /// `[T+1][state_dim]`.
    pub states: Vec<Vec<f64>>,
    /// `[T+1][n][|A|]`.
    pub avail: Vec<Vec<Vec<bool>>>,
    /// `[T][n]`.
    pub actions: Vec<Vec<usize>>,
    /// `[T]`.
    pub rewards: Vec<f64>,
    /// `[T]`: the episode ended after this step (goal or time limit).
    pub terminated: Vec<bool>,
    /// `[T]`: the environment reached a true terminal state; only these stop bootstrapping.
    pub all_collected: Vec<bool>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.obs.first().map_or(0, Vec::len)
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Checks shapes and the padding rule: termination only at the last step.
    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if t == 0 {
            return Err(Error::contract("episode has no transitions"));
        }
        if self.obs.len() != t + 1 || self.states.len() != t + 1 || self.avail.len() != t + 1 {
            return Err(Error::contract("episode needs T+1 observations, states and masks"));
        }
        if self.rewards.len() != t || self.terminated.len() != t || self.all_collected.len() != t {
            return Err(Error::contract("episode needs T rewards and terminal flags"));
        }
        let n = self.n_agents();
        if n == 0 {
            return Err(Error::contract("episode has no agents"));
        }
        let obs_dim = self.obs[0][0].len();
        let state_dim = self.states[0].len();
        let n_actions = self.avail[0][0].len();
        for s in 0..=t {
            if self.obs[s].len() != n || self.obs[s].iter().any(|o| o.len() != obs_dim) {
                return Err(Error::contract(format!("observation shape differs at step {s}")));
            }
            if self.states[s].len() != state_dim {
                return Err(Error::contract(format!("state shape differs at step {s}")));
            }
            if self.avail[s].len() != n || self.avail[s].iter().any(|m| m.len() != n_actions) {
                return Err(Error::contract(format!("availability shape differs at step {s}")));
            }
        }
        for (s, acts) in self.actions.iter().enumerate() {
            if acts.len() != n {
                return Err(Error::contract(format!("step {s} has {} actions for {n} agents", acts.len())));
            }
            for (i, &a) in acts.iter().enumerate() {
                if a >= n_actions || !self.avail[s][i][a] {
                    return Err(Error::contract(format!("agent {i} took unavailable action {a} at step {s}")));
                }
            }
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::contract("non-finite reward"));
        }
        for s in 0..t - 1 {
            if self.terminated[s] || self.all_collected[s] {
                return Err(Error::contract(format!("episode terminated at step {s} but continues")));
            }
        }
        if !self.terminated[t - 1] && self.all_collected[t - 1] {
            return Err(Error::contract("goal reached without termination"));
        }
        Ok(())
    }
}
