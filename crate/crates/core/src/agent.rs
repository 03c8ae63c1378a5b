//! Per-agent recurrent utility network.
//!
//! ```text
//! [obs, onehot(last action), onehot(agent id)?] → dense → ReLU → GRU → τ
//! τ → awareness encoder → (μ, σ) → c = μ + σ⊙ε
//! [τ, c₁ … cₙ] → dense → ReLU → dense → Q(τ, ·)
//! ```
//!
//! Without awareness the utility head reads `τ` alone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::awareness::{reparameterize, reparameterize_backward, AwarenessEncoder, AwarenessSet, EncoderCache};
use crate::diffcore::{
    Activation, Dense, DenseAct, DenseActCache, GradientTape, GruCache, GruCell, Matrix, ParameterSet,
};
use crate::error::{Error, Result};

/// Recurrent embedding of one agent's observation-action history.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryState {
    pub hidden: Vec<f64>,
    pub agent_id: usize,
    pub timestep: usize,
}

impl TrajectoryState {
    pub fn initial(agent_id: usize, hidden_dim: usize) -> Self {
        TrajectoryState {
            hidden: vec![0.0; hidden_dim],
            agent_id,
            timestep: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalQValues {
    pub values: Vec<f64>,
    pub avail: Vec<bool>,
}

impl LocalQValues {
    /// Highest available value, lowest index on ties.
    pub fn greedy(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (a, (&v, &ok)) in self.values.iter().zip(&self.avail).enumerate() {
            if ok && best.is_none_or(|b| v > self.values[b]) {
                best = Some(a);
            }
        }
        best
    }
}

/// ε-greedy over available actions.
pub fn select_action<R: Rng + ?Sized>(q: &LocalQValues, epsilon: f64, rng: &mut R) -> Result<usize> {
    let greedy = q
        .greedy()
        .ok_or_else(|| Error::contract("every action is masked"))?;
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        let avail: Vec<usize> = q
            .avail
            .iter()
            .enumerate()
            .filter_map(|(a, &ok)| ok.then_some(a))
            .collect();
        return Ok(avail[rng.random_range(0..avail.len())]);
    }
    Ok(greedy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentNetConfig {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub n_agents: usize,
    pub hidden_dim: usize,
    pub utility_hidden: usize,
    /// `None` disables awareness entirely (the plain value-factorization agent).
    pub awareness_dim: Option<usize>,
    pub encoder_hidden: usize,
    /// One parameter copy for all agents, conditioned on a one-hot agent id.
    pub shared: bool,
}

impl AgentNetConfig {
    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_actions + if self.shared { self.n_agents } else { 0 }
    }

    pub fn utility_input_dim(&self) -> usize {
        self.hidden_dim + self.awareness_dim.map_or(0, |d| d * self.n_agents)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct AgentParams {
    input: DenseAct,
    gru: GruCell,
    encoder: Option<AwarenessEncoder>,
    utility_hidden: DenseAct,
    utility_out: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentNetwork {
    config: AgentNetConfig,
    copies: Vec<AgentParams>,
}

/// Per-step intermediates of one agent over a batch of rows.
pub struct AgentStepCache {
    input: DenseActCache,
    gru: GruCache,
    encoder: Option<EncoderCache>,
    noise: Option<Matrix>,
    utility_hidden: DenseActCache,
    utility_hidden_out: Matrix,
}

/// Outputs of one batched step.
pub struct AgentStepOutput {
    pub tau: Matrix,
    pub q: Matrix,
    /// Encoder means and scales `[B, n·d]`, when awareness is enabled.
    pub mu: Option<Matrix>,
    pub sigma: Option<Matrix>,
    pub samples: Option<Matrix>,
}

impl AgentNetwork {
    pub fn register<R: Rng + ?Sized>(params: &mut ParameterSet, config: AgentNetConfig, rng: &mut R) -> Result<Self> {
        if config.n_agents == 0 || config.n_actions == 0 || config.hidden_dim == 0 {
            return Err(Error::config("agent network needs agents, actions and a hidden state"));
        }
        let copies = if config.shared { 1 } else { config.n_agents };
        let mut out = Vec::with_capacity(copies);
        for k in 0..copies {
            let prefix = if config.shared {
                "agent".to_string()
            } else {
                format!("agent{k}")
            };
            let input = Dense::register(params, &format!("{prefix}.fc_in"), config.input_dim(), config.hidden_dim, rng)?;
            let gru = GruCell::register(params, &format!("{prefix}.gru"), config.hidden_dim, config.hidden_dim, rng)?;
            let encoder = match config.awareness_dim {
                Some(d) => Some(AwarenessEncoder::register(
                    params,
                    &format!("{prefix}.awareness"),
                    config.hidden_dim,
                    config.encoder_hidden,
                    config.n_agents,
                    d,
                    config.shared,
                    rng,
                )?),
                None => None,
            };
            let utility_hidden = Dense::register(
                params,
                &format!("{prefix}.utility.hidden"),
                config.utility_input_dim(),
                config.utility_hidden,
                rng,
            )?;
            let utility_out = Dense::register(params, &format!("{prefix}.utility.out"), config.utility_hidden, config.n_actions, rng)?;
            out.push(AgentParams {
                input: DenseAct {
                    dense: input,
                    act: Activation::Relu,
                },
                gru,
                encoder,
                utility_hidden: DenseAct {
                    dense: utility_hidden,
                    act: Activation::Relu,
                },
                utility_out,
            });
        }
        Ok(AgentNetwork { config, copies: out })
    }

    pub fn config(&self) -> &AgentNetConfig {
        &self.config
    }

    pub fn has_awareness(&self) -> bool {
        self.config.awareness_dim.is_some()
    }

    fn copy(&self, agent: usize) -> &AgentParams {
        if self.config.shared {
            &self.copies[0]
        } else {
            &self.copies[agent]
        }
    }

    pub fn encoder(&self, agent: usize) -> Option<&AwarenessEncoder> {
        self.copy(agent).encoder.as_ref()
    }

    /// Flat awareness width `n·d` (0 without awareness).
    pub fn awareness_width(&self) -> usize {
        self.config.awareness_dim.map_or(0, |d| d * self.config.n_agents)
    }

    /// Writes one input row: observation, one-hot last action, one-hot id.
    pub fn write_input_row(&self, row: &mut [f64], obs: &[f64], last_action: Option<usize>, agent: usize) {
        let c = &self.config;
        row[..c.obs_dim].copy_from_slice(obs);
        row[c.obs_dim..].iter_mut().for_each(|v| *v = 0.0);
        if let Some(a) = last_action {
            row[c.obs_dim + a] = 1.0;
        }
        if c.shared {
            row[c.obs_dim + c.n_actions + agent] = 1.0;
        }
    }

    /// Batched forward for `agent` over `B` rows. `noise` must be `[B, n·d]`
    /// when awareness is enabled.
    pub fn forward_step(
        &self,
        params: &ParameterSet,
        agent: usize,
        inputs: Matrix,
        h_prev: Matrix,
        noise: Option<&Matrix>,
    ) -> Result<(AgentStepOutput, AgentStepCache)> {
        let p = self.copy(agent);
        let (x, input) = p.input.forward(params, inputs)?;
        let (tau, gru) = p.gru.forward(params, x, h_prev)?;
        let (utility_in, mu, sigma, samples, encoder, noise) = match &p.encoder {
            Some(enc) => {
                let noise = noise.ok_or_else(|| Error::contract("awareness sampling needs noise"))?;
                let (mu, sigma, cache) = enc.forward(params, &tau, agent)?;
                if (noise.rows(), noise.cols()) != (mu.rows(), mu.cols()) {
                    return Err(Error::config("awareness noise shape mismatch"));
                }
                let c = reparameterize(&mu, &sigma, noise);
                let utility_in = Matrix::hcat(&[&tau, &c]);
                (utility_in, Some(mu), Some(sigma), Some(c), Some(cache), Some(noise.clone()))
            }
            None => (tau.clone(), None, None, None, None, None),
        };
        let (uh, utility_hidden) = p.utility_hidden.forward(params, utility_in)?;
        let q = p.utility_out.forward(params, &uh)?;
        Ok((
            AgentStepOutput {
                tau,
                q,
                mu,
                sigma,
                samples,
            },
            AgentStepCache {
                input,
                gru,
                encoder,
                noise,
                utility_hidden,
                utility_hidden_out: uh,
            },
        ))
    }

    /// Backward for one step. `dq` comes from the mixer; `dmu`/`dsigma` from
    /// the awareness loss; `dtau` collects every other path into `τ` (the
    /// posterior estimator and the next step's recurrence). Returns `dh_prev`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_step(
        &self,
        params: &ParameterSet,
        agent: usize,
        cache: &AgentStepCache,
        dq: &Matrix,
        dmu: Option<&Matrix>,
        dsigma: Option<&Matrix>,
        mut dtau: Matrix,
        grads: &mut GradientTape,
    ) -> Matrix {
        let p = self.copy(agent);
        let duh = p
            .utility_out
            .backward(params, &cache.utility_hidden_out, dq, grads, true)
            .expect("input gradient requested");
        let dutil = p
            .utility_hidden
            .backward(params, &cache.utility_hidden, &duh, grads, true)
            .expect("input gradient requested");
        let hd = self.config.hidden_dim;
        match &p.encoder {
            Some(enc) => {
                dtau.add_prefix(&dutil.columns(0, hd));
                let dc = dutil.columns(hd, self.awareness_width());
                let noise = cache.noise.as_ref().expect("noise cached with encoder");
                let (mut dmu_total, mut dsigma_total) = reparameterize_backward(&dc, noise);
                if let Some(d) = dmu {
                    dmu_total.add_prefix(d);
                }
                if let Some(d) = dsigma {
                    dsigma_total.add_prefix(d);
                }
                let enc_cache = cache.encoder.as_ref().expect("encoder cache");
                dtau.add_prefix(&enc.backward(params, enc_cache, &dmu_total, &dsigma_total, grads));
            }
            None => dtau.add_prefix(&dutil),
        }
        let (dx, dh_prev) = p.gru.backward(params, &cache.gru, &dtau, grads, true);
        p.input
            .backward(params, &cache.input, &dx.expect("input gradient requested"), grads, false);
        dh_prev
    }

    /// One recurrent update from a single observation.
    pub fn trajectory_update(
        &self,
        params: &ParameterSet,
        obs: &[f64],
        last_action: Option<usize>,
        prev: &TrajectoryState,
    ) -> Result<TrajectoryState> {
        let c = &self.config;
        if obs.len() != c.obs_dim {
            return Err(Error::config(format!("observation has {} entries, expected {}", obs.len(), c.obs_dim)));
        }
        if prev.hidden.len() != c.hidden_dim {
            return Err(Error::config("trajectory width mismatch"));
        }
        if last_action.is_some_and(|a| a >= c.n_actions) {
            return Err(Error::contract("last action out of range"));
        }
        if prev.agent_id >= c.n_agents {
            return Err(Error::contract("agent id out of range"));
        }
        let p = self.copy(prev.agent_id);
        let mut row = vec![0.0; c.input_dim()];
        self.write_input_row(&mut row, obs, last_action, prev.agent_id);
        let x = p.input.dense.forward_vec(params, &row)?;
        let x: Vec<f64> = x.into_iter().map(|v| Activation::Relu.apply(v)).collect();
        let hidden = p.gru.step(params, &x, &prev.hidden)?;
        Ok(TrajectoryState {
            hidden,
            agent_id: prev.agent_id,
            timestep: prev.timestep + 1,
        })
    }

    /// Local action values from `τ` and the flattened awareness samples.
    pub fn local_q(&self, params: &ParameterSet, traj: &TrajectoryState, awareness: &[f64], avail: &[bool]) -> Result<LocalQValues> {
        if awareness.len() != self.awareness_width() {
            return Err(Error::config(format!(
                "expected {} awareness values, got {}",
                self.awareness_width(),
                awareness.len()
            )));
        }
        if avail.len() != self.config.n_actions {
            return Err(Error::config("availability mask length mismatch"));
        }
        let p = self.copy(traj.agent_id);
        let mut input = traj.hidden.clone();
        input.extend_from_slice(awareness);
        let h = p.utility_hidden.dense.forward_vec(params, &input)?;
        let h: Vec<f64> = h.into_iter().map(|v| v.max(0.0)).collect();
        let values = p.utility_out.forward_vec(params, &h)?;
        Ok(LocalQValues {
            values,
            avail: avail.to_vec(),
        })
    }
}

/// What one decentralized decision produced.
#[derive(Clone, Debug)]
pub struct ActorDecision {
    pub action: usize,
    pub q: LocalQValues,
    pub awareness: Option<AwarenessSet>,
}

/// Decentralized executor for one agent.
///
/// It holds only the agent network: no mixer, no posterior estimator, no
/// global state, and no other agent's trajectory is reachable from here.
pub struct DecentralizedActor<'a> {
    net: &'a AgentNetwork,
    params: &'a ParameterSet,
    traj: TrajectoryState,
    last_action: Option<usize>,
}

impl<'a> DecentralizedActor<'a> {
    pub fn new(net: &'a AgentNetwork, params: &'a ParameterSet, agent_id: usize) -> Self {
        DecentralizedActor {
            net,
            params,
            traj: TrajectoryState::initial(agent_id, net.config.hidden_dim),
            last_action: None,
        }
    }

    pub fn trajectory(&self) -> &TrajectoryState {
        &self.traj
    }

    /// Consumes the agent's own observation, samples awareness, and picks an action.
    pub fn act<R: Rng + ?Sized>(&mut self, obs: &[f64], avail: &[bool], epsilon: f64, rng: &mut R) -> Result<ActorDecision> {
        self.traj = self.net.trajectory_update(self.params, obs, self.last_action, &self.traj)?;
        let awareness = match self.net.encoder(self.traj.agent_id) {
            Some(enc) => {
                let mut set = enc.encode_awareness(self.params, &self.traj)?;
                set.sample(rng);
                Some(set)
            }
            None => None,
        };
        let flat: &[f64] = awareness.as_ref().map_or(&[], |s| s.flat_samples());
        let q = self.net.local_q(self.params, &self.traj, flat, avail)?;
        let action = select_action(&q, epsilon, rng)?;
        self.last_action = Some(action);
        Ok(ActorDecision { action, q, awareness })
    }
}
