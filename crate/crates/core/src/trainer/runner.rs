use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::buffer::ReplayBuffer;
use super::episode::EpisodeRecord;
use super::learner::{Learner, LossBreakdown, Model};
use crate::agent::{AgentNetwork, DecentralizedActor};
use crate::awareness::AwarenessSet;
use crate::config::RunConfig;
use crate::diffcore::ParameterSet;
use crate::env::{EnvConfig, LbfEnv, MultiAgentEnv};
use crate::error::Result;

/// Rolls one ε-greedy episode with decentralized actors and records it.
///
/// The global state is recorded for the learner; the actors never see it.
pub fn collect_episode<E: MultiAgentEnv, R: Rng + ?Sized>(
    env: &mut E,
    net: &AgentNetwork,
    params: &ParameterSet,
    epsilon: f64,
    rng: &mut R,
) -> Result<EpisodeRecord> {
    let n = env.n_agents();
    let mut actors: Vec<DecentralizedActor<'_>> = (0..n).map(|i| DecentralizedActor::new(net, params, i)).collect();
    let mut obs = vec![env.reset()];
    let mut states = vec![env.global_state()];
    let mut avail = vec![(0..n).map(|i| env.avail_actions(i)).collect::<Vec<_>>()];
    let mut rec = EpisodeRecord {
        obs: Vec::new(),
        states: Vec::new(),
        avail: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        terminated: Vec::new(),
        all_collected: Vec::new(),
    };
    loop {
        let t = rec.actions.len();
        let mut joint = Vec::with_capacity(n);
        for (i, actor) in actors.iter_mut().enumerate() {
            joint.push(actor.act(&obs[t][i], &avail[t][i], epsilon, rng)?.action);
        }
        let outcome = env.step(&joint)?;
        rec.actions.push(joint);
        rec.rewards.push(outcome.reward);
        rec.terminated.push(outcome.terminated);
        rec.all_collected.push(outcome.all_collected);
        obs.push((0..n).map(|i| env.observation(i)).collect());
        states.push(env.global_state());
        avail.push((0..n).map(|i| env.avail_actions(i)).collect());
        if outcome.terminated {
            break;
        }
    }
    rec.obs = obs;
    rec.states = states;
    rec.avail = avail;
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl EvalReport {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let k = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / k;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k;
        EvalReport {
            returns,
            mean,
            std: var.sqrt(),
        }
    }
}

/// One greedy decentralized step of every agent, as seen by an observer.
pub struct ExecutionStep<'a> {
    pub episode: usize,
    pub t: usize,
    pub awareness: &'a [Option<AwarenessSet>],
    pub actions: &'a [usize],
}

/// Greedy (ε = 0) decentralized episodes. Each agent acts from its own
/// observations through the agent network alone; awareness is sampled from
/// the encoder's distributions. `observer` sees every step.
pub fn evaluate_with<R: Rng + ?Sized>(
    net: &AgentNetwork,
    params: &ParameterSet,
    env_config: &EnvConfig,
    n_episodes: usize,
    rng: &mut R,
    mut observer: impl FnMut(&ExecutionStep<'_>),
) -> Result<EvalReport> {
    let mut env = LbfEnv::new(EnvConfig {
        seed: rng.random(),
        ..env_config.clone()
    })?;
    let n = env.n_agents();
    let mut returns = Vec::with_capacity(n_episodes);
    for episode in 0..n_episodes {
        let mut actors: Vec<DecentralizedActor<'_>> = (0..n).map(|i| DecentralizedActor::new(net, params, i)).collect();
        let mut obs = env.reset();
        let mut ret = 0.0;
        for t in 0.. {
            let mut joint = Vec::with_capacity(n);
            let mut awareness = Vec::with_capacity(n);
            for (i, actor) in actors.iter_mut().enumerate() {
                let decision = actor.act(&obs[i], &env.avail_actions(i), 0.0, rng)?;
                joint.push(decision.action);
                awareness.push(decision.awareness);
            }
            observer(&ExecutionStep {
                episode,
                t,
                awareness: &awareness,
                actions: &joint,
            });
            let outcome = env.step(&joint)?;
            ret += outcome.reward;
            if outcome.terminated {
                break;
            }
            obs = (0..n).map(|i| env.observation(i)).collect();
        }
        returns.push(ret);
    }
    Ok(EvalReport::from_returns(returns))
}

pub fn evaluate<R: Rng + ?Sized>(
    net: &AgentNetwork,
    params: &ParameterSet,
    env_config: &EnvConfig,
    n_episodes: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    evaluate_with(net, params, env_config, n_episodes, rng, |_| {})
}

/// One metrics line, written at every evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub env_steps: usize,
    pub episode: usize,
    pub td_loss: Option<f64>,
    pub kl_sum: Option<f64>,
    pub total_loss: Option<f64>,
    pub epsilon: f64,
    pub eval_mean_return: f64,
    pub eval_std: f64,
}

/// Hooks called by [`Trainer::run`].
pub trait RunObserver {
    fn on_train_step(&mut self, _env_steps: usize, _episode: usize, _loss: &LossBreakdown) -> Result<()> {
        Ok(())
    }

    fn on_eval(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _env_steps: usize, _params: &ParameterSet, _is_final: bool) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl RunObserver for NoObserver {}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub env_steps: usize,
    pub episodes: usize,
    pub train_steps: usize,
    pub final_eval: EvalReport,
}

/// Independent RNG streams derived from one master seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// The full training loop: collect, store, learn, sync target, evaluate.
pub struct Trainer {
    pub config: RunConfig,
    pub learner: Learner,
    pub buffer: ReplayBuffer,
    env: LbfEnv,
    act_rng: ChaCha8Rng,
    learn_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    pub env_steps: usize,
    pub episodes: usize,
    pub train_steps: usize,
    last_loss: Option<LossBreakdown>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = stream(config.seed, 0);
        let (model, params) = Model::for_run(&config, &mut init_rng)?;
        Self::with_params(config, model, params)
    }

    pub fn with_params(config: RunConfig, model: Model, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let env = LbfEnv::new(config.resolved_env())?;
        Ok(Trainer {
            learner: Learner::new(model, params, &config.train),
            buffer: ReplayBuffer::new(config.train.buffer_capacity)?,
            env,
            act_rng: stream(config.seed, 1),
            learn_rng: stream(config.seed, 2),
            eval_rng: stream(config.seed, 3),
            env_steps: 0,
            episodes: 0,
            train_steps: 0,
            last_loss: None,
            config,
        })
    }

    pub fn last_loss(&self) -> Option<&LossBreakdown> {
        self.last_loss.as_ref()
    }

    pub fn evaluate(&mut self) -> Result<EvalReport> {
        evaluate(
            &self.learner.model.agent,
            &self.learner.params,
            &self.config.env,
            self.config.train.eval_episodes,
            &mut self.eval_rng,
        )
    }

    fn metrics_row(&self, eval: &EvalReport) -> MetricsRow {
        let loss = self.last_loss.as_ref();
        MetricsRow {
            env_steps: self.env_steps,
            episode: self.episodes,
            td_loss: loss.map(|l| l.td_loss),
            kl_sum: loss.map(|l| l.kl_sum),
            total_loss: loss.map(|l| l.total),
            epsilon: self.config.train.epsilon_at(self.env_steps),
            eval_mean_return: eval.mean,
            eval_std: eval.std,
        }
    }

    /// Collects one episode, stores it and takes a train step when the buffer is ready.
    pub fn step_episode(&mut self, observer: &mut dyn RunObserver) -> Result<()> {
        let epsilon = self.config.train.epsilon_at(self.env_steps);
        let record = collect_episode(
            &mut self.env,
            &self.learner.model.agent,
            &self.learner.params,
            epsilon,
            &mut self.act_rng,
        )?;
        self.env_steps += record.len();
        self.episodes += 1;
        self.buffer.store(record)?;
        if let Some(batch) = self.buffer.sample_batch(self.config.train.batch_size, &mut self.learn_rng) {
            let (loss, _) = self.learner.train_step(&batch, &mut self.learn_rng)?;
            self.train_steps += 1;
            observer.on_train_step(self.env_steps, self.episodes, &loss)?;
            self.last_loss = Some(loss);
        }
        self.learner.on_episode(self.episodes)?;
        Ok(())
    }

    /// Trains until `total_env_steps`, evaluating at the start, every
    /// `eval_interval` env steps and at the end.
    pub fn run(&mut self, observer: &mut dyn RunObserver) -> Result<RunSummary> {
        let train = self.config.train.clone();
        let first = self.evaluate()?;
        observer.on_eval(&self.metrics_row(&first))?;
        let mut last_eval_at = self.env_steps;
        let mut last_eval = first;
        let mut next_eval = train.eval_interval;
        let mut next_ckpt = train.checkpoint_interval;
        while self.env_steps < train.total_env_steps {
            self.step_episode(observer)?;
            if self.env_steps >= next_eval {
                last_eval = self.evaluate()?;
                last_eval_at = self.env_steps;
                observer.on_eval(&self.metrics_row(&last_eval))?;
                while next_eval <= self.env_steps {
                    next_eval += train.eval_interval;
                }
            }
            if train.checkpoint_interval > 0 && self.env_steps >= next_ckpt {
                observer.on_checkpoint(self.env_steps, &self.learner.params, false)?;
                while next_ckpt <= self.env_steps {
                    next_ckpt += train.checkpoint_interval;
                }
            }
        }
        if last_eval_at != self.env_steps {
            last_eval = self.evaluate()?;
            observer.on_eval(&self.metrics_row(&last_eval))?;
        }
        observer.on_checkpoint(self.env_steps, &self.learner.params, true)?;
        Ok(RunSummary {
            env_steps: self.env_steps,
            episodes: self.episodes,
            train_steps: self.train_steps,
            final_eval: last_eval,
        })
    }
}
