use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::episode::EpisodeRecord;
use crate::agent::{AgentNetConfig, AgentNetwork, AgentStepCache, AgentStepOutput};
use crate::awareness::{awareness_learning_loss, PairDistributions, PairGradients, PosteriorCache, PosteriorEstimator};
use crate::config::{ModelConfig, RunConfig, TrainingConfig};
use crate::diffcore::{GradientTape, Matrix, ParameterSet, RmsProp, RmsPropConfig, StepReport};
use crate::error::{Error, Result};
use crate::mixer::{Mixer, MixerConfig, MixerForward, MixerInput, MixerKind};

/// Sizes fixed by the environment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub n_agents: usize,
    pub state_dim: usize,
}

/// Every trainable network of a run. Parameters live in one [`ParameterSet`],
/// registered agent first, then the posterior estimator, then the mixer.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub agent: AgentNetwork,
    pub estimator: Option<PosteriorEstimator>,
    pub mixer: Mixer,
    pub dims: ModelDims,
}

impl Model {
    pub fn build<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        dims: ModelDims,
        model: &ModelConfig,
        mixer: MixerKind,
        rng: &mut R,
    ) -> Result<Self> {
        let agent = AgentNetwork::register(
            params,
            AgentNetConfig {
                obs_dim: dims.obs_dim,
                n_actions: dims.n_actions,
                n_agents: dims.n_agents,
                hidden_dim: model.hidden_dim,
                utility_hidden: model.utility_hidden,
                awareness_dim: model.awareness.then_some(model.awareness_dim),
                encoder_hidden: model.encoder_hidden,
                shared: model.shared_params,
            },
            rng,
        )?;
        let estimator = if model.awareness {
            Some(PosteriorEstimator::register(
                params,
                "estimator",
                model.hidden_dim,
                model.estimator_hidden,
                dims.n_agents,
                model.awareness_dim,
                rng,
            )?)
        } else {
            None
        };
        let mixer = Mixer::register(
            params,
            MixerConfig {
                kind: mixer,
                n_agents: dims.n_agents,
                n_actions: dims.n_actions,
                state_dim: dims.state_dim,
                embed_dim: model.mixer_embed,
                hypernet_hidden: model.hypernet_hidden,
            },
            rng,
        )?;
        Ok(Model {
            agent,
            estimator,
            mixer,
            dims,
        })
    }

    /// Builds the model for a run config and returns freshly initialized parameters.
    pub fn for_run<R: Rng + ?Sized>(config: &RunConfig, rng: &mut R) -> Result<(Model, ParameterSet)> {
        let env = &config.env;
        let dims = ModelDims {
            obs_dim: env.obs_dim(),
            n_actions: crate::env::N_ACTIONS,
            n_agents: env.n_agents,
            state_dim: env.state_dim(),
        };
        let mut params = ParameterSet::new();
        let model = Model::build(&mut params, dims, &config.model, config.mixer, rng)?;
        Ok((model, params))
    }

    fn awareness_dim(&self) -> usize {
        self.agent.config().awareness_dim.unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub double_q: bool,
    /// When false, a step that hits the episode limit is terminal.
    pub bootstrap_timeouts: bool,
}

impl From<&TrainingConfig> for LossConfig {
    fn from(t: &TrainingConfig) -> Self {
        LossConfig {
            gamma: t.gamma,
            lambda: t.lambda,
            double_q: t.double_q,
            bootstrap_timeouts: t.bootstrap_timeouts,
        }
    }
}

/// Both terms of the objective for one batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub td_loss: f64,
    /// `kl_matrix[i][j]`: awareness KL of agent `i` about agent `j`, averaged over valid steps.
    pub kl_matrix: Vec<Vec<f64>>,
    /// Row-major sum of `kl_matrix`.
    pub kl_sum: f64,
    pub lambda: f64,
    /// `td_loss + lambda * kl_sum`.
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(td_loss: f64, kl_matrix: Vec<Vec<f64>>, lambda: f64) -> Self {
        let kl_sum = kl_matrix.iter().flatten().sum();
        LossBreakdown {
            td_loss,
            kl_matrix,
            kl_sum,
            lambda,
            total: td_loss + lambda * kl_sum,
        }
    }
}

/// A batch ordered by decreasing length, so the episodes still running at any
/// step form a prefix of the rows.
pub struct SortedBatch<'a> {
    episodes: Vec<&'a EpisodeRecord>,
    max_len: usize,
    valid_steps: usize,
}

impl<'a> SortedBatch<'a> {
    pub fn new(batch: &[&'a EpisodeRecord]) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut episodes = batch.to_vec();
        episodes.sort_by(|a, b| b.len().cmp(&a.len()));
        for e in &episodes {
            e.validate()?;
        }
        let max_len = episodes[0].len();
        let valid_steps = episodes.iter().map(|e| e.len()).sum();
        Ok(SortedBatch {
            episodes,
            max_len,
            valid_steps,
        })
    }

    pub fn episodes(&self) -> &[&'a EpisodeRecord] {
        &self.episodes
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Number of (episode, step) pairs that carry a transition.
    pub fn valid_steps(&self) -> usize {
        self.valid_steps
    }

    /// Episodes with a transition at step `t`.
    pub fn rows_running(&self, t: usize) -> usize {
        self.episodes.iter().take_while(|e| e.len() > t).count()
    }

    /// Episodes with an observation at step `t` (including the final one).
    pub fn rows_observed(&self, t: usize) -> usize {
        self.episodes.iter().take_while(|e| e.len() >= t).count()
    }

    fn online_rows(&self, t: usize, double_q: bool) -> usize {
        if double_q {
            self.rows_observed(t)
        } else {
            self.rows_running(t)
        }
    }

    fn online_steps(&self, double_q: bool) -> usize {
        self.max_len + usize::from(double_q)
    }
}

/// Awareness noise for one loss evaluation, `[t][agent]` matrices of shape
/// `[rows, n·d]`. Fixing it makes the loss a deterministic function of the
/// parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNoise {
    pub online: Vec<Vec<Matrix>>,
    pub target: Vec<Vec<Matrix>>,
}

impl BatchNoise {
    pub fn sample<R: Rng + ?Sized>(model: &Model, batch: &SortedBatch<'_>, double_q: bool, rng: &mut R) -> Self {
        let width = model.agent.awareness_width();
        let n = model.dims.n_agents;
        if width == 0 {
            return BatchNoise {
                online: Vec::new(),
                target: Vec::new(),
            };
        }
        let mut draw = |rows: usize| -> Vec<Matrix> {
            (0..n)
                .map(|_| Matrix::from_fn(rows, width, |_, _| rng.sample(StandardNormal)))
                .collect()
        };
        let online = (0..batch.online_steps(double_q))
            .map(|t| draw(batch.online_rows(t, double_q)))
            .collect();
        let target = (0..=batch.max_len).map(|t| draw(batch.rows_observed(t))).collect();
        BatchNoise { online, target }
    }
}

struct StepState {
    outs: Vec<AgentStepOutput>,
    caches: Vec<AgentStepCache>,
}

fn unroll(
    model: &Model,
    params: &ParameterSet,
    batch: &SortedBatch<'_>,
    steps: usize,
    rows_at: impl Fn(usize) -> usize,
    noise: &[Vec<Matrix>],
) -> Result<Vec<StepState>> {
    let net = &model.agent;
    let n = model.dims.n_agents;
    let input_dim = net.config().input_dim();
    let hidden = net.config().hidden_dim;
    let mut out: Vec<StepState> = Vec::with_capacity(steps);
    for t in 0..steps {
        let rows = rows_at(t);
        let mut outs = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        for i in 0..n {
            let mut inputs = Matrix::zeros(rows, input_dim);
            for (b, ep) in batch.episodes[..rows].iter().enumerate() {
                let last = if t == 0 { None } else { Some(ep.actions[t - 1][i]) };
                net.write_input_row(inputs.row_mut(b), &ep.obs[t][i], last, i);
            }
            let h_prev = match out.last() {
                Some(prev) => prev.outs[i].tau.prefix_rows(rows),
                None => Matrix::zeros(rows, hidden),
            };
            let eps = noise.get(t).map(|v| &v[i]);
            let (o, c) = net.forward_step(params, i, inputs, h_prev, eps)?;
            outs.push(o);
            caches.push(c);
        }
        out.push(StepState { outs, caches });
    }
    Ok(out)
}

/// Lowest-index greedy action among the available ones.
fn masked_argmax(q: &[f64], avail: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for (a, (&v, &ok)) in q.iter().zip(avail).enumerate() {
        if ok && best.is_none_or(|b| v > q[b]) {
            best = Some(a);
        }
    }
    best.unwrap_or(0)
}

struct MixStep {
    q_rows: Vec<Matrix>,
    actions: Vec<Vec<usize>>,
    state: Matrix,
    fwd: MixerForward,
}

struct KlStep {
    grads: Vec<PairGradients>,
    caches: Vec<PosteriorCache>,
}

fn state_rows(batch: &SortedBatch<'_>, t: usize, rows: usize) -> Matrix {
    let width = batch.episodes[0].states[0].len();
    let mut m = Matrix::zeros(rows, width);
    for (b, ep) in batch.episodes[..rows].iter().enumerate() {
        m.row_mut(b).copy_from_slice(&ep.states[t]);
    }
    m
}

fn add_block(dst: &mut Matrix, col: usize, src: &Matrix, scale: f64) {
    for r in 0..src.rows() {
        let d = &mut dst.row_mut(r)[col..col + src.cols()];
        for (a, b) in d.iter_mut().zip(src.row(r)) {
            *a += scale * b;
        }
    }
}

fn scaled(m: &Matrix, s: f64) -> Matrix {
    m.map(|x| s * x)
}

/// Objective over a batch: mean squared TD error against the target network's
/// greedy bootstrap plus `lambda` times the awareness KL. With `grads`, also
/// accumulates the gradient with respect to `params` by backpropagation
/// through time. The target network contributes no gradient.
pub fn compute_loss(
    model: &Model,
    params: &ParameterSet,
    target: &ParameterSet,
    batch: &SortedBatch<'_>,
    noise: &BatchNoise,
    cfg: &LossConfig,
    mut grads: Option<&mut GradientTape>,
) -> Result<LossBreakdown> {
    let n = model.dims.n_agents;
    let big_t = batch.max_len;
    let double_q = cfg.double_q;
    let aware = model.agent.has_awareness();
    let d = model.awareness_dim();

    let online = unroll(
        model,
        params,
        batch,
        batch.online_steps(double_q),
        |t| batch.online_rows(t, double_q),
        &noise.online,
    )?;
    let tgt = unroll(model, target, batch, big_t + 1, |t| batch.rows_observed(t), &noise.target)?;

    let norm = 1.0 / batch.valid_steps as f64;
    let mut td_sum = 0.0;
    let mut deltas: Vec<Vec<f64>> = Vec::with_capacity(big_t);
    let mut mixes: Vec<MixStep> = Vec::with_capacity(big_t);
    let mut kl_steps: Vec<Option<KlStep>> = Vec::with_capacity(big_t);
    let mut kl_matrix = vec![vec![0.0; n]; n];
    let want_grads = grads.is_some();

    for t in 0..big_t {
        let rows = batch.rows_running(t);
        let eps = &batch.episodes[..rows];

        // Bootstrap from the step after t, which every running row observed.
        let next_actions: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let chooser = if double_q { &online[t + 1].outs[i].q } else { &tgt[t + 1].outs[i].q };
                (0..rows)
                    .map(|b| masked_argmax(chooser.row(b), &eps[b].avail[t + 1][i]))
                    .collect()
            })
            .collect();
        let next_q: Vec<Matrix> = (0..n).map(|i| tgt[t + 1].outs[i].q.prefix_rows(rows)).collect();
        let next_state = state_rows(batch, t + 1, rows);
        let next = model.mixer.forward(
            target,
            &MixerInput {
                q_rows: &next_q,
                actions: &next_actions,
                state: Some(&next_state),
            },
        )?;

        let q_rows: Vec<Matrix> = (0..n).map(|i| online[t].outs[i].q.prefix_rows(rows)).collect();
        let actions: Vec<Vec<usize>> = (0..n).map(|i| eps.iter().map(|e| e.actions[t][i]).collect()).collect();
        let state = state_rows(batch, t, rows);
        let fwd = model.mixer.forward(
            params,
            &MixerInput {
                q_rows: &q_rows,
                actions: &actions,
                state: Some(&state),
            },
        )?;
        let mut step_deltas = Vec::with_capacity(rows);
        for (b, ep) in eps.iter().enumerate() {
            let stop = ep.all_collected[t] || (ep.terminated[t] && !cfg.bootstrap_timeouts);
            let cont = if stop { 0.0 } else { 1.0 };
            let y = ep.rewards[t] + cfg.gamma * cont * next.q_tot[b];
            let delta = fwd.q_tot[b] - y;
            td_sum += delta * delta;
            step_deltas.push(delta);
        }
        deltas.push(step_deltas);
        mixes.push(MixStep {
            q_rows,
            actions,
            state,
            fwd,
        });

        if let Some(est) = &model.estimator {
            let taus: Vec<Matrix> = (0..n).map(|i| online[t].outs[i].tau.prefix_rows(rows)).collect();
            let mut pairs = Vec::with_capacity(n * n);
            let mut caches = Vec::with_capacity(n * n);
            for i in 0..n {
                let mu = online[t].outs[i].mu.as_ref().expect("awareness enabled");
                let sigma = online[t].outs[i].sigma.as_ref().expect("awareness enabled");
                for j in 0..n {
                    let (q_mu, q_sigma, cache) = est.forward(params, &taus[i], &taus[j], i, j)?;
                    pairs.push(PairDistributions {
                        i,
                        j,
                        p_mu: mu.columns(j * d, d).prefix_rows(rows),
                        p_sigma: sigma.columns(j * d, d).prefix_rows(rows),
                        q_mu,
                        q_sigma,
                    });
                    caches.push(cache);
                }
            }
            let (loss, pair_grads) =
                awareness_learning_loss(n, &pairs, batch.valid_steps, want_grads && cfg.lambda != 0.0)?;
            for i in 0..n {
                for j in 0..n {
                    kl_matrix[i][j] += loss.kl[i][j];
                }
            }
            kl_steps.push(Some(KlStep {
                grads: pair_grads,
                caches,
            }));
        } else {
            kl_steps.push(None);
        }
    }

    let breakdown = LossBreakdown::from_terms(td_sum * norm, kl_matrix, cfg.lambda);

    let Some(grads) = grads.as_deref_mut() else {
        return Ok(breakdown);
    };
    let net = &model.agent;
    let a_dim = model.dims.n_actions;
    let hidden = net.config().hidden_dim;
    let width = net.awareness_width();
    let mut dh_next: Vec<Option<Matrix>> = vec![None; n];
    for t in (0..online.len()).rev() {
        let rows_t = batch.online_rows(t, double_q);
        let mut dq: Vec<Matrix> = (0..n).map(|_| Matrix::zeros(rows_t, a_dim)).collect();
        let mut dtau: Vec<Matrix> = (0..n)
            .map(|i| {
                let mut m = Matrix::zeros(rows_t, hidden);
                if let Some(next) = &dh_next[i] {
                    m.add_prefix(next);
                }
                m
            })
            .collect();
        let mut dmu: Vec<Matrix> = (0..n).map(|_| Matrix::zeros(rows_t, width)).collect();
        let mut dsigma: Vec<Matrix> = (0..n).map(|_| Matrix::zeros(rows_t, width)).collect();

        if t < big_t {
            let mix = &mixes[t];
            let dq_tot: Vec<f64> = deltas[t].iter().map(|&delta| 2.0 * delta * norm).collect();
            let input = MixerInput {
                q_rows: &mix.q_rows,
                actions: &mix.actions,
                state: Some(&mix.state),
            };
            let dq_mix = model.mixer.backward(params, &input, &mix.fwd, &dq_tot, grads);
            for (acc, g) in dq.iter_mut().zip(&dq_mix) {
                acc.add_prefix(g);
            }
            if let (Some(est), Some(kl)) = (&model.estimator, &kl_steps[t]) {
                for (k, g) in kl.grads.iter().enumerate() {
                    let (i, j) = (k / n, k % n);
                    add_block(&mut dmu[i], j * d, &g.d_p_mu, cfg.lambda);
                    add_block(&mut dsigma[i], j * d, &g.d_p_sigma, cfg.lambda);
                    let (dts, dto) = est.backward(
                        params,
                        &kl.caches[k],
                        &scaled(&g.d_q_mu, cfg.lambda),
                        &scaled(&g.d_q_sigma, cfg.lambda),
                        grads,
                    );
                    dtau[i].add_prefix(&dts);
                    dtau[j].add_prefix(&dto);
                }
            }
        }

        for i in 0..n {
            let dtau_i = std::mem::replace(&mut dtau[i], Matrix::zeros(0, 0));
            let dh = net.backward_step(
                params,
                i,
                &online[t].caches[i],
                &dq[i],
                aware.then_some(&dmu[i]),
                aware.then_some(&dsigma[i]),
                dtau_i,
                grads,
            );
            dh_next[i] = Some(dh);
        }
    }
    Ok(breakdown)
}

/// Hard copy of the online parameters into the target every `interval`
/// episodes. Returns whether a copy happened.
pub fn update_target(online: &ParameterSet, target: &mut ParameterSet, episodes: usize, interval: usize) -> Result<bool> {
    if interval == 0 || episodes % interval != 0 {
        return Ok(false);
    }
    target.copy_from(online)?;
    Ok(true)
}

/// Online and target parameters with their optimizer.
#[derive(Clone, Debug)]
pub struct Learner {
    pub model: Model,
    pub params: ParameterSet,
    pub target: ParameterSet,
    pub optimizer: RmsProp,
    pub loss: LossConfig,
    pub target_update_interval: usize,
}

impl Learner {
    pub fn new(model: Model, params: ParameterSet, train: &TrainingConfig) -> Self {
        let optimizer = RmsProp::new(
            &params,
            RmsPropConfig {
                lr: train.lr,
                alpha: train.rms_alpha,
                eps: train.rms_eps,
                clip_norm: (train.grad_clip > 0.0).then_some(train.grad_clip),
            },
        );
        Learner {
            model,
            target: params.clone(),
            params,
            optimizer,
            loss: LossConfig::from(train),
            target_update_interval: train.target_update_interval,
        }
    }

    /// Loss and gradient on `batch` with the given noise, without updating.
    pub fn evaluate_loss(&self, batch: &SortedBatch<'_>, noise: &BatchNoise, with_grads: bool) -> Result<(LossBreakdown, Option<GradientTape>)> {
        let mut tape = with_grads.then(|| GradientTape::zeros_like(&self.params));
        let b = compute_loss(&self.model, &self.params, &self.target, batch, noise, &self.loss, tape.as_mut())?;
        Ok((b, tape))
    }

    /// One optimizer step on a sampled batch. Awareness noise is drawn from `rng`.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &[&EpisodeRecord], rng: &mut R) -> Result<(LossBreakdown, StepReport)> {
        let sorted = SortedBatch::new(batch)?;
        let noise = BatchNoise::sample(&self.model, &sorted, self.loss.double_q, rng);
        let (breakdown, tape) = self.evaluate_loss(&sorted, &noise, true)?;
        let tape = tape.expect("gradients requested");
        if !breakdown.total.is_finite() || !tape.is_finite() {
            return Err(Error::NonFinite(format!(
                "td_loss={} kl_sum={} total={} grad_finite={} params_finite={} target_finite={} batch_steps={}",
                breakdown.td_loss,
                breakdown.kl_sum,
                breakdown.total,
                tape.is_finite(),
                self.params.is_finite(),
                self.target.is_finite(),
                sorted.valid_steps
            )));
        }
        let report = self.optimizer.step(&mut self.params, &tape)?;
        Ok((breakdown, report))
    }

    /// Call once per collected episode.
    pub fn on_episode(&mut self, episodes: usize) -> Result<bool> {
        update_target(&self.params, &mut self.target, episodes, self.target_update_interval)
    }
}
