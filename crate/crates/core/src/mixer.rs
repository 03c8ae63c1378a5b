//! Centralized value factorization.
//!
//! All three mixers satisfy Individual-Global-Max: the greedy joint action of
//! `Q_tot` is the tuple of per-agent greedy actions.
//!
//! - VDN: `Q_tot = Σᵢ Qᵢ(aᵢ)`.
//! - QMIX: a two-layer monotone mixing network whose weights come from
//!   state-conditioned hypernetworks passed through `|·|`.
//! - QPLEX (simplified): `Q_tot = Σᵢ Qᵢ(aᵢ) + Σᵢ (λᵢ − 1)·Aᵢ(aᵢ)` with
//!   `Aᵢ = Qᵢ(aᵢ) − maxₐ Qᵢ(a) ≤ 0` and `λᵢ = softplus(w(s, a)) + ε_λ > 0`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{logistic, softplus, Activation, Dense, DenseAct, DenseActCache, GradientTape, Matrix, ParamId, ParameterSet};
use crate::error::{Error, Result};

/// Floor added to every QPLEX importance weight.
pub const LAMBDA_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    Vdn,
    Qmix,
    Qplex,
}

impl std::str::FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vdn" => Ok(MixerKind::Vdn),
            "qmix" => Ok(MixerKind::Qmix),
            "qplex" => Ok(MixerKind::Qplex),
            other => Err(Error::config(format!("unknown mixer {other:?} (expected vdn, qmix or qplex)"))),
        }
    }
}

impl std::fmt::Display for MixerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MixerKind::Vdn => "vdn",
            MixerKind::Qmix => "qmix",
            MixerKind::Qplex => "qplex",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub kind: MixerKind,
    pub n_agents: usize,
    pub n_actions: usize,
    pub state_dim: usize,
    /// QMIX mixing width.
    pub embed_dim: usize,
    /// Hidden width of hypernetworks and of the QPLEX λ head.
    pub hypernet_hidden: usize,
}

/// Batched mixer input.
pub struct MixerInput<'a> {
    /// One `[B, |A|]` utility matrix per agent.
    pub q_rows: &'a [Matrix],
    /// Chosen action of each agent for each row: `actions[i][b]`.
    pub actions: &'a [Vec<usize>],
    /// `[B, state_dim]`; required by QMIX and QPLEX.
    pub state: Option<&'a Matrix>,
}

impl MixerInput<'_> {
    fn rows(&self) -> usize {
        self.q_rows.first().map_or(0, |m| m.rows())
    }

    fn chosen(&self, agent: usize, row: usize) -> f64 {
        self.q_rows[agent].get(row, self.actions[agent][row])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QmixNet {
    w1_hidden: DenseAct,
    w1_out: Dense,
    b1: Dense,
    w2_hidden: DenseAct,
    w2_out: Dense,
    v_hidden: DenseAct,
    v_out: Dense,
    n_agents: usize,
    embed: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QplexNet {
    hidden: DenseAct,
    out: Dense,
    n_agents: usize,
    n_actions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MixerNet {
    Vdn,
    Qmix(QmixNet),
    Qplex(QplexNet),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mixer {
    pub config: MixerConfig,
    pub net: MixerNet,
    param_ids: Vec<ParamId>,
}

enum MixCache {
    Vdn,
    Qmix {
        state: Matrix,
        w1_hidden: DenseActCache,
        w1_hidden_out: Matrix,
        raw_w1: Matrix,
        w2_hidden: DenseActCache,
        w2_hidden_out: Matrix,
        raw_w2: Matrix,
        v_hidden: DenseActCache,
        v_hidden_out: Matrix,
        pre: Matrix,
        hid: Matrix,
    },
    Qplex {
        head_in: DenseActCache,
        head_hidden_out: Matrix,
        raw_lambda: Matrix,
        lambda: Matrix,
        advantage: Matrix,
        argmax: Vec<Vec<usize>>,
    },
}

pub struct MixerForward {
    pub q_tot: Vec<f64>,
    /// QPLEX only: `λ` and `A` per row and agent, `[B, n]`.
    pub lambda: Option<Matrix>,
    pub advantage: Option<Matrix>,
    cache: MixCache,
}

impl MixerForward {
    /// QPLEX `V_tot = Σᵢ maxₐ Qᵢ` and `A_tot = Q_tot − V_tot` per row.
    pub fn qplex_split(&self, input: &MixerInput<'_>) -> Option<(Vec<f64>, Vec<f64>)> {
        self.lambda.as_ref()?;
        let rows = input.rows();
        let v: Vec<f64> = (0..rows)
            .map(|b| {
                input
                    .q_rows
                    .iter()
                    .map(|q| q.row(b).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .sum()
            })
            .collect();
        let a = self.q_tot.iter().zip(&v).map(|(q, v)| q - v).collect();
        Some((v, a))
    }
}

fn hidden_layer<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    act: Activation,
    rng: &mut R,
) -> Result<DenseAct> {
    Ok(DenseAct {
        dense: Dense::register(params, name, in_dim, out_dim, rng)?,
        act,
    })
}

/// Lowest index attaining the maximum of `row`.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Two-layer monotone mixing with explicit (already non-negative) weights:
/// `Q_tot = ELU(qᵀW₁ + b₁)·w₂ + b₂`, with `W₁` stored `[n, E]` row-major.
pub fn qmix_combine(q: &[f64], w1: &[f64], b1: &[f64], w2: &[f64], b2: f64) -> f64 {
    let embed = b1.len();
    let mut out = b2;
    for k in 0..embed {
        let pre: f64 = q.iter().enumerate().map(|(i, qi)| qi * w1[i * embed + k]).sum::<f64>() + b1[k];
        out += Activation::Elu.apply(pre) * w2[k];
    }
    out
}

impl Mixer {
    pub fn register<R: Rng + ?Sized>(params: &mut ParameterSet, config: MixerConfig, rng: &mut R) -> Result<Self> {
        if config.n_agents == 0 {
            return Err(Error::config("mixer needs at least one agent"));
        }
        let first = params.len();
        let s = config.state_dim;
        let h = config.hypernet_hidden;
        let net = match config.kind {
            MixerKind::Vdn => MixerNet::Vdn,
            MixerKind::Qmix => {
                let e = config.embed_dim;
                let n = config.n_agents;
                MixerNet::Qmix(QmixNet {
                    w1_hidden: hidden_layer(params, "mixer.hyper_w1.hidden", s, h, Activation::Relu, rng)?,
                    w1_out: Dense::register(params, "mixer.hyper_w1.out", h, n * e, rng)?,
                    b1: Dense::register(params, "mixer.hyper_b1", s, e, rng)?,
                    w2_hidden: hidden_layer(params, "mixer.hyper_w2.hidden", s, h, Activation::Relu, rng)?,
                    w2_out: Dense::register(params, "mixer.hyper_w2.out", h, e, rng)?,
                    v_hidden: hidden_layer(params, "mixer.hyper_b2.hidden", s, e, Activation::Relu, rng)?,
                    v_out: Dense::register(params, "mixer.hyper_b2.out", e, 1, rng)?,
                    n_agents: n,
                    embed: e,
                })
            }
            MixerKind::Qplex => {
                let in_dim = s + config.n_agents * config.n_actions;
                MixerNet::Qplex(QplexNet {
                    hidden: hidden_layer(params, "mixer.lambda.hidden", in_dim, h, Activation::Relu, rng)?,
                    out: Dense::register(params, "mixer.lambda.out", h, config.n_agents, rng)?,
                    n_agents: config.n_agents,
                    n_actions: config.n_actions,
                })
            }
        };
        let param_ids = (first..params.len()).map(ParamId).collect();
        Ok(Mixer { config, net, param_ids })
    }

    pub fn kind(&self) -> MixerKind {
        self.config.kind
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.param_ids
    }

    pub fn forward(&self, params: &ParameterSet, input: &MixerInput<'_>) -> Result<MixerForward> {
        let rows = input.rows();
        let n = self.config.n_agents;
        if input.q_rows.len() != n || input.actions.len() != n {
            return Err(Error::contract(format!("mixer expects {n} agents")));
        }
        match &self.net {
            MixerNet::Vdn => {
                let q_tot = (0..rows).map(|b| (0..n).map(|i| input.chosen(i, b)).sum()).collect();
                Ok(MixerForward {
                    q_tot,
                    lambda: None,
                    advantage: None,
                    cache: MixCache::Vdn,
                })
            }
            MixerNet::Qmix(net) => {
                let state = input
                    .state
                    .ok_or_else(|| Error::contract("QMIX requires the global state"))?;
                let e = net.embed;
                let (w1h, w1_hidden) = net.w1_hidden.forward(params, state.clone())?;
                let raw_w1 = net.w1_out.forward(params, &w1h)?;
                let b1 = net.b1.forward(params, state)?;
                let (w2h, w2_hidden) = net.w2_hidden.forward(params, state.clone())?;
                let raw_w2 = net.w2_out.forward(params, &w2h)?;
                let (vh, v_hidden) = net.v_hidden.forward(params, state.clone())?;
                let b2 = net.v_out.forward(params, &vh)?;
                let mut pre = Matrix::zeros(rows, e);
                let mut hid = Matrix::zeros(rows, e);
                let mut q_tot = Vec::with_capacity(rows);
                for b in 0..rows {
                    let w1 = raw_w1.row(b);
                    let mut out = b2.get(b, 0);
                    for k in 0..e {
                        let mut p = b1.get(b, k);
                        for i in 0..n {
                            p += input.chosen(i, b) * w1[i * e + k].abs();
                        }
                        let h = Activation::Elu.apply(p);
                        pre.set(b, k, p);
                        hid.set(b, k, h);
                        out += h * raw_w2.get(b, k).abs();
                    }
                    q_tot.push(out);
                }
                Ok(MixerForward {
                    q_tot,
                    lambda: None,
                    advantage: None,
                    cache: MixCache::Qmix {
                        state: state.clone(),
                        w1_hidden,
                        w1_hidden_out: w1h,
                        raw_w1,
                        w2_hidden,
                        w2_hidden_out: w2h,
                        raw_w2,
                        v_hidden,
                        v_hidden_out: vh,
                        pre,
                        hid,
                    },
                })
            }
            MixerNet::Qplex(net) => {
                let state = input
                    .state
                    .ok_or_else(|| Error::contract("QPLEX requires the global state"))?;
                let a_dim = net.n_actions;
                let mut head_input = Matrix::zeros(rows, state.cols() + n * a_dim);
                for b in 0..rows {
                    let row = head_input.row_mut(b);
                    row[..state.cols()].copy_from_slice(state.row(b));
                    for i in 0..n {
                        row[state.cols() + i * a_dim + input.actions[i][b]] = 1.0;
                    }
                }
                let (hh, head_in) = net.hidden.forward(params, head_input)?;
                let raw_lambda = net.out.forward(params, &hh)?;
                let lambda = raw_lambda.map(|x| softplus(x) + LAMBDA_FLOOR);
                let mut advantage = Matrix::zeros(rows, n);
                let mut argmaxes = vec![Vec::with_capacity(rows); n];
                let mut q_tot = Vec::with_capacity(rows);
                for b in 0..rows {
                    let mut total = 0.0;
                    for i in 0..n {
                        let row = input.q_rows[i].row(b);
                        let best = argmax(row);
                        argmaxes[i].push(best);
                        let chosen = input.chosen(i, b);
                        let adv = chosen - row[best];
                        advantage.set(b, i, adv);
                        total += chosen + (lambda.get(b, i) - 1.0) * adv;
                    }
                    q_tot.push(total);
                }
                Ok(MixerForward {
                    q_tot,
                    lambda: Some(lambda.clone()),
                    advantage: Some(advantage.clone()),
                    cache: MixCache::Qplex {
                        head_in,
                        head_hidden_out: hh,
                        raw_lambda,
                        lambda,
                        advantage,
                        argmax: argmaxes,
                    },
                })
            }
        }
    }

    /// Accumulates mixer parameter gradients and returns `∂L/∂Qᵢ` for each
    /// agent's utility matrix.
    pub fn backward(
        &self,
        params: &ParameterSet,
        input: &MixerInput<'_>,
        fwd: &MixerForward,
        dq_tot: &[f64],
        grads: &mut GradientTape,
    ) -> Vec<Matrix> {
        let rows = input.rows();
        let n = self.config.n_agents;
        let a_dim = self.config.n_actions;
        let mut dq: Vec<Matrix> = (0..n).map(|_| Matrix::zeros(rows, a_dim)).collect();
        match (&self.net, &fwd.cache) {
            (MixerNet::Vdn, MixCache::Vdn) => {
                for (i, d) in dq.iter_mut().enumerate() {
                    for b in 0..rows {
                        d.set(b, input.actions[i][b], dq_tot[b]);
                    }
                }
            }
            (
                MixerNet::Qmix(net),
                MixCache::Qmix {
                    state,
                    w1_hidden,
                    w1_hidden_out,
                    raw_w1,
                    w2_hidden,
                    w2_hidden_out,
                    raw_w2,
                    v_hidden,
                    v_hidden_out,
                    pre,
                    hid,
                },
            ) => {
                let e = net.embed;
                let mut d_raw_w1 = Matrix::zeros(rows, n * e);
                let mut d_b1 = Matrix::zeros(rows, e);
                let mut d_raw_w2 = Matrix::zeros(rows, e);
                let mut d_b2 = Matrix::zeros(rows, 1);
                for b in 0..rows {
                    let g = dq_tot[b];
                    d_b2.set(b, 0, g);
                    for k in 0..e {
                        let rw2 = raw_w2.get(b, k);
                        d_raw_w2.set(b, k, g * hid.get(b, k) * rw2.signum() * (rw2 != 0.0) as u8 as f64);
                        let dpre = g * rw2.abs() * Activation::Elu.derivative(pre.get(b, k));
                        d_b1.set(b, k, dpre);
                        for i in 0..n {
                            let rw1 = raw_w1.get(b, i * e + k);
                            let qi = input.chosen(i, b);
                            let sign = if rw1 > 0.0 {
                                1.0
                            } else if rw1 < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            d_raw_w1.set(b, i * e + k, dpre * qi * sign);
                            let a = input.actions[i][b];
                            let cur = dq[i].get(b, a);
                            dq[i].set(b, a, cur + dpre * rw1.abs());
                        }
                    }
                }
                let dh = net.w1_out.backward(params, w1_hidden_out, &d_raw_w1, grads, true).unwrap();
                net.w1_hidden.backward(params, w1_hidden, &dh, grads, false);
                net.b1.backward(params, state, &d_b1, grads, false);
                let dh = net.w2_out.backward(params, w2_hidden_out, &d_raw_w2, grads, true).unwrap();
                net.w2_hidden.backward(params, w2_hidden, &dh, grads, false);
                let dh = net.v_out.backward(params, v_hidden_out, &d_b2, grads, true).unwrap();
                net.v_hidden.backward(params, v_hidden, &dh, grads, false);
            }
            (
                MixerNet::Qplex(net),
                MixCache::Qplex {
                    head_in,
                    head_hidden_out,
                    raw_lambda,
                    lambda,
                    advantage,
                    argmax,
                },
            ) => {
                let mut d_raw = Matrix::zeros(rows, n);
                for b in 0..rows {
                    let g = dq_tot[b];
                    for i in 0..n {
                        let l = lambda.get(b, i);
                        let a = input.actions[i][b];
                        let best = argmax[i][b];
                        let row = dq[i].row_mut(b);
                        row[a] += g * l;
                        row[best] -= g * (l - 1.0);
                        d_raw.set(b, i, g * advantage.get(b, i) * logistic(raw_lambda.get(b, i)));
                    }
                }
                let dh = net.out.backward(params, head_hidden_out, &d_raw, grads, true).unwrap();
                net.hidden.backward(params, head_in, &dh, grads, false);
            }
            _ => unreachable!("cache does not match mixer kind"),
        }
        dq
    }

    /// Resamples every mixer parameter uniformly in `[-scale, scale]`.
    pub fn randomize<R: Rng + ?Sized>(&self, params: &mut ParameterSet, scale: f64, rng: &mut R) {
        for &id in &self.param_ids {
            for v in params.values_mut(id) {
                *v = rng.random_range(-scale..=scale);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IgmReport {
    pub mixer: MixerKind,
    pub n_agents: usize,
    pub n_actions: usize,
    pub trials: usize,
    pub violations: usize,
}

/// Exhaustive Individual-Global-Max check: for random utilities, states and
/// mixer parameters, the brute-force joint argmax of `Q_tot` over all `|A|ⁿ`
/// joint actions must equal the per-agent greedy tuple. Ties resolve to the
/// lowest index on both sides (lexicographically smallest joint action).
pub fn igm_check<R: Rng + ?Sized>(mixer: &Mixer, params: &mut ParameterSet, trials: usize, rng: &mut R) -> Result<IgmReport> {
    let n = mixer.config.n_agents;
    let a_dim = mixer.config.n_actions;
    if n > 3 || a_dim > 4 {
        return Err(Error::contract("igm_check is limited to n ≤ 3 agents and |A| ≤ 4 actions"));
    }
    let joint = a_dim.pow(n as u32);
    let mut violations = 0;
    for _ in 0..trials {
        mixer.randomize(params, 1.0, rng);
        let utilities: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..a_dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let state: Vec<f64> = (0..mixer.config.state_dim).map(|_| rng.random_range(-1.0..1.0)).collect();

        let q_rows: Vec<Matrix> = utilities
            .iter()
            .map(|u| Matrix::from_fn(joint, a_dim, |_, a| u[a]))
            .collect();
        let mut actions = vec![Vec::with_capacity(joint); n];
        for idx in 0..joint {
            let mut rest = idx;
            for i in (0..n).rev() {
                actions[i].push(rest % a_dim);
                rest /= a_dim;
            }
        }
        let states = Matrix::from_fn(joint, state.len(), |_, c| state[c]);
        let fwd = mixer.forward(
            params,
            &MixerInput {
                q_rows: &q_rows,
                actions: &actions,
                state: Some(&states),
            },
        )?;
        let best_joint = argmax(&fwd.q_tot);
        let greedy: Vec<usize> = utilities.iter().map(|u| argmax(u)).collect();
        let brute: Vec<usize> = (0..n).map(|i| actions[i][best_joint]).collect();
        if brute != greedy {
            violations += 1;
        }
    }
    Ok(IgmReport {
        mixer: mixer.kind(),
        n_agents: n,
        n_actions: a_dim,
        trials,
        violations,
    })
}
