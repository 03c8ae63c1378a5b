//! Awareness decomposition.
//!
//! Agent `i` maps its trajectory embedding `τⁱ` to `n` diagonal Gaussians, one
//! per teammate `j` (itself included), and samples `cⁱⱼ = μⁱⱼ + σⁱⱼ ⊙ εⁱⱼ`.
//! During centralized training a posterior estimator `q(cⁱⱼ | τⁱ, τʲ)` sees
//! both trajectories, and the awareness loss is the forward KL from the
//! encoder's distribution to that posterior, summed over all ordered pairs.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent::TrajectoryState;
use crate::diffcore::{softplus, logistic, Activation, Dense, DenseAct, DenseActCache, GradientTape, Matrix, ParameterSet};
use crate::error::{Error, Result};

/// Lower bound added to every softplus scale.
pub const SIGMA_FLOOR: f64 = 1e-4;

pub const DEFAULT_AWARENESS_DIM: usize = 3;

/// Whether centralized information may be read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecutionMode {
    CentralizedTraining,
    DecentralizedExecution,
}

#[inline]
pub(crate) fn positive_scale(raw: f64) -> f64 {
    softplus(raw) + SIGMA_FLOOR
}

/// Awareness of one agent for all `n` agents: `n × d` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct AwarenessSet {
    pub agent_id: usize,
    pub mu: Matrix,
    pub sigma: Matrix,
    /// Filled by sampling; empty (`0 × d`) until then.
    pub samples: Matrix,
    pub noise: Matrix,
}

impl AwarenessSet {
    pub fn n_targets(&self) -> usize {
        self.mu.rows()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    /// Draws `ε ~ N(0, I)` from `rng` and sets `c = μ + σ ⊙ ε`.
    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &Matrix {
        let noise = Matrix::from_fn(self.mu.rows(), self.mu.cols(), |_, _| rng.sample(StandardNormal));
        self.sample_with_noise(noise)
    }

    /// Uses pinned noise.
    pub fn sample_with_noise(&mut self, noise: Matrix) -> &Matrix {
        assert_eq!((noise.rows(), noise.cols()), (self.mu.rows(), self.mu.cols()));
        self.samples = reparameterize(&self.mu, &self.sigma, &noise);
        self.noise = noise;
        &self.samples
    }

    /// Flattened samples `[c₁, …, cₙ]`, the layout the utility head consumes.
    pub fn flat_samples(&self) -> &[f64] {
        self.samples.as_slice()
    }
}

/// `c = μ + σ ⊙ ε`.
pub fn reparameterize(mu: &Matrix, sigma: &Matrix, noise: &Matrix) -> Matrix {
    let mut c = mu.clone();
    for ((x, s), e) in c.as_mut_slice().iter_mut().zip(sigma.as_slice()).zip(noise.as_slice()) {
        *x += s * e;
    }
    c
}

/// Gradients of `c = μ + σ ⊙ ε` given `dc`: `dμ = dc`, `dσ = dc ⊙ ε`. The
/// noise is a constant; nothing flows into it.
pub fn reparameterize_backward(dc: &Matrix, noise: &Matrix) -> (Matrix, Matrix) {
    (dc.clone(), dc.zip_map(noise, |g, e| g * e))
}

/// Two-layer Gaussian head: hidden LeakyReLU layer, then a linear layer whose
/// output halves are means and softplus-floored scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct GaussianHead {
    hidden: DenseAct,
    out: Dense,
}

struct GaussianHeadCache {
    hidden: DenseActCache,
    hidden_out: Matrix,
    raw: Matrix,
}

impl GaussianHead {
    fn register<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        n_means: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = Dense::register(params, &format!("{name}.hidden"), in_dim, hidden_dim, rng)?;
        let out = Dense::register(params, &format!("{name}.head"), hidden_dim, 2 * n_means, rng)?;
        Ok(GaussianHead {
            hidden: DenseAct {
                dense: hidden,
                act: Activation::LeakyRelu,
            },
            out,
        })
    }

    fn n_means(&self) -> usize {
        self.out.out_dim / 2
    }

    fn forward(&self, params: &ParameterSet, x: Matrix) -> Result<(Matrix, Matrix, GaussianHeadCache)> {
        let (h, hidden) = self.hidden.forward(params, x)?;
        let raw = self.out.forward(params, &h)?;
        let m = self.n_means();
        let mu = raw.columns(0, m);
        let sigma = raw.columns(m, m).map(positive_scale);
        Ok((
            mu,
            sigma,
            GaussianHeadCache {
                hidden,
                hidden_out: h,
                raw,
            },
        ))
    }

    fn backward(
        &self,
        params: &ParameterSet,
        cache: &GaussianHeadCache,
        dmu: &Matrix,
        dsigma: &Matrix,
        grads: &mut GradientTape,
    ) -> Matrix {
        let m = self.n_means();
        let rows = dmu.rows();
        let mut draw = Matrix::zeros(rows, 2 * m);
        for r in 0..rows {
            let raw = cache.raw.row(r);
            let (dm, ds) = (dmu.row(r), dsigma.row(r));
            let out = draw.row_mut(r);
            out[..m].copy_from_slice(dm);
            for k in 0..m {
                out[m + k] = ds[k] * logistic(raw[m + k]);
            }
        }
        let dh = self
            .out
            .backward(params, &cache.hidden_out, &draw, grads, true)
            .expect("input gradient requested");
        self.hidden
            .backward(params, &cache.hidden, &dh, grads, true)
            .expect("input gradient requested")
    }
}

fn one_hot_rows(rows: usize, width: usize, hot: usize) -> Matrix {
    Matrix::from_fn(rows, width, |_, c| if c == hot { 1.0 } else { 0.0 })
}

/// Maps `τⁱ` (optionally with the agent's one-hot id) to `n` Gaussians.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AwarenessEncoder {
    head: GaussianHead,
    pub traj_dim: usize,
    pub n_agents: usize,
    pub dim: usize,
    pub id_conditioned: bool,
}

pub struct EncoderCache {
    head: GaussianHeadCache,
}

impl AwarenessEncoder {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        traj_dim: usize,
        hidden_dim: usize,
        n_agents: usize,
        dim: usize,
        id_conditioned: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let in_dim = traj_dim + if id_conditioned { n_agents } else { 0 };
        let head = GaussianHead::register(params, name, in_dim, hidden_dim, n_agents * dim, rng)?;
        Ok(AwarenessEncoder {
            head,
            traj_dim,
            n_agents,
            dim,
            id_conditioned,
        })
    }

    /// Batched forward. Returns `(μ, σ)`, each `[B, n·d]` with target `j`
    /// occupying columns `j·d .. (j+1)·d`.
    pub fn forward(&self, params: &ParameterSet, tau: &Matrix, agent_id: usize) -> Result<(Matrix, Matrix, EncoderCache)> {
        if tau.cols() != self.traj_dim {
            return Err(Error::config(format!(
                "awareness encoder expects trajectory width {}, got {}",
                self.traj_dim,
                tau.cols()
            )));
        }
        let input = if self.id_conditioned {
            Matrix::hcat(&[tau, &one_hot_rows(tau.rows(), self.n_agents, agent_id)])
        } else {
            tau.clone()
        };
        let (mu, sigma, head) = self.head.forward(params, input)?;
        Ok((mu, sigma, EncoderCache { head }))
    }

    /// Returns `dτ`.
    pub fn backward(
        &self,
        params: &ParameterSet,
        cache: &EncoderCache,
        dmu: &Matrix,
        dsigma: &Matrix,
        grads: &mut GradientTape,
    ) -> Matrix {
        let dx = self.head.backward(params, &cache.head, dmu, dsigma, grads);
        if self.id_conditioned {
            dx.columns(0, self.traj_dim)
        } else {
            dx
        }
    }

    /// Single-trajectory encoding; samples and noise are left empty.
    pub fn encode_awareness(&self, params: &ParameterSet, traj: &TrajectoryState) -> Result<AwarenessSet> {
        let (mu, sigma, _) = self.forward(params, &Matrix::row_vector(&traj.hidden), traj.agent_id)?;
        Ok(AwarenessSet {
            agent_id: traj.agent_id,
            mu: Matrix::from_vec(self.n_agents, self.dim, mu.into_vec()),
            sigma: Matrix::from_vec(self.n_agents, self.dim, sigma.into_vec()),
            samples: Matrix::zeros(0, self.dim),
            noise: Matrix::zeros(0, self.dim),
        })
    }
}

/// Variational posterior `q(cⁱⱼ | τⁱ, τʲ)` for a single target.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorOutput {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Centralized-only estimator over `(τ_self, τ_other, onehot(i), onehot(j))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PosteriorEstimator {
    head: GaussianHead,
    pub traj_dim: usize,
    pub n_agents: usize,
    pub dim: usize,
}

pub struct PosteriorCache {
    head: GaussianHeadCache,
}

impl PosteriorEstimator {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        traj_dim: usize,
        hidden_dim: usize,
        n_agents: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let in_dim = 2 * traj_dim + 2 * n_agents;
        let head = GaussianHead::register(params, name, in_dim, hidden_dim, dim, rng)?;
        Ok(PosteriorEstimator {
            head,
            traj_dim,
            n_agents,
            dim,
        })
    }

    /// Batched forward for pair `(i, j)`: returns `(μ_q, σ_q)`, each `[B, d]`.
    pub fn forward(
        &self,
        params: &ParameterSet,
        tau_self: &Matrix,
        tau_other: &Matrix,
        i: usize,
        j: usize,
    ) -> Result<(Matrix, Matrix, PosteriorCache)> {
        if tau_self.cols() != self.traj_dim || tau_other.cols() != self.traj_dim || tau_self.rows() != tau_other.rows() {
            return Err(Error::config("posterior estimator trajectory shape mismatch"));
        }
        let rows = tau_self.rows();
        let input = Matrix::hcat(&[
            tau_self,
            tau_other,
            &one_hot_rows(rows, self.n_agents, i),
            &one_hot_rows(rows, self.n_agents, j),
        ]);
        let (mu, sigma, head) = self.head.forward(params, input)?;
        Ok((mu, sigma, PosteriorCache { head }))
    }

    /// Returns `(dτ_self, dτ_other)`.
    pub fn backward(
        &self,
        params: &ParameterSet,
        cache: &PosteriorCache,
        dmu: &Matrix,
        dsigma: &Matrix,
        grads: &mut GradientTape,
    ) -> (Matrix, Matrix) {
        let dx = self.head.backward(params, &cache.head, dmu, dsigma, grads);
        (dx.columns(0, self.traj_dim), dx.columns(self.traj_dim, self.traj_dim))
    }

    /// Single-pair estimate. Refused outside centralized training: decentralized
    /// execution must never consult another agent's trajectory.
    pub fn posterior_estimate(
        &self,
        params: &ParameterSet,
        tau_self: &TrajectoryState,
        tau_other: &TrajectoryState,
        mode: ExecutionMode,
    ) -> Result<PosteriorOutput> {
        if mode != ExecutionMode::CentralizedTraining {
            return Err(Error::contract(
                "posterior estimator is training-only; execution may not read other agents' trajectories",
            ));
        }
        let (mu, sigma, _) = self.forward(
            params,
            &Matrix::row_vector(&tau_self.hidden),
            &Matrix::row_vector(&tau_other.hidden),
            tau_self.agent_id,
            tau_other.agent_id,
        )?;
        Ok(PosteriorOutput {
            mu: mu.into_vec(),
            sigma: sigma.into_vec(),
        })
    }
}

/// Closed-form `KL(N(μ_p, σ_p²) ‖ N(μ_q, σ_q²))` for diagonal Gaussians, summed
/// over dimensions.
pub fn kl_diag_gaussian(mu_p: &[f64], sigma_p: &[f64], mu_q: &[f64], sigma_q: &[f64]) -> Result<f64> {
    if sigma_p.iter().chain(sigma_q).any(|&s| s <= 0.0 || s.is_nan()) {
        return Err(Error::contract("KL requires strictly positive scales"));
    }
    Ok(kl_unchecked(mu_p, sigma_p, mu_q, sigma_q))
}

#[inline]
fn kl_unchecked(mu_p: &[f64], sigma_p: &[f64], mu_q: &[f64], sigma_q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for k in 0..mu_p.len() {
        let d = mu_p[k] - mu_q[k];
        let vq = sigma_q[k] * sigma_q[k];
        kl += (sigma_q[k] / sigma_p[k]).ln() + (sigma_p[k] * sigma_p[k] + d * d) / (2.0 * vq) - 0.5;
    }
    kl
}

/// Partial derivatives of the diagonal KL w.r.t. `(μ_p, σ_p, μ_q, σ_q)`,
/// written into the four output slices (accumulated, scaled by `weight`).
#[inline]
fn kl_grad_acc(
    mu_p: &[f64],
    sigma_p: &[f64],
    mu_q: &[f64],
    sigma_q: &[f64],
    weight: f64,
    d_mu_p: &mut [f64],
    d_sigma_p: &mut [f64],
    d_mu_q: &mut [f64],
    d_sigma_q: &mut [f64],
) {
    for k in 0..mu_p.len() {
        let d = mu_p[k] - mu_q[k];
        let vq = sigma_q[k] * sigma_q[k];
        let g_mu = d / vq;
        d_mu_p[k] += weight * g_mu;
        d_mu_q[k] -= weight * g_mu;
        d_sigma_p[k] += weight * (sigma_p[k] / vq - 1.0 / sigma_p[k]);
        d_sigma_q[k] += weight * (1.0 / sigma_q[k] - (sigma_p[k] * sigma_p[k] + d * d) / (vq * sigma_q[k]));
    }
}

/// Gradient of [`kl_diag_gaussian`]: `(dμ_p, dσ_p, dμ_q, dσ_q)`.
pub fn kl_diag_gaussian_grad(
    mu_p: &[f64],
    sigma_p: &[f64],
    mu_q: &[f64],
    sigma_q: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = mu_p.len();
    let (mut a, mut b, mut c, mut d) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    kl_grad_acc(mu_p, sigma_p, mu_q, sigma_q, 1.0, &mut a, &mut b, &mut c, &mut d);
    (a, b, c, d)
}

/// Encoder and posterior distributions for one ordered pair `(i, j)` over a
/// set of valid (episode, timestep) rows. Padded steps must be excluded by
/// the caller.
#[derive(Clone, Debug)]
pub struct PairDistributions {
    pub i: usize,
    pub j: usize,
    pub p_mu: Matrix,
    pub p_sigma: Matrix,
    pub q_mu: Matrix,
    pub q_sigma: Matrix,
}

/// Gradients for one [`PairDistributions`].
#[derive(Clone, Debug)]
pub struct PairGradients {
    pub d_p_mu: Matrix,
    pub d_p_sigma: Matrix,
    pub d_q_mu: Matrix,
    pub d_q_sigma: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AwarenessLoss {
    /// `kl[i][j]`: mean over valid rows of `KL(p(cⁱⱼ|τⁱ) ‖ q(cⁱⱼ|τⁱ,τʲ))`.
    pub kl: Vec<Vec<f64>>,
    /// Sum of all entries of `kl`, added in row-major order.
    pub total: f64,
}

/// Sum over ordered pairs of the mean per-row KL, normalized by `valid_rows`.
/// With `want_grads`, also returns `∂total/∂` of every input matrix.
pub fn awareness_learning_loss(
    n_agents: usize,
    pairs: &[PairDistributions],
    valid_rows: usize,
    want_grads: bool,
) -> Result<(AwarenessLoss, Vec<PairGradients>)> {
    if valid_rows == 0 {
        return Err(Error::contract("awareness loss over an empty batch"));
    }
    let norm = 1.0 / valid_rows as f64;
    let mut kl = vec![vec![0.0; n_agents]; n_agents];
    let mut grads = Vec::new();
    for pair in pairs {
        if pair.p_sigma.as_slice().iter().chain(pair.q_sigma.as_slice()).any(|&s| s <= 0.0) {
            return Err(Error::contract("KL requires strictly positive scales"));
        }
        let rows = pair.p_mu.rows();
        let mut acc = 0.0;
        for r in 0..rows {
            acc += kl_unchecked(pair.p_mu.row(r), pair.p_sigma.row(r), pair.q_mu.row(r), pair.q_sigma.row(r));
        }
        kl[pair.i][pair.j] += acc * norm;
        if want_grads {
            let d = pair.p_mu.cols();
            let mut g = PairGradients {
                d_p_mu: Matrix::zeros(rows, d),
                d_p_sigma: Matrix::zeros(rows, d),
                d_q_mu: Matrix::zeros(rows, d),
                d_q_sigma: Matrix::zeros(rows, d),
            };
            for r in 0..rows {
                kl_grad_acc(
                    pair.p_mu.row(r),
                    pair.p_sigma.row(r),
                    pair.q_mu.row(r),
                    pair.q_sigma.row(r),
                    norm,
                    g.d_p_mu.row_mut(r),
                    g.d_p_sigma.row_mut(r),
                    g.d_q_mu.row_mut(r),
                    g.d_q_sigma.row_mut(r),
                );
            }
            grads.push(g);
        }
    }
    let total = kl.iter().flatten().sum();
    Ok((AwarenessLoss { kl, total }, grads))
}

/// Differential entropy of a diagonal Gaussian: `½ Σ ln(2πe σ²)`.
pub fn gaussian_entropy(sigma: &[f64]) -> f64 {
    sigma
        .iter()
        .map(|s| 0.5 * (2.0 * PI * std::f64::consts::E * s * s).ln())
        .sum()
}

/// Entropy of each of the `n` awareness distributions. Diagnostic only.
pub fn awareness_entropy(set: &AwarenessSet) -> Vec<f64> {
    (0..set.n_targets()).map(|j| gaussian_entropy(set.sigma.row(j))).collect()
}

/// Mean scale over dimensions of the awareness distribution for `target`.
pub fn variance_summary(set: &AwarenessSet, target: usize) -> Result<f64> {
    if target >= set.n_targets() {
        return Err(Error::contract(format!("target {target} out of range")));
    }
    let row = set.sigma.row(target);
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Log density of a diagonal Gaussian.
pub fn diag_gaussian_log_density(x: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((x, m), s)| {
            let z = (x - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    pub fn from_samples(values: impl IntoIterator<Item = f64>) -> McEstimate {
        let mut n = 0usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for v in values {
            n += 1;
            let delta = v - mean;
            mean += delta / n as f64;
            m2 += delta * (v - mean);
        }
        let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
        McEstimate {
            mean,
            std_error: (var / n.max(1) as f64).sqrt(),
            samples: n,
        }
    }
}

/// Sampled `E_p[ln p(x) − ln q(x)]` for diagonal Gaussians.
pub fn kl_monte_carlo<R: Rng + ?Sized>(
    mu_p: &[f64],
    sigma_p: &[f64],
    mu_q: &[f64],
    sigma_q: &[f64],
    samples: usize,
    rng: &mut R,
) -> McEstimate {
    let d = mu_p.len();
    let mut x = vec![0.0; d];
    McEstimate::from_samples((0..samples).map(|_| {
        for k in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            x[k] = mu_p[k] + sigma_p[k] * e;
        }
        diag_gaussian_log_density(&x, mu_p, sigma_p) - diag_gaussian_log_density(&x, mu_q, sigma_q)
    }))
}

/// Variational lower bound on `I(c; τ)`:
/// `E_{p(c,τ)}[ln q(c | τ)] + H(c)`, estimated from joint samples.
///
/// `q` returns the mean and scale of the variational conditional for a given
/// `τ`; `marginal_entropy` is `H(c)`. The bound is tight when `q` equals the
/// true conditional.
pub fn variational_mi_lower_bound<'a, I, Q>(joint_samples: I, q: Q, marginal_entropy: f64) -> McEstimate
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
    Q: Fn(&[f64]) -> (Vec<f64>, Vec<f64>),
{
    let mut est = McEstimate::from_samples(joint_samples.into_iter().map(|(c, tau)| {
        let (mu, sigma) = q(tau);
        diag_gaussian_log_density(c, &mu, &sigma)
    }));
    est.mean += marginal_entropy;
    est
}

/// One line of the awareness embedding dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AwarenessRecord {
    pub episode: usize,
    pub t: usize,
    pub i: usize,
    pub j: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub c: Vec<f64>,
    pub eps: Vec<f64>,
}

impl AwarenessRecord {
    pub fn from_set(episode: usize, t: usize, set: &AwarenessSet) -> Vec<AwarenessRecord> {
        (0..set.n_targets())
            .map(|j| AwarenessRecord {
                episode,
                t,
                i: set.agent_id,
                j,
                mu: set.mu.row(j).to_vec(),
                sigma: set.sigma.row(j).to_vec(),
                c: set.samples.row(j).to_vec(),
                eps: set.noise.row(j).to_vec(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(p: &mut ParameterSet) {
        for id in p.ids().collect::<Vec<_>>() {
            p.values_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn traj(agent_id: usize, hidden: Vec<f64>) -> TrajectoryState {
        TrajectoryState {
            hidden,
            agent_id,
            timestep: 0,
        }
    }

    #[test]
    fn zero_encoder_gives_unit_softplus_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParameterSet::new();
        let enc = AwarenessEncoder::register(&mut p, "enc", 64, 64, 2, 3, true, &mut rng).unwrap();
        zeroed(&mut p);
        let set = enc.encode_awareness(&p, &traj(1, vec![0.7; 64])).unwrap();
        assert!(set.mu.as_slice().iter().all(|&m| m == 0.0));
        for &s in set.sigma.as_slice() {
            assert!((s - 0.6933).abs() < 1e-4);
            assert_eq!(s, std::f64::consts::LN_2 + SIGMA_FLOOR);
        }
    }

    #[test]
    fn encoder_shapes_for_ten_agents() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParameterSet::new();
        let enc = AwarenessEncoder::register(&mut p, "enc", 64, 64, 10, 3, true, &mut rng).unwrap();
        let set = enc.encode_awareness(&p, &traj(4, vec![0.1; 64])).unwrap();
        assert_eq!((set.mu.rows(), set.mu.cols()), (10, 3));
        assert_eq!((set.sigma.rows(), set.sigma.cols()), (10, 3));
        assert_eq!(set, enc.encode_awareness(&p, &traj(4, vec![0.1; 64])).unwrap());
        assert!(set.sigma.as_slice().iter().all(|&s| s >= SIGMA_FLOOR));
    }

    #[test]
    fn encoder_rejects_wrong_trajectory_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParameterSet::new();
        let enc = AwarenessEncoder::register(&mut p, "enc", 64, 64, 2, 3, true, &mut rng).unwrap();
        assert!(matches!(enc.encode_awareness(&p, &traj(0, vec![0.0; 10])), Err(Error::Config(_))));
    }

    fn set_with(mu: f64, sigma: f64) -> AwarenessSet {
        AwarenessSet {
            agent_id: 0,
            mu: Matrix::from_vec(1, 3, vec![mu; 3]),
            sigma: Matrix::from_vec(1, 3, vec![sigma; 3]),
            samples: Matrix::zeros(0, 3),
            noise: Matrix::zeros(0, 3),
        }
    }

    #[test]
    fn pinned_noise_sampling() {
        let mut s = set_with(0.0, 0.5);
        s.sample_with_noise(Matrix::from_vec(1, 3, vec![1.0; 3]));
        assert_eq!(s.samples.as_slice(), &[0.5, 0.5, 0.5]);

        let mut s = set_with(0.3, SIGMA_FLOOR);
        let eps = vec![2.5, -1.0, 0.7];
        s.sample_with_noise(Matrix::from_vec(1, 3, eps.clone()));
        for (c, e) in s.samples.as_slice().iter().zip(&eps) {
            assert!((c - 0.3).abs() <= SIGMA_FLOOR * e.abs() + 1e-15);
        }
    }

    #[test]
    fn sample_mean_within_four_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mu = 0.8;
        let sigma = 1.7;
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let mut s = set_with(mu, sigma);
            sum += s.sample(&mut rng).get(0, 0);
        }
        let se = sigma / (n as f64).sqrt();
        assert!((sum / n as f64 - mu).abs() < 4.0 * se);
    }

    #[test]
    fn reparameterization_gradients() {
        let dc = Matrix::from_vec(1, 2, vec![1.0, 1.0]);
        let eps = Matrix::from_vec(1, 2, vec![0.3, -2.0]);
        let (dmu, dsigma) = reparameterize_backward(&dc, &eps);
        assert_eq!(dmu.as_slice(), &[1.0, 1.0]);
        assert_eq!(dsigma.as_slice(), &[0.3, -2.0]);
    }

    #[test]
    fn zero_posterior_and_execution_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParameterSet::new();
        let est = PosteriorEstimator::register(&mut p, "post", 64, 64, 2, 3, &mut rng).unwrap();
        let a = traj(0, (0..64).map(|k| (k as f64 * 0.1).sin()).collect());
        let b = traj(1, (0..64).map(|k| (k as f64 * 0.3).cos()).collect());

        let out = est.posterior_estimate(&p, &a, &b, ExecutionMode::CentralizedTraining).unwrap();
        assert_eq!(out.mu.len(), 3);
        assert_eq!(out.sigma.len(), 3);
        let swapped = est.posterior_estimate(&p, &b, &a, ExecutionMode::CentralizedTraining).unwrap();
        assert_ne!(out, swapped);

        assert!(matches!(
            est.posterior_estimate(&p, &a, &b, ExecutionMode::DecentralizedExecution),
            Err(Error::Contract(_))
        ));

        zeroed(&mut p);
        let out = est.posterior_estimate(&p, &a, &b, ExecutionMode::CentralizedTraining).unwrap();
        assert_eq!(out.mu, vec![0.0; 3]);
        assert!(out.sigma.iter().all(|s| (s - 0.6933).abs() < 1e-4));
    }

    #[test]
    fn kl_reference_values() {
        assert_eq!(kl_diag_gaussian(&[0.3, -1.0], &[0.5, 2.0], &[0.3, -1.0], &[0.5, 2.0]).unwrap(), 0.0);
        assert!((kl_diag_gaussian(&[0.0], &[1.0], &[1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        // Independent evaluation: 0.5 (2 − 1 − ln 2).
        let want = 0.5 * (2.0 - 1.0 - 2f64.ln());
        let got = kl_diag_gaussian(&[0.0], &[2f64.sqrt()], &[0.0], &[1.0]).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.1534).abs() < 1e-4);
        assert!(matches!(kl_diag_gaussian(&[0.0], &[0.0], &[0.0], &[1.0]), Err(Error::Contract(_))));
        assert!(kl_diag_gaussian(&[0.0], &[1.0], &[0.0], &[-1.0]).is_err());
    }

    fn pair(i: usize, j: usize, p: (f64, f64), q: (f64, f64), rows: usize) -> PairDistributions {
        PairDistributions {
            i,
            j,
            p_mu: Matrix::from_vec(rows, 1, vec![p.0; rows]),
            p_sigma: Matrix::from_vec(rows, 1, vec![p.1; rows]),
            q_mu: Matrix::from_vec(rows, 1, vec![q.0; rows]),
            q_sigma: Matrix::from_vec(rows, 1, vec![q.1; rows]),
        }
    }

    #[test]
    fn awareness_loss_identity_and_additivity() {
        let same: Vec<_> = (0..4).map(|k| pair(k / 2, k % 2, (0.2, 0.7), (0.2, 0.7), 5)).collect();
        let (loss, _) = awareness_learning_loss(2, &same, 5, false).unwrap();
        assert_eq!(loss.total, 0.0);

        // KL(N(0,1) ‖ N(μ,1)) = μ²/2 = 0.1 for μ = √0.2.
        let mq = 0.2f64.sqrt();
        let pairs: Vec<_> = (0..4).map(|k| pair(k / 2, k % 2, (0.0, 1.0), (mq, 1.0), 3)).collect();
        let (loss, _) = awareness_learning_loss(2, &pairs, 3, false).unwrap();
        for row in &loss.kl {
            for v in row {
                assert!((v - 0.1).abs() < 1e-12);
            }
        }
        assert!((loss.total - 0.4).abs() < 1e-12);

        assert!(matches!(awareness_learning_loss(2, &pairs, 0, false), Err(Error::Contract(_))));
    }

    #[test]
    fn entropy_reference_values() {
        let h = gaussian_entropy(&[1.0; 3]);
        let want = 1.5 * (2.0 * PI * std::f64::consts::E).ln();
        assert!((h - want).abs() < 1e-12);
        assert!((h - 4.2568).abs() < 1e-4);
        let shift = gaussian_entropy(&[2.0, 0.6, 3.0]) - gaussian_entropy(&[1.0, 0.3, 1.5]);
        assert!((shift - 3.0 * 2f64.ln()).abs() < 1e-12);
        assert!((shift - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn variance_summary_is_mean_scale() {
        let s = AwarenessSet {
            agent_id: 1,
            mu: Matrix::zeros(2, 3),
            sigma: Matrix::from_vec(2, 3, vec![1.0, 1.0, 1.0, 0.2, 0.4, 0.6]),
            samples: Matrix::zeros(0, 3),
            noise: Matrix::zeros(0, 3),
        };
        assert!((variance_summary(&s, 1).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(variance_summary(&s, 0).unwrap(), 1.0);
        assert!(variance_summary(&s, 2).is_err());
        let floor = set_with(0.0, SIGMA_FLOOR);
        assert!((variance_summary(&floor, 0).unwrap() - SIGMA_FLOOR).abs() < 1e-18);
    }

    #[test]
    fn mc_estimate_statistics() {
        let e = McEstimate::from_samples([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        assert!((e.std_error - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }
}
