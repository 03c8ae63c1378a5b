//! Property suites behind `linda verify`.

use linda_core::awareness::{
    awareness_learning_loss, gaussian_entropy, kl_diag_gaussian, kl_monte_carlo,
    variational_mi_lower_bound, AwarenessEncoder, PairDistributions, PosteriorEstimator,
};
use linda_core::config::ModelConfig;
use linda_core::diffcore::{
    finite_diff_check, Activation, Coverage, Dense, DenseAct, GradCheckConfig, GradCheckReport, GradientTape, GruCell,
    Matrix, ParamId, ParameterSet,
};
use linda_core::env::{EnvConfig, LbfEnv};
use linda_core::mixer::{igm_check, Mixer, MixerConfig, MixerInput, MixerKind};
use linda_core::trainer::{collect_episode, compute_loss, BatchNoise, LossConfig, Model, ModelDims, SortedBatch};
use linda_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub suite: String,
    pub name: String,
    pub metric: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub lines: Vec<CheckLine>,
    pub passed: bool,
}

impl SuiteReport {
    fn new(suite: &str, lines: Vec<CheckLine>) -> Self {
        let passed = lines.iter().all(|l| l.passed);
        SuiteReport {
            suite: suite.to_string(),
            lines,
            passed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Gradcheck,
    Igm,
    Kl,
    Bound,
    All,
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Perturbs one analytic gradient entry per check (negative control).
    pub corrupt_backward: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 7,
            corrupt_backward: false,
        }
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    Ok(match suite {
        Suite::Gradcheck => vec![gradcheck_suite(opts)?],
        Suite::Igm => vec![igm_suite(1000, opts.seed)?],
        Suite::Kl => vec![kl_suite(opts.seed, 10_000, 100, 100_000)],
        Suite::Bound => vec![bound_suite(opts.seed, 20, 100_000)],
        Suite::All => vec![
            gradcheck_suite(opts)?,
            igm_suite(1000, opts.seed)?,
            kl_suite(opts.seed, 10_000, 100, 100_000),
            bound_suite(opts.seed, 20, 100_000),
        ],
    })
}

// ---------------------------------------------------------------- gradients

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn insert_matrix(params: &mut ParameterSet, name: &str, m: &Matrix) -> Result<ParamId> {
    params.insert(name, vec![m.rows(), m.cols()], m.as_slice().to_vec())
}

fn view(params: &ParameterSet, id: ParamId, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, params.values(id).to_vec())
}

fn write_grad(tape: &mut GradientTape, id: ParamId, m: &Matrix) {
    for (g, v) in tape.grad_mut(id).iter_mut().zip(m.as_slice()) {
        *g += v;
    }
}

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

fn corrupt(tape: &mut GradientTape, params: &ParameterSet) {
    if let Some(id) = params.ids().next() {
        let g = &mut tape.grad_mut(id)[0];
        *g += 0.1 * (g.abs() + 1.0);
    }
}

fn grad_line(name: &str, report: &GradCheckReport) -> CheckLine {
    let worst = report
        .arrays
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .map(|a| format!("worst {} (analytic {:.6e}, numeric {:.6e})", a.name, a.analytic, a.numeric))
        .unwrap_or_default();
    let checked: usize = report.arrays.iter().map(|a| a.checked).sum();
    CheckLine {
        suite: "gradcheck".into(),
        name: name.into(),
        metric: report.max_rel_err,
        threshold: report.tolerance,
        passed: report.passed,
        detail: format!("{checked} coordinates; {worst}"),
    }
}

fn finish_check<F: Fn(&ParameterSet) -> f64>(
    name: &str,
    f: F,
    params: &ParameterSet,
    mut tape: GradientTape,
    coverage: Coverage,
    opts: &VerifyOptions,
) -> CheckLine {
    if opts.corrupt_backward {
        corrupt(&mut tape, params);
    }
    let cfg = GradCheckConfig {
        coverage,
        ..GradCheckConfig::default()
    };
    grad_line(name, &finite_diff_check(f, params, &tape, cfg))
}

fn dense_check(act: Activation, opts: &VerifyOptions) -> Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xD1);
    let mut p = ParameterSet::new();
    let layer = DenseAct {
        dense: Dense::register(&mut p, "dense", 4, 3, &mut rng)?,
        act,
    };
    // Non-zero biases keep every pre-activation away from the ReLU kink.
    for v in p.values_mut(layer.dense.bias) {
        *v = rng.random_range(-0.5..0.5);
    }
    let x = random_matrix(&mut rng, 5, 4, 1.0);
    let xid = insert_matrix(&mut p, "x", &x)?;
    let proj = random_matrix(&mut rng, 5, 3, 1.0);
    let f = |p: &ParameterSet| {
        let (y, _) = layer.forward(p, view(p, xid, 5, 4)).unwrap();
        dot(&y, &proj)
    };
    let mut tape = GradientTape::zeros_like(&p);
    let (_, cache) = layer.forward(&p, x)?;
    let dx = layer.backward(&p, &cache, &proj, &mut tape, true).expect("input grad");
    write_grad(&mut tape, xid, &dx);
    Ok(finish_check(&format!("dense_{act:?}").to_lowercase(), f, &p, tape, Coverage::All, opts))
}

fn gru_check(opts: &VerifyOptions) -> Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x62);
    let mut p = ParameterSet::new();
    let cell = GruCell::register(&mut p, "gru", 4, 5, &mut rng)?;
    let x = random_matrix(&mut rng, 3, 4, 1.0);
    let h = random_matrix(&mut rng, 3, 5, 1.0);
    let xid = insert_matrix(&mut p, "x", &x)?;
    let hid = insert_matrix(&mut p, "h", &h)?;
    let proj = random_matrix(&mut rng, 3, 5, 1.0);
    let f = |p: &ParameterSet| {
        let (y, _) = cell.forward(p, view(p, xid, 3, 4), view(p, hid, 3, 5)).unwrap();
        dot(&y, &proj)
    };
    let mut tape = GradientTape::zeros_like(&p);
    let (_, cache) = cell.forward(&p, x, h)?;
    let (dx, dh) = cell.backward(&p, &cache, &proj, &mut tape, true);
    write_grad(&mut tape, xid, &dx.expect("input grad"));
    write_grad(&mut tape, hid, &dh);
    Ok(finish_check("gru", f, &p, tape, Coverage::All, opts))
}

fn encoder_check(opts: &VerifyOptions) -> Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xE7);
    let mut p = ParameterSet::new();
    let enc = AwarenessEncoder::register(&mut p, "enc", 6, 5, 2, 3, true, &mut rng)?;
    let tau = random_matrix(&mut rng, 4, 6, 1.0);
    let tid = insert_matrix(&mut p, "tau", &tau)?;
    let pm = random_matrix(&mut rng, 4, 6, 1.0);
    let ps = random_matrix(&mut rng, 4, 6, 1.0);
    let f = |p: &ParameterSet| {
        let (mu, sigma, _) = enc.forward(p, &view(p, tid, 4, 6), 1).unwrap();
        dot(&mu, &pm) + dot(&sigma, &ps)
    };
    let mut tape = GradientTape::zeros_like(&p);
    let (_, _, cache) = enc.forward(&p, &tau, 1)?;
    let dtau = enc.backward(&p, &cache, &pm, &ps, &mut tape);
    write_grad(&mut tape, tid, &dtau);
    Ok(finish_check("awareness_encoder", f, &p, tape, Coverage::All, opts))
}

fn estimator_check(opts: &VerifyOptions) -> Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xE5);
    let mut p = ParameterSet::new();
    let est = PosteriorEstimator::register(&mut p, "est", 6, 5, 2, 3, &mut rng)?;
    let ts = random_matrix(&mut rng, 4, 6, 1.0);
    let to = random_matrix(&mut rng, 4, 6, 1.0);
    let sid = insert_matrix(&mut p, "tau_self", &ts)?;
    let oid = insert_matrix(&mut p, "tau_other", &to)?;
    let pm = random_matrix(&mut rng, 4, 3, 1.0);
    let ps = random_matrix(&mut rng, 4, 3, 1.0);
    let f = |p: &ParameterSet| {
        let (mu, sigma, _) = est
            .forward(p, &view(p, sid, 4, 6), &view(p, oid, 4, 6), 0, 1)
            .unwrap();
        dot(&mu, &pm) + dot(&sigma, &ps)
    };
    let mut tape = GradientTape::zeros_like(&p);
    let (_, _, cache) = est.forward(&p, &ts, &to, 0, 1)?;
    let (ds, dother) = est.backward(&p, &cache, &pm, &ps, &mut tape);
    write_grad(&mut tape, sid, &ds);
    write_grad(&mut tape, oid, &dother);
    Ok(finish_check("posterior_estimator", f, &p, tape, Coverage::All, opts))
}

fn kl_loss_check(opts: &VerifyOptions) -> Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4B);
    let mut p = ParameterSet::new();
    let (n, rows, d) = (2, 3, 3);
    let mut ids = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let mut four = Vec::new();
            for (k, positive) in [false, true, false, true].into_iter().enumerate() {
                let m = if positive {
                    Matrix::from_fn(rows, d, |_, _| rng.random_range(0.3..1.5))
                } else {
                    random_matrix(&mut rng, rows, d, 1.0)
                };
                four.push(insert_matrix(&mut p, &format!("pair{i}{j}.{k}"), &m)?);
            }
            ids.push((i, j, four));
        }
    }
    let pairs_of = |p: &ParameterSet| -> Vec<PairDistributions> {
        ids.iter()
            .map(|(i, j, f)| PairDistributions {
                i: *i,
                j: *j,
                p_mu: view(p, f[0], rows, d),
                p_sigma: view(p, f[1], rows, d),
                q_mu: view(p, f[2], rows, d),
                q_sigma: view(p, f[3], rows, d),
            })
            .collect()
    };
    let f = |p: &ParameterSet| awareness_learning_loss(n, &pairs_of(p), 5, false).unwrap().0.total;
    let mut tape = GradientTape::zeros_like(&p);
    let (_, grads) = awareness_learning_loss(n, &pairs_of(&p), 5, true)?;
    for ((_, _, f), g) in ids.iter().zip(&grads) {
        write_grad(&mut tape, f[0], &g.d_p_mu);
        write_grad(&mut tape, f[1], &g.d_p_sigma);
        write_grad(&mut tape, f[2], &g.d_q_mu);
        write_grad(&mut tape, f[3], &g.d_q_sigma);
    }
    Ok(finish_check("awareness_kl_loss", f, &p, tape, Coverage::All, opts))
}

fn mixer_check(kind: MixerKind, opts: &VerifyOptions) -> Result<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x3C);
    let (n, a, s, rows) = (3, 4, 5, 4);
    let mut p = ParameterSet::new();
    let mixer = Mixer::register(
        &mut p,
        MixerConfig {
            kind,
            n_agents: n,
            n_actions: a,
            state_dim: s,
            embed_dim: 6,
            hypernet_hidden: 5,
        },
        &mut rng,
    )?;
    mixer.randomize(&mut p, 0.8, &mut rng);
    let qids: Vec<ParamId> = (0..n)
        .map(|i| insert_matrix(&mut p, &format!("q{i}"), &random_matrix(&mut rng, rows, a, 2.0)))
        .collect::<Result<_>>()?;
    let actions: Vec<Vec<usize>> = (0..n).map(|_| (0..rows).map(|_| rng.random_range(0..a)).collect()).collect();
    let state = random_matrix(&mut rng, rows, s, 1.0);
    let proj: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
    let q_of = |p: &ParameterSet| -> Vec<Matrix> { qids.iter().map(|&id| view(p, id, rows, a)).collect() };
    let f = |p: &ParameterSet| {
        let q = q_of(p);
        let out = mixer
            .forward(p, &MixerInput { q_rows: &q, actions: &actions, state: Some(&state) })
            .unwrap();
        out.q_tot.iter().zip(&proj).map(|(x, w)| x * w).sum()
    };
    let q = q_of(&p);
    let input = MixerInput {
        q_rows: &q,
        actions: &actions,
        state: Some(&state),
    };
    let fwd = mixer.forward(&p, &input)?;
    let mut tape = GradientTape::zeros_like(&p);
    let dq = mixer.backward(&p, &input, &fwd, &proj, &mut tape);
    for (&id, g) in qids.iter().zip(&dq) {
        write_grad(&mut tape, id, g);
    }
    Ok(finish_check(&format!("mixer_{kind}"), f, &p, tape, Coverage::All, opts))
}

/// Full objective on a pinned-noise batch of two 3-step episodes.
fn full_loss_check(kind: MixerKind, model_cfg: &ModelConfig, coverage: Coverage, label: &str, opts: &VerifyOptions) -> Result<CheckLine> {
    let env = EnvConfig {
        episode_limit: 3,
        seed: opts.seed,
        ..EnvConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xF0);
    let dims = ModelDims {
        obs_dim: env.obs_dim(),
        n_actions: linda_core::env::N_ACTIONS,
        n_agents: env.n_agents,
        state_dim: env.state_dim(),
    };
    let mut params = ParameterSet::new();
    let model = Model::build(&mut params, dims, model_cfg, kind, &mut rng)?;
    // Move biases off zero so that no two action values tie exactly.
    for id in params.ids().collect::<Vec<_>>() {
        for v in params.values_mut(id) {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let mut target = params.clone();
    for id in target.ids().collect::<Vec<_>>() {
        for v in target.values_mut(id) {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let mut lbf = LbfEnv::new(env)?;
    let episodes = (0..2)
        .map(|_| collect_episode(&mut lbf, &model.agent, &params, 1.0, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = episodes.iter().collect();
    let batch = SortedBatch::new(&refs)?;
    let noise = BatchNoise::sample(&model, &batch, false, &mut rng);
    let cfg = LossConfig {
        gamma: 0.99,
        lambda: 1.0,
        double_q: false,
        bootstrap_timeouts: false,
    };
    let mut tape = GradientTape::zeros_like(&params);
    compute_loss(&model, &params, &target, &batch, &noise, &cfg, Some(&mut tape))?;
    let f = |p: &ParameterSet| compute_loss(&model, p, &target, &batch, &noise, &cfg, None).unwrap().total;
    Ok(finish_check(&format!("full_loss_{kind}_{label}"), f, &params, tape, coverage, opts))
}

pub fn gradcheck_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut lines = Vec::new();
    for act in [
        Activation::Relu,
        Activation::LeakyRelu,
        Activation::Elu,
        Activation::Logistic,
        Activation::Tanh,
        Activation::Softplus,
    ] {
        lines.push(dense_check(act, opts)?);
    }
    lines.push(gru_check(opts)?);
    lines.push(encoder_check(opts)?);
    lines.push(estimator_check(opts)?);
    lines.push(kl_loss_check(opts)?);
    let small = ModelConfig {
        hidden_dim: 8,
        awareness_dim: 2,
        encoder_hidden: 6,
        estimator_hidden: 6,
        utility_hidden: 6,
        mixer_embed: 4,
        hypernet_hidden: 4,
        ..ModelConfig::default()
    };
    for kind in [MixerKind::Vdn, MixerKind::Qmix, MixerKind::Qplex] {
        lines.push(mixer_check(kind, opts)?);
        lines.push(full_loss_check(kind, &small, Coverage::All, "small_all", opts)?);
        lines.push(full_loss_check(
            kind,
            &ModelConfig::default(),
            Coverage::Sample {
                per_array: 6,
                seed: opts.seed,
            },
            "default_sampled",
            opts,
        )?);
    }
    Ok(SuiteReport::new("gradcheck", lines))
}

// ---------------------------------------------------------------------- IGM

pub fn igm_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1C);
    let mut lines = Vec::new();
    for kind in [MixerKind::Vdn, MixerKind::Qmix, MixerKind::Qplex] {
        for n in [2, 3] {
            for a in [3, 4] {
                let mut p = ParameterSet::new();
                let mixer = Mixer::register(
                    &mut p,
                    MixerConfig {
                        kind,
                        n_agents: n,
                        n_actions: a,
                        state_dim: 6,
                        embed_dim: 32,
                        hypernet_hidden: 32,
                    },
                    &mut rng,
                )?;
                let r = igm_check(&mixer, &mut p, trials, &mut rng)?;
                lines.push(CheckLine {
                    suite: "igm".into(),
                    name: format!("{kind}_n{n}_a{a}"),
                    metric: r.violations as f64,
                    threshold: 0.0,
                    passed: r.violations == 0,
                    detail: format!("{} violations / {} trials", r.violations, r.trials),
                });
            }
        }
    }
    Ok(SuiteReport::new("igm", lines))
}

// ----------------------------------------------------------------------- KL

fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> (Vec<f64>, Vec<f64>) {
    (
        (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
        (0..d).map(|_| rng.random_range(0.2..2.0)).collect(),
    )
}

pub fn kl_suite(seed: u64, random_pairs: usize, mc_pairs: usize, mc_samples: usize) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4C);
    let d = 3;
    let mut min_kl = f64::INFINITY;
    let mut max_equal = 0.0f64;
    for _ in 0..random_pairs {
        let (mp, sp) = random_gaussian(&mut rng, d);
        let (mq, sq) = random_gaussian(&mut rng, d);
        min_kl = min_kl.min(kl_diag_gaussian(&mp, &sp, &mq, &sq).unwrap_or(f64::NEG_INFINITY));
        max_equal = max_equal.max(kl_diag_gaussian(&mp, &sp, &mp, &sp).unwrap_or(f64::INFINITY).abs());
    }
    let mut worst_z = 0.0f64;
    let mut outside = 0;
    for _ in 0..mc_pairs {
        let (mp, sp) = random_gaussian(&mut rng, d);
        let (mq, sq) = random_gaussian(&mut rng, d);
        let exact = kl_diag_gaussian(&mp, &sp, &mq, &sq).unwrap_or(f64::NAN);
        let mc = kl_monte_carlo(&mp, &sp, &mq, &sq, mc_samples, &mut rng);
        let z = (exact - mc.mean).abs() / mc.std_error;
        if !(z <= 3.0) {
            outside += 1;
        }
        worst_z = worst_z.max(if z.is_nan() { f64::INFINITY } else { z });
    }
    SuiteReport::new(
        "kl",
        vec![
            CheckLine {
                suite: "kl".into(),
                name: "non_negative".into(),
                metric: min_kl,
                threshold: 0.0,
                passed: min_kl >= 0.0,
                detail: format!("minimum KL over {random_pairs} random pairs"),
            },
            CheckLine {
                suite: "kl".into(),
                name: "zero_on_equal".into(),
                metric: max_equal,
                threshold: 1e-12,
                passed: max_equal < 1e-12,
                detail: format!("max |KL(p‖p)| over {random_pairs} pairs"),
            },
            CheckLine {
                suite: "kl".into(),
                name: "closed_form_vs_monte_carlo".into(),
                metric: worst_z,
                threshold: 3.0,
                passed: outside == 0,
                detail: format!("{outside} of {mc_pairs} pairs outside 3 SE at {mc_samples} samples; worst |z| = {worst_z:.3}"),
            },
        ],
    )
}

// -------------------------------------------------------------------- bound

/// One synthetic setting: `τ ~ N(0, I)`, `c = ρ⊙τ + √(1−ρ²)⊙ξ`, so
/// `I(c; τ) = −½ Σ ln(1 − ρ²)` and `H(c) = ½ d ln(2πe)`.
#[derive(Clone, Debug, Serialize)]
pub struct BoundSetting {
    pub rho: Vec<f64>,
    pub true_mi: f64,
    pub exact_q_bound: f64,
    pub exact_q_se: f64,
    pub perturbed_q_bound: f64,
    pub perturbed_q_se: f64,
}

pub fn bound_setting(rng: &mut ChaCha8Rng, d: usize, samples: usize) -> BoundSetting {
    let rho: Vec<f64> = (0..d).map(|_| rng.random_range(-0.95..0.95)).collect();
    let true_mi = -0.5 * rho.iter().map(|r| (1.0 - r * r).ln()).sum::<f64>();
    let cond_sd: Vec<f64> = rho.iter().map(|r| (1.0 - r * r).sqrt()).collect();
    let slope_err: Vec<f64> = (0..d).map(|_| 1.0 + rng.random_range(-0.3..0.3)).collect();
    let scale_err: Vec<f64> = (0..d).map(|_| 1.0 + rng.random_range(-0.3..0.3)).collect();
    let mut pairs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let tau: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let c: Vec<f64> = (0..d)
            .map(|k| {
                let xi: f64 = rng.sample(StandardNormal);
                rho[k] * tau[k] + cond_sd[k] * xi
            })
            .collect();
        pairs.push((c, tau));
    }
    let h_c = gaussian_entropy(&vec![1.0; d]);
    let exact = variational_mi_lower_bound(
        pairs.iter().map(|(c, t)| (c.as_slice(), t.as_slice())),
        |tau| ((0..d).map(|k| rho[k] * tau[k]).collect(), cond_sd.clone()),
        h_c,
    );
    let perturbed = variational_mi_lower_bound(
        pairs.iter().map(|(c, t)| (c.as_slice(), t.as_slice())),
        |tau| {
            (
                (0..d).map(|k| rho[k] * slope_err[k] * tau[k]).collect(),
                (0..d).map(|k| cond_sd[k] * scale_err[k]).collect(),
            )
        },
        h_c,
    );
    BoundSetting {
        rho,
        true_mi,
        exact_q_bound: exact.mean,
        exact_q_se: exact.std_error,
        perturbed_q_bound: perturbed.mean,
        perturbed_q_se: perturbed.std_error,
    }
}

pub fn bound_suite(seed: u64, settings: usize, samples: usize) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0);
    let mut lines = Vec::new();
    for k in 0..settings {
        let s = bound_setting(&mut rng, 3, samples);
        let excess = |b: f64, se: f64| (b - s.true_mi) / se;
        let z_exact = excess(s.exact_q_bound, s.exact_q_se);
        let z_pert = excess(s.perturbed_q_bound, s.perturbed_q_se);
        let z = z_exact.max(z_pert);
        lines.push(CheckLine {
            suite: "bound".into(),
            name: format!("setting_{k:02}"),
            metric: z,
            threshold: 3.0,
            passed: z <= 3.0,
            detail: format!(
                "true MI {:.5}; exact q {:.5} ± {:.5}; perturbed q {:.5} ± {:.5}",
                s.true_mi, s.exact_q_bound, s.exact_q_se, s.perturbed_q_bound, s.perturbed_q_se
            ),
        });
    }
    SuiteReport::new("bound", lines)
}
