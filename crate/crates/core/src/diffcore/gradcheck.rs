//! Central finite-difference comparison against analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::{GradientTape, ParameterSet};

/// Which scalars of each array get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many coordinates per array, chosen with the given seed.
    Sample { per_array: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that gradients that are
    /// zero up to roundoff do not register as failures.
    pub floor: f64,
    pub coverage: Coverage,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            coverage: Coverage::All,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ArrayReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub arrays: Vec<ArrayReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &ArrayReport> {
        self.arrays
            .iter()
            .filter(move |a| a.max_rel_err >= self.tolerance)
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f` at `params`.
///
/// `f` must be deterministic: any stochastic node has to be pinned to fixed
/// noise by the caller.
pub fn finite_diff_check<F>(
    f: F,
    params: &ParameterSet,
    analytic: &GradientTape,
    config: GradCheckConfig,
) -> GradCheckReport
where
    F: Fn(&ParameterSet) -> f64,
{
    assert!(analytic.is_aligned_with(params), "gradient tape not aligned");
    let mut work = params.clone();
    let mut arrays = Vec::with_capacity(params.len());
    for id in params.ids() {
        let len = params.values(id).len();
        let coords: Vec<usize> = match config.coverage {
            Coverage::All => (0..len).collect(),
            Coverage::Sample { per_array, seed } => {
                if len <= per_array {
                    (0..len).collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id.index() as u64) << 20);
                    let mut v = index::sample(&mut rng, len, per_array).into_vec();
                    v.sort_unstable();
                    v
                }
            }
        };
        let mut report = ArrayReport {
            name: params.tensor(id).name.clone(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in coords {
            let orig = work.values(id)[k];
            work.values_mut(id)[k] = orig + config.step;
            let plus = f(&work);
            work.values_mut(id)[k] = orig - config.step;
            let minus = f(&work);
            work.values_mut(id)[k] = orig;
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic.grad(id)[k];
            let rel = relative_error(a, numeric, config.floor);
            // NaN compares false, so force it to register as a failure.
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        arrays.push(report);
    }
    let max_rel_err = arrays.iter().map(|a| a.max_rel_err).fold(0.0, f64::max);
    GradCheckReport {
        passed: max_rel_err < config.tolerance,
        arrays,
        max_rel_err,
        tolerance: config.tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f(w) = ½ wᵀAw + bᵀw with symmetric A.
    fn quadratic() -> (ParameterSet, impl Fn(&ParameterSet) -> f64, GradientTape) {
        let a = [[2.0, 0.5, -0.3], [0.5, 1.0, 0.2], [-0.3, 0.2, 3.0]];
        let b = [0.1, -0.4, 0.7];
        let mut p = ParameterSet::new();
        let id = p.insert("w", vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let f = move |p: &ParameterSet| {
            let w = p.values(id);
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += 0.5 * w[i] * a[i][j] * w[j];
                }
                s += b[i] * w[i];
            }
            s
        };
        let mut g = GradientTape::zeros_like(&p);
        let w = p.values(id).to_vec();
        for i in 0..3 {
            g.grad_mut(id)[i] = (0..3).map(|j| a[i][j] * w[j]).sum::<f64>() + b[i];
        }
        (p, f, g)
    }

    #[test]
    fn quadratic_form_is_exact_to_roundoff() {
        let (p, f, g) = quadratic();
        let report = finite_diff_check(f, &p, &g, GradCheckConfig::default());
        assert!(report.max_rel_err < 1e-8, "{report:?}");
        assert!(report.passed);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let (p, f, mut g) = quadratic();
        let id = p.id("w").unwrap();
        g.grad_mut(id)[1] *= 1.01;
        let report = finite_diff_check(f, &p, &g, GradCheckConfig::default());
        assert!(!report.passed);
        assert_eq!(report.failures().count(), 1);
        assert_eq!(report.arrays[0].worst_index, 1);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(0.0, 1e-12, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((relative_error(1.0, 1.1, 1e-6) - 0.1 / 1.1).abs() < 1e-15);
    }
}
