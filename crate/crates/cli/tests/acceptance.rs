//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criterion 5 reads cached long runs from `acceptance/lbf` (see
//! `scripts/lbf_reproduction.sh`); the others run from scratch.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use linda_cli::verify::{run_suite, SuiteReport, Suite, VerifyOptions};

const GRAD_REL_TOL: f64 = 1e-4;
const SUITE_BUDGET: Duration = Duration::from_secs(60);
const IGM_TRIALS: usize = 1000;
const KL_ZERO_TOL: f64 = 1e-12;
const MC_SE_LIMIT: f64 = 3.0;
const BOUND_SE_LIMIT: f64 = 3.0;
const LBF_STEPS: usize = 500_000;
const LBF_SEEDS: [u64; 3] = [1, 2, 3];
const LBF_MIN_RETURN: f64 = 0.80;
const LBF_MARGIN: f64 = 0.05;

struct Verdict {
    passed: bool,
    /// Hard gates fail the target; observational criteria only report.
    gate: bool,
    detail: String,
}

fn linda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_linda"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lbf_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../acceptance/lbf")
}

fn worst(report: &SuiteReport) -> &linda_cli::verify::CheckLine {
    report
        .lines
        .iter()
        .max_by(|a, b| (a.metric / a.threshold).total_cmp(&(b.metric / b.threshold)))
        .unwrap()
}

fn timed_suite(suite: Suite) -> (SuiteReport, Duration) {
    let start = Instant::now();
    let mut reports = run_suite(suite, &VerifyOptions::default()).expect("suite runs");
    (reports.remove(0), start.elapsed())
}

fn c1_gradients() -> Verdict {
    let (r, took) = timed_suite(Suite::Gradcheck);
    let max_err = r.lines.iter().map(|l| l.metric).fold(0.0, f64::max);
    let w = worst(&r);
    Verdict {
        passed: r.passed && max_err < GRAD_REL_TOL && took < SUITE_BUDGET,
        gate: true,
        detail: format!(
            "{} checks, max rel err {max_err:.2e} (< {GRAD_REL_TOL:e}, worst {}), {:.1}s",
            r.lines.len(),
            w.name,
            took.as_secs_f64()
        ),
    }
}

fn c2_igm() -> Verdict {
    let (r, took) = timed_suite(Suite::Igm);
    let combos = r.lines.len();
    let violations: f64 = r.lines.iter().map(|l| l.metric).sum();
    let trials_ok = r.lines.iter().all(|l| l.detail.ends_with(&format!("/ {IGM_TRIALS} trials")));
    Verdict {
        passed: r.passed && combos == 12 && violations == 0.0 && trials_ok && took < SUITE_BUDGET,
        gate: true,
        detail: format!(
            "{combos} mixer/n/|A| combos x {IGM_TRIALS} instances, {violations} violations, {:.1}s",
            took.as_secs_f64()
        ),
    }
}

fn line<'a>(r: &'a SuiteReport, prefix: &str) -> Option<&'a linda_cli::verify::CheckLine> {
    r.lines.iter().find(|l| l.name.starts_with(prefix))
}

fn c3_kl() -> Verdict {
    let (r, _) = timed_suite(Suite::Kl);
    let nonneg = line(&r, "non_negative");
    let zero = line(&r, "zero_on_equal");
    let mc = line(&r, "closed_form");
    let ok = match (nonneg, zero, mc) {
        (Some(n), Some(z), Some(m)) => {
            n.passed && n.metric >= 0.0 && z.passed && z.metric < KL_ZERO_TOL && m.passed && m.metric <= MC_SE_LIMIT
        }
        _ => false,
    };
    Verdict {
        passed: ok && r.passed,
        gate: true,
        detail: r
            .lines
            .iter()
            .map(|l| format!("{} {:.3e}", l.name, l.metric))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

fn c4_bound() -> Verdict {
    let (r, _) = timed_suite(Suite::Bound);
    let w = worst(&r);
    let z = r
        .lines
        .iter()
        .filter(|l| l.name.starts_with("setting"))
        .map(|l| l.metric)
        .fold(f64::NEG_INFINITY, f64::max);
    Verdict {
        passed: r.passed && z <= BOUND_SE_LIMIT,
        gate: true,
        detail: format!("{} checks, max excess over true MI {z:.2} SE (<= {BOUND_SE_LIMIT}), worst {}", r.lines.len(), w.name),
    }
}

struct CachedRun {
    final_return: f64,
    lambda: f64,
    losses: String,
}

fn cached_run(variant: &str, seed: u64, awareness: bool) -> Result<CachedRun, String> {
    let dir = lbf_root().join(variant).join(format!("seed_{seed}"));
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.join("manifest.json")).map_err(|e| format!("{variant} seed {seed}: {e}"))?,
    )
    .map_err(|e| e.to_string())?;
    let cfg = &manifest["config"];
    let want = [
        ("env.grid_height", "8".to_string()),
        ("env.grid_width", "8".to_string()),
        ("env.n_agents", "2".to_string()),
        ("env.n_foods", "1".to_string()),
        ("mixer", "vdn".to_string()),
        ("model.awareness", awareness.to_string()),
        ("train.total_env_steps", LBF_STEPS.to_string()),
    ];
    for (k, v) in want {
        if cfg[k] != v.as_str() {
            return Err(format!("{variant} seed {seed}: {k} = {} (want {v})", cfg[k]));
        }
    }
    if manifest["seed"] != seed {
        return Err(format!("{variant} seed {seed}: manifest seed {}", manifest["seed"]));
    }
    let mut reader = csv::Reader::from_path(dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    let last = reader
        .records()
        .last()
        .ok_or_else(|| format!("{variant} seed {seed}: empty metrics"))?
        .map_err(|e| e.to_string())?;
    let steps: usize = last[0].parse().map_err(|_| "bad env_steps".to_string())?;
    if steps < LBF_STEPS {
        return Err(format!("{variant} seed {seed}: stopped at {steps} env steps"));
    }
    Ok(CachedRun {
        final_return: last[6].parse().map_err(|_| "bad return".to_string())?,
        lambda: cfg["train.lambda"].as_str().unwrap_or("0").parse().map_err(|_| "bad lambda".to_string())?,
        losses: fs::read_to_string(dir.join("losses.csv")).map_err(|e| e.to_string())?,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c5_lbf() -> (Verdict, Vec<CachedRun>) {
    let mut runs = Vec::new();
    let mut returns = [Vec::new(), Vec::new()];
    for (k, (variant, awareness)) in [("linda_vdn", true), ("vdn", false)].into_iter().enumerate() {
        for seed in LBF_SEEDS {
            match cached_run(variant, seed, awareness) {
                Ok(run) => {
                    returns[k].push(run.final_return);
                    runs.push(run);
                }
                Err(e) => {
                    return (
                        Verdict {
                            passed: false,
                            gate: false,
                            detail: format!("cached run unusable: {e}"),
                        },
                        runs,
                    )
                }
            }
        }
    }
    let (linda, vdn) = (mean(&returns[0]), mean(&returns[1]));
    let a = linda >= LBF_MIN_RETURN;
    let b = linda >= vdn - LBF_MARGIN;
    let verdict = Verdict {
        passed: a && b,
        gate: false,
        detail: format!(
            "LINDA-VDN {linda:.3} {:?}, VDN {vdn:.3} {:?}; (a) >= {LBF_MIN_RETURN}: {}, (b) >= VDN - {LBF_MARGIN}: {}",
            returns[0],
            returns[1],
            if a { "yes" } else { "no" },
            if b { "yes" } else { "no" }
        ),
    };
    (verdict, runs)
}

/// Rows of `losses.csv` whose logged total is not exactly `td + lambda * kl`.
fn arithmetic_mismatches(losses: &str, lambda: f64) -> (usize, usize) {
    let mut rows = 0;
    let mut bad = 0;
    for l in losses.lines().skip(1) {
        let f: Vec<f64> = l.split(',').skip(3).map(|v| v.parse().unwrap()).collect();
        rows += 1;
        if f[2].to_bits() != (f[0] + lambda * f[1]).to_bits() {
            bad += 1;
        }
    }
    (rows, bad)
}

const SHORT: &[&str] = &[
    "--set",
    "train.total_env_steps=3000",
    "--set",
    "train.batch_size=8",
    "--set",
    "train.eval_interval=1000",
    "--set",
    "train.eval_episodes=8",
];

fn train(out: &Path, seed: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--seed", seed, "--out", s(out)];
    args.extend_from_slice(SHORT);
    args.extend_from_slice(extra);
    linda(&args)
}

fn c6_ablation(work: &Path, cached: &[CachedRun]) -> Verdict {
    let out = work.join("ablation");
    let o = train(&out, "4", &["--set", "train.lambda=0"]);
    if !o.status.success() {
        return Verdict {
            passed: false,
            gate: true,
            detail: format!("lambda=0 run failed: {}", String::from_utf8_lossy(&o.stderr)),
        };
    }
    let losses = fs::read_to_string(out.join("seed_4/losses.csv")).unwrap();
    let mut zero_rows = 0;
    let mut kl_seen = false;
    let mut bad = 0;
    for l in losses.lines().skip(1) {
        let f: Vec<f64> = l.split(',').skip(3).map(|v| v.parse().unwrap()).collect();
        zero_rows += 1;
        kl_seen |= f[1] > 0.0;
        if f[2].to_bits() != f[0].to_bits() {
            bad += 1;
        }
    }
    let (mut rows, mut mismatched) = (0, 0);
    let default_run = work.join("determinism/a/seed_9/losses.csv");
    let mut logs: Vec<(String, f64)> = cached.iter().map(|r| (r.losses.clone(), r.lambda)).collect();
    if let Ok(text) = fs::read_to_string(default_run) {
        logs.push((text, 1e-3));
    }
    for (text, lambda) in &logs {
        let (r, b) = arithmetic_mismatches(text, *lambda);
        rows += r;
        mismatched += b;
    }
    Verdict {
        passed: zero_rows > 0 && kl_seen && bad == 0 && mismatched == 0,
        gate: true,
        detail: format!(
            "lambda=0: {zero_rows} steps, total == td bitwise in all but {bad}, kl logged {}; \
             total == td + lambda*kl bitwise on {rows} steps of {} other runs, {mismatched} mismatches",
            if kl_seen { "nonzero" } else { "zero" },
            logs.len()
        ),
    }
}

fn c7_determinism(work: &Path) -> Verdict {
    let root = work.join("determinism");
    let (a, b, c) = (root.join("a"), root.join("b"), root.join("c"));
    for out in [&a, &b] {
        let o = train(out, "9", &[]);
        if !o.status.success() {
            return Verdict {
                passed: false,
                gate: true,
                detail: String::from_utf8_lossy(&o.stderr).into_owned(),
            };
        }
    }
    let manifest = a.join("seed_9/manifest.json");
    let o = linda(&["train", "--config", s(&manifest), "--out", s(&c)]);
    let ma = fs::read(a.join("seed_9/metrics.csv")).unwrap();
    let mb = fs::read(b.join("seed_9/metrics.csv")).unwrap();
    let mc = fs::read(c.join("seed_9/metrics.csv")).unwrap_or_default();
    Verdict {
        passed: o.status.success() && ma == mb && ma == mc && ma.len() > 0,
        gate: true,
        detail: format!(
            "{} metric bytes; repeat run identical: {}; replay from manifest identical: {}",
            ma.len(),
            ma == mb,
            ma == mc
        ),
    }
}

fn c8_export(work: &Path) -> Verdict {
    let cached = lbf_root().join("linda_vdn/seed_1");
    let (config, ckpt, source) = if cached.join("checkpoints/final.ckpt").exists() {
        (
            cached.join("manifest.json"),
            cached.join("checkpoints/final.ckpt"),
            "cached LBF run",
        )
    } else {
        let run = work.join("determinism/a/seed_9");
        (run.join("manifest.json"), run.join("checkpoints/final.ckpt"), "short run")
    };
    let dump = work.join("awareness");
    let o = linda(&[
        "export-awareness",
        "--config",
        s(&config),
        "--checkpoint",
        s(&ckpt),
        "--episodes",
        "20",
        "--out",
        s(&dump),
    ]);
    if !o.status.success() {
        return Verdict {
            passed: false,
            gate: true,
            detail: String::from_utf8_lossy(&o.stderr).into_owned(),
        };
    }
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let steps = report["steps"].as_u64().unwrap_or(0) as usize;
    let fraction = report["self_min_fraction"].as_f64().unwrap_or(f64::NAN);
    let series_rows = fs::read_to_string(dump.join("variance.csv"))
        .map(|t| t.lines().count().saturating_sub(1))
        .unwrap_or(0);
    Verdict {
        passed: steps > 0 && series_rows == 2 * steps && (0.0..=1.0).contains(&fraction),
        gate: true,
        detail: format!(
            "{source}: {steps} steps, {series_rows} variance rows, self variance minimal in {:.1}% of cells (observational)",
            100.0 * fraction
        ),
    }
}

fn main() {
    let work = tempfile::tempdir().unwrap();
    let mut verdicts = vec![
        (1, c1_gradients()),
        (2, c2_igm()),
        (3, c3_kl()),
        (4, c4_bound()),
    ];
    let (c5, cached) = c5_lbf();
    verdicts.push((5, c5));
    let c7 = c7_determinism(work.path());
    verdicts.push((6, c6_ablation(work.path(), &cached)));
    verdicts.push((7, c7));
    verdicts.push((8, c8_export(work.path())));
    verdicts.sort_by_key(|(n, _)| *n);

    let mut gate_failed = false;
    for (n, v) in &verdicts {
        println!("criterion {n}: {} {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        gate_failed |= v.gate && !v.passed;
    }
    if gate_failed {
        std::process::exit(1);
    }
}
