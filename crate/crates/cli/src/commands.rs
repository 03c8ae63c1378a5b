use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use linda_core::awareness::{variance_summary, AwarenessRecord};
use linda_core::config::RunConfig;
use linda_core::diffcore::ParameterSet;
use linda_core::trainer::{
    evaluate, evaluate_with, LossBreakdown, LossWriter, MetricsRow, MetricsWriter, Model, RunObserver, Trainer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::verify::{run_suite, VerifyOptions};
use crate::{Command, ConfigArgs, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_OTHER, EXIT_VERIFY};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] linda_core::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(linda_core::Error::Config(_)) => EXIT_CONFIG,
            CliError::Core(linda_core::Error::NonFinite(_)) => EXIT_NUMERIC,
            _ => EXIT_OTHER,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub version: String,
    pub started_at: String,
    pub out_dir: String,
}

impl RunManifest {
    pub fn new(config: &RunConfig, out_dir: &Path) -> Self {
        let map = config
            .to_text()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        RunManifest {
            config: map,
            seed: config.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: chrono::Utc::now().to_rfc3339(),
            out_dir: out_dir.display().to_string(),
        }
    }
}

/// Defaults, then the file (text or manifest), then `--set`, then `--seed`.
/// Returns one validated config per seed.
pub fn load_config(args: &ConfigArgs) -> CliResult<Vec<RunConfig>> {
    let mut base = RunConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| linda_core::Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: RunManifest = serde_json::from_str(&text)
                .map_err(|e| linda_core::Error::Config(format!("bad manifest {}: {e}", path.display())))?;
            for (k, v) in &manifest.config {
                base.set(k, v)?;
            }
        } else {
            base.apply_text(&text)?;
        }
    }
    for o in &args.overrides {
        base.apply_override(o)?;
    }
    let seeds = if args.seed.is_empty() { vec![base.seed] } else { args.seed.clone() };
    seeds
        .into_iter()
        .map(|seed| {
            let cfg = RunConfig { seed, ..base.clone() };
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

fn single_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut all = load_config(args)?;
    if all.len() != 1 {
        return Err(linda_core::Error::Config("this command takes a single seed".into()).into());
    }
    Ok(all.remove(0))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

struct FileObserver {
    metrics: MetricsWriter<BufWriter<File>>,
    losses: LossWriter<BufWriter<File>>,
    checkpoints: PathBuf,
    seed: u64,
}

impl RunObserver for FileObserver {
    fn on_train_step(&mut self, env_steps: usize, episode: usize, loss: &LossBreakdown) -> linda_core::Result<()> {
        self.losses.write(env_steps, episode, loss)
    }

    fn on_eval(&mut self, row: &MetricsRow) -> linda_core::Result<()> {
        self.metrics.write(row)?;
        self.losses.flush()?;
        eprintln!(
            "seed {} | steps {:>7} | episode {:>6} | eps {:.3} | td {} | return {:.3} ± {:.3}",
            self.seed,
            row.env_steps,
            row.episode,
            row.epsilon,
            row.td_loss.map_or("-".to_string(), |v| format!("{v:.5}")),
            row.eval_mean_return,
            row.eval_std
        );
        Ok(())
    }

    fn on_checkpoint(&mut self, env_steps: usize, params: &ParameterSet, is_final: bool) -> linda_core::Result<()> {
        let name = if is_final {
            "final.ckpt".to_string()
        } else {
            format!("step_{env_steps}.ckpt")
        };
        let mut w = BufWriter::new(File::create(self.checkpoints.join(name))?);
        params.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Trains one config into `dir`; returns the run summary as JSON.
pub fn train_one(cfg: &RunConfig, dir: &Path) -> CliResult<serde_json::Value> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    write_json(&dir.join("manifest.json"), &RunManifest::new(cfg, dir))?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let mut observer = FileObserver {
        metrics: MetricsWriter::new(BufWriter::new(File::create(dir.join("metrics.csv"))?))?,
        losses: LossWriter::new(BufWriter::new(File::create(dir.join("losses.csv"))?))?,
        checkpoints: dir.join("checkpoints"),
        seed: cfg.seed,
    };
    let mut trainer = Trainer::new(cfg.clone())?;
    let summary = trainer.run(&mut observer)?;
    observer.losses.flush()?;
    let value = serde_json::json!({
        "seed": cfg.seed,
        "out_dir": dir.display().to_string(),
        "env_steps": summary.env_steps,
        "episodes": summary.episodes,
        "train_steps": summary.train_steps,
        "final_eval_mean_return": summary.final_eval.mean,
        "final_eval_std": summary.final_eval.std,
    });
    write_json(&dir.join("summary.json"), &value)?;
    Ok(value)
}

fn model_with_checkpoint(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<(Model, ParameterSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, mut params) = Model::for_run(cfg, &mut rng)?;
    if let Some(path) = checkpoint {
        let file = File::open(path)
            .map_err(|e| linda_core::Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        params.load_values_from_checkpoint(std::io::BufReader::new(file))?;
    }
    Ok((model, params))
}

/// Summary of an awareness export.
#[derive(Clone, Debug, Serialize)]
pub struct ExportReport {
    pub episodes: usize,
    pub steps: usize,
    pub records: usize,
    /// Fraction of (step, agent) cells where the agent's mean awareness scale
    /// about itself is the smallest among all targets.
    pub self_min_fraction: f64,
    pub returns: Vec<f64>,
}

pub fn export_awareness(cfg: &RunConfig, checkpoint: &Path, episodes: usize, out: &Path) -> CliResult<ExportReport> {
    let (model, params) = model_with_checkpoint(cfg, Some(checkpoint))?;
    if !model.agent.has_awareness() {
        return Err(linda_core::Error::Config("export-awareness needs model.awareness = true".into()).into());
    }
    fs::create_dir_all(out)?;
    let n = cfg.env.n_agents;
    let mut records: Vec<AwarenessRecord> = Vec::new();
    let mut variance_rows: Vec<(usize, usize, usize, Vec<f64>)> = Vec::new();
    let mut steps = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xE4);
    let report = evaluate_with(&model.agent, &params, &cfg.env, episodes, &mut rng, |step| {
        steps += 1;
        for set in step.awareness.iter().flatten() {
            records.extend(AwarenessRecord::from_set(step.episode, step.t, set));
            let bars: Vec<f64> = (0..n).map(|j| variance_summary(set, j).unwrap_or(f64::NAN)).collect();
            variance_rows.push((step.episode, step.t, set.agent_id, bars));
        }
    })?;

    let mut jsonl = BufWriter::new(File::create(out.join("awareness.jsonl"))?);
    for r in &records {
        serde_json::to_writer(&mut jsonl, r)?;
        writeln!(jsonl)?;
    }
    jsonl.flush()?;

    let mut csv = csv::Writer::from_path(out.join("variance.csv"))?;
    let mut header = vec!["episode".to_string(), "t".to_string(), "agent".to_string()];
    header.extend((0..n).map(|j| format!("sigma_bar_{j}")));
    header.push("self_is_min".to_string());
    csv.write_record(&header)?;
    let mut self_min = 0usize;
    for (episode, t, agent, bars) in &variance_rows {
        let min = bars.iter().copied().fold(f64::INFINITY, f64::min);
        let is_min = bars[*agent] <= min;
        self_min += usize::from(is_min);
        let mut row = vec![episode.to_string(), t.to_string(), agent.to_string()];
        row.extend(bars.iter().map(|b| b.to_string()));
        row.push(is_min.to_string());
        csv.write_record(&row)?;
    }
    csv.flush()?;

    let export = ExportReport {
        episodes,
        steps,
        records: records.len(),
        self_min_fraction: if variance_rows.is_empty() {
            0.0
        } else {
            self_min as f64 / variance_rows.len() as f64
        },
        returns: report.returns,
    };
    write_json(&out.join("report.json"), &export)?;
    Ok(export)
}

pub fn dispatch(command: Command) -> CliResult<i32> {
    match command {
        Command::Train { config, out } => {
            let configs = load_config(&config)?;
            for cfg in &configs {
                let dir = out.join(format!("seed_{}", cfg.seed));
                let summary = train_one(cfg, &dir)?;
                println!("{summary}");
            }
            Ok(EXIT_OK)
        }
        Command::Eval {
            config,
            checkpoint,
            episodes,
        } => {
            let cfg = single_config(&config)?;
            let (model, params) = model_with_checkpoint(&cfg, checkpoint.as_deref())?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xE7A1);
            let report = evaluate(&model.agent, &params, &cfg.env, episodes, &mut rng)?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(EXIT_OK)
        }
        Command::ExportAwareness {
            config,
            checkpoint,
            episodes,
            out,
        } => {
            let cfg = single_config(&config)?;
            let report = export_awareness(&cfg, &checkpoint, episodes, &out)?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(EXIT_OK)
        }
        Command::Verify {
            suite,
            seed,
            corrupt_backward,
        } => {
            let reports = run_suite(
                suite,
                &VerifyOptions {
                    seed,
                    corrupt_backward,
                },
            )?;
            let mut ok = true;
            for r in &reports {
                for line in &r.lines {
                    println!("{}", serde_json::to_string(line)?);
                }
                println!(
                    "{}",
                    serde_json::json!({"suite": r.suite, "passed": r.passed, "checks": r.lines.len()})
                );
                ok &= r.passed;
            }
            Ok(if ok { EXIT_OK } else { EXIT_VERIFY })
        }
    }
}
