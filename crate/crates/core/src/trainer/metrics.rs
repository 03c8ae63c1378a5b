use std::io::Write;

use super::learner::LossBreakdown;
use super::runner::MetricsRow;
use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 8] = [
    "env_steps",
    "episode",
    "td_loss",
    "kl_sum",
    "total_loss",
    "epsilon",
    "eval_mean_return",
    "eval_std",
];

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Checkpoint(format!("csv: {other:?}")),
    }
}

/// Metrics CSV, flushed after every row so an interrupted run keeps a valid prefix.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(METRICS_HEADER).map_err(csv_err)?;
        inner.flush()?;
        Ok(MetricsWriter { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row).map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

pub const LOSS_HEADER: [&str; 6] = ["train_step", "env_steps", "episode", "td_loss", "kl_sum", "total_loss"];

/// Per-train-step loss log with `lambda` implied by the run config.
pub struct LossWriter<W: Write> {
    inner: csv::Writer<W>,
    steps: usize,
}

impl<W: Write> LossWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(LOSS_HEADER).map_err(csv_err)?;
        Ok(LossWriter { inner, steps: 0 })
    }

    pub fn write(&mut self, env_steps: usize, episode: usize, loss: &LossBreakdown) -> Result<()> {
        self.steps += 1;
        self.inner
            .serialize((self.steps, env_steps, episode, loss.td_loss, loss.kl_sum, loss.total))
            .map_err(csv_err)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}
