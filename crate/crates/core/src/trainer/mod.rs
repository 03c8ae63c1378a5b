//! Centralized training: episode replay, target network, the TD plus
//! awareness objective, and greedy decentralized evaluation.

mod buffer;
mod episode;
mod learner;
mod metrics;
mod runner;

pub use buffer::ReplayBuffer;
pub use episode::EpisodeRecord;
pub use learner::{
    compute_loss, update_target, BatchNoise, Learner, LossBreakdown, LossConfig, Model, ModelDims, SortedBatch,
};
pub use metrics::{LossWriter, MetricsWriter, LOSS_HEADER, METRICS_HEADER};
pub use runner::{
    collect_episode, evaluate, evaluate_with, EvalReport, ExecutionStep, MetricsRow, NoObserver, RunObserver,
    RunSummary, Trainer,
};
