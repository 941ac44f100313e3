//! Training and evaluation engine: optimizer, schedule, loss, synthetic
//! tasks, checkpoints and cost benchmarks.

pub mod adam;
pub mod bench;
pub mod checkpoint;
pub mod listops;
pub mod loss;
pub mod schedule;
pub mod tasks;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use schedule::lr_at;
pub use tasks::Task;
pub use train::{evaluate, train, EvalReport, RunConfig, TrainConfig};
