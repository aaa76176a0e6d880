//! Optimization loop, resolver sweep and end-to-end experiment runs.

mod optim;
pub mod protocol;
pub mod sweep;
mod trainer;

pub use optim::{Adam, AdamConfig};
pub use protocol::{evaluate, reconstruction_errors, run, validation_metric, Probing, RunOutcome, Selection};
pub use sweep::{resolver_grid, select_best, summarize, Candidate, Summary};
pub use trainer::{fit, validation_loss, EpochRecord, TrainConfig, TrainReport};

#[cfg(test)]
mod tests;
