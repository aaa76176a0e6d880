//! Reconstruction errors, coherence, latent probes, the corrected paired
//! t-test, and report/plot output.

pub mod coherence;
pub mod metrics;
pub mod plot;
pub mod probe;
pub mod report;
pub mod stats;

pub use coherence::{coherence, latent_classification, CoherenceCell, CoherenceTable, LatentCell, LatentTable};
pub use metrics::{aggregate, error_rate, nrmse, ErrorKind, ModalityError, ReconstructionErrors};
pub use plot::{pair_plot, parallel_coordinates};
pub use probe::{LogisticProbe, ProbeConfig, ProbeSet};
pub use report::{MetricReport, MetricRow};
pub use stats::{corrected_ttest, TTest};

#[cfg(test)]
mod tests;
