//! Datasets: schemas, likelihood inference, preprocessing, synthetic
//! generators and the post-hoc Gaussian mixture.

mod batch;
pub mod gmm;
pub mod schema;
pub mod synth;
mod table;

pub use batch::{Batch, Modality};
pub use gmm::Gmm;
pub use schema::{infer_family, ColumnSpec, Schema, Sidecar, Transform};
pub use synth::{synth_hetero, synth_trimodal, HeteroSpec, TrimodalSpec};
pub use table::{prepare, read_csv, write_csv, Dataset, Prepared, SplitFractions, SplitIndices};
