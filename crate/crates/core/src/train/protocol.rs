//! End-to-end runs: train on prepared splits, select the best epoch on the
//! validation split, then evaluate on the test split.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::trainer::{fit, validation_loss, TrainConfig, TrainReport};
use crate::data::{Batch, Prepared};
use crate::error::{Error, Result};
use crate::eval::{coherence, latent_classification, MetricReport, ProbeConfig, ProbeSet, ReconstructionErrors};
use crate::models::{Model, ModelConfig};

/// Validation metric driving best-epoch selection; lower is better for all.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Mean reconstruction error in raw units.
    #[default]
    ValError,
    /// Negated bound.
    ValBound,
    /// Negated cross coherence (mixture models with probes).
    ValCoherence,
}

impl Selection {
    pub fn name(self) -> &'static str {
        match self {
            Selection::ValError => "val_error",
            Selection::ValBound => "val_bound",
            Selection::ValCoherence => "val_coherence",
        }
    }
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "val_error" | "error" => Ok(Selection::ValError),
            "val_bound" | "bound" => Ok(Selection::ValBound),
            "val_coherence" | "coherence" => Ok(Selection::ValCoherence),
            other => Err(Error::invalid(format!(
                "unknown selection `{other}` (expected val_error, val_bound, val_coherence)"
            ))),
        }
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Reconstruction errors of `data` in raw units against `raw`.
pub fn reconstruction_errors(model: &Model, prepared: &Prepared, data: &Batch, raw: &Batch) -> Result<ReconstructionErrors> {
    let pred = prepared.schema.invert_all(&model.reconstruct(data)?);
    ReconstructionErrors::compute(&prepared.schema.model_modalities(), raw, &pred)
}

/// Inputs of the label-based metrics.
#[derive(Clone, Copy, Debug)]
pub struct Probing<'a> {
    pub probes: &'a ProbeSet,
    pub classes: usize,
}

/// Full test-split report: reconstruction errors always, coherence and latent
/// classification for mixture models when probes are given.
pub fn evaluate(model: &Model, prepared: &Prepared, probing: Option<Probing<'_>>, seed: u64) -> Result<MetricReport> {
    let reconstruction = reconstruction_errors(model, prepared, &prepared.test, &prepared.raw_test)?;
    let mut report = MetricReport {
        modalities: model.modalities().iter().map(|m| m.name.clone()).collect(),
        reconstruction: Some(reconstruction),
        ..MetricReport::default()
    };
    if let (Some(p), Some(mixture)) = (probing, model.as_mixture()) {
        report.coherence = Some(coherence(mixture, &prepared.test, p.probes, seed)?);
        let cfg = ProbeConfig {
            seed,
            ..ProbeConfig::default()
        };
        report.latent = Some(latent_classification(mixture, &prepared.train, &prepared.test, p.classes, &cfg)?);
    }
    Ok(report)
}

/// Validation metric of the current model.
pub fn validation_metric(
    model: &mut Model,
    prepared: &Prepared,
    selection: Selection,
    probing: Option<Probing<'_>>,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    match selection {
        Selection::ValError => {
            let raw = prepared.raw_val();
            Ok(reconstruction_errors(model, prepared, &prepared.val, &raw)?.aggregate)
        }
        Selection::ValBound => validation_loss(model, &prepared.val, batch_size, seed),
        Selection::ValCoherence => {
            let (Some(p), Some(mixture)) = (probing, model.as_mixture()) else {
                return Err(Error::invalid("coherence selection needs a mixture model and probes"));
            };
            Ok(-coherence(mixture, &prepared.val, p.probes, seed)?.cross_coherence())
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunOutcome {
    pub train: TrainReport,
    pub report: MetricReport,
}

/// Builds, trains with best-epoch selection and evaluates one model.
pub fn run(
    prepared: &Prepared,
    config: ModelConfig,
    train_cfg: &TrainConfig,
    selection: Selection,
    probing: Option<Probing<'_>>,
) -> Result<(Model, RunOutcome)> {
    if selection == Selection::ValCoherence && (probing.is_none() || !config.kind.is_mixture()) {
        return Err(Error::invalid("coherence selection needs a mixture model and probes"));
    }
    let mut model = Model::build(config, prepared.modalities(), train_cfg.seed)?;
    let (seed, bs) = (train_cfg.seed, train_cfg.batch_size);
    let mut validate = |m: &mut Model| validation_metric(m, prepared, selection, probing, bs, seed);
    let train = fit(&mut model, &prepared.train, train_cfg, Some(&mut validate))?;
    let report = evaluate(&model, prepared, probing, seed)?;
    Ok((model, RunOutcome { train, report }))
}
