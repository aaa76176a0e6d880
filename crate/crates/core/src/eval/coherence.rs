use serde::{Deserialize, Serialize};

use super::probe::{LogisticProbe, ProbeConfig, ProbeSet};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::models::Mixture;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceCell {
    pub evidence: Vec<usize>,
    pub evidence_label: String,
    pub target: usize,
    pub accuracy: f64,
}

/// Probe accuracy of conditionally generated modalities, one cell per
/// (expert set, target modality).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoherenceTable {
    pub cells: Vec<CoherenceCell>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl CoherenceTable {
    /// Mean over targets of the cell with evidence exactly `{d}`.
    pub fn self_coherence(&self) -> f64 {
        mean(
            self.cells
                .iter()
                .filter(|c| c.evidence == [c.target])
                .map(|c| c.accuracy),
        )
    }

    /// Mean over targets `d` of the mean over expert sets not containing `d`.
    pub fn cross_coherence(&self) -> f64 {
        let targets: std::collections::BTreeSet<usize> = self.cells.iter().map(|c| c.target).collect();
        mean(targets.into_iter().filter_map(|d| {
            let m = mean(
                self.cells
                    .iter()
                    .filter(|c| c.target == d && !c.evidence.contains(&d))
                    .map(|c| c.accuracy),
            );
            m.is_finite().then_some(m)
        }))
    }

    /// Mean over targets with every modality as evidence, when that set is an expert.
    pub fn reconstruction_coherence(&self, modalities: usize) -> Option<f64> {
        let m = mean(
            self.cells
                .iter()
                .filter(|c| c.evidence.len() == modalities)
                .map(|c| c.accuracy),
        );
        m.is_finite().then_some(m)
    }
}

/// Generates every target from every expert set of the model (latent drawn
/// from the expert, likelihood mode decoded) and scores it with the probes.
pub fn coherence(model: &Mixture, data: &Batch, probes: &ProbeSet, seed: u64) -> Result<CoherenceTable> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("coherence needs labelled data"))?;
    if probes.probes.len() != model.modalities().len() {
        return Err(Error::invalid("coherence needs one trained probe per modality"));
    }
    let mut cells = Vec::new();
    for (a, evidence) in model.experts().iter().enumerate() {
        let z = model.expert_latent(data, evidence, true, seed)?;
        for target in 0..model.modalities().len() {
            let x = model.decode(&z, target, false, seed)?;
            cells.push(CoherenceCell {
                evidence: evidence.clone(),
                evidence_label: model.expert_label(a),
                target,
                accuracy: probes.accuracy(target, &x, labels)?,
            });
        }
    }
    Ok(CoherenceTable { cells })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCell {
    pub train_expert: String,
    pub eval_expert: String,
    pub accuracy: f64,
}

/// Linear probes on latent samples: one per expert, evaluated on every expert.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentTable {
    pub cells: Vec<LatentCell>,
}

impl LatentTable {
    pub fn self_accuracy(&self) -> f64 {
        mean(
            self.cells
                .iter()
                .filter(|c| c.train_expert == c.eval_expert)
                .map(|c| c.accuracy),
        )
    }

    pub fn cross_accuracy(&self) -> f64 {
        mean(
            self.cells
                .iter()
                .filter(|c| c.train_expert != c.eval_expert)
                .map(|c| c.accuracy),
        )
    }
}

pub fn latent_classification(
    model: &Mixture,
    train: &Batch,
    test: &Batch,
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<LatentTable> {
    let (train_y, test_y) = match (&train.labels, &test.labels) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::invalid("latent classification needs labelled data")),
    };
    let experts = model.experts();
    let mut train_z = Vec::with_capacity(experts.len());
    let mut test_z = Vec::with_capacity(experts.len());
    for e in experts {
        train_z.push(model.expert_latent(train, e, true, cfg.seed)?);
        test_z.push(model.expert_latent(test, e, true, cfg.seed.wrapping_add(1))?);
    }
    let mut cells = Vec::with_capacity(experts.len() * experts.len());
    for (a, za) in train_z.iter().enumerate() {
        let probe = LogisticProbe::fit(za, train_y, classes, cfg)?;
        for (b, zb) in test_z.iter().enumerate() {
            cells.push(LatentCell {
                train_expert: model.expert_label(a),
                eval_expert: model.expert_label(b),
                accuracy: probe.accuracy(zb, test_y)?,
            });
        }
    }
    Ok(LatentTable { cells })
}
