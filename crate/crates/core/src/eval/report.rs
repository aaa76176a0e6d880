use std::path::Path;

use serde::{Deserialize, Serialize};

use super::coherence::{CoherenceTable, LatentTable};
use super::metrics::{ErrorKind, ReconstructionErrors};
use crate::error::Result;

/// Everything measured for one model snapshot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub modalities: Vec<String>,
    pub reconstruction: Option<ReconstructionErrors>,
    pub coherence: Option<CoherenceTable>,
    pub latent: Option<LatentTable>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// One row of the long-format metric CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub section: String,
    pub key: String,
    pub target: String,
    pub value: f64,
}

impl MetricReport {
    pub fn rows(&self) -> Vec<MetricRow> {
        let row = |section: &str, key: &str, target: &str, value: f64| MetricRow {
            section: section.into(),
            key: key.into(),
            target: target.into(),
            value,
        };
        let mut out = Vec::new();
        if let Some(r) = &self.reconstruction {
            for e in &r.per_modality {
                let kind = match e.kind {
                    ErrorKind::Nrmse => "nrmse",
                    ErrorKind::ErrorRate => "error_rate",
                };
                out.push(row("reconstruction", &e.modality, kind, e.value));
            }
            out.push(row("reconstruction", "aggregate", "", r.aggregate));
        }
        if let Some(c) = &self.coherence {
            for cell in &c.cells {
                let target = self.modalities.get(cell.target).cloned().unwrap_or_else(|| cell.target.to_string());
                out.push(row("coherence", &cell.evidence_label, &target, cell.accuracy));
            }
            out.push(row("coherence", "self", "", c.self_coherence()));
            out.push(row("coherence", "cross", "", c.cross_coherence()));
        }
        if let Some(l) = &self.latent {
            for cell in &l.cells {
                out.push(row("latent", &cell.train_expert, &cell.eval_expert, cell.accuracy));
            }
            out.push(row("latent", "self", "", l.self_accuracy()));
            out.push(row("latent", "cross", "", l.cross_accuracy()));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in self.rows() {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
