use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{Batch, Modality};
use crate::error::{Error, Result};

/// `(1/N)·‖x − x̂‖₂ / (max x − min x)`.
pub fn nrmse(x: &[f64], xhat: &[f64]) -> Result<f64> {
    if x.is_empty() || x.len() != xhat.len() {
        return Err(Error::invalid(format!("nrmse needs equal non-empty inputs, got {} and {}", x.len(), xhat.len())));
    }
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::invalid(
            "nrmse is undefined for a constant column; use error_rate or a mean absolute error instead",
        ));
    }
    let sq: f64 = x.iter().zip(xhat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(sq.sqrt() / x.len() as f64 / range)
}

/// Fraction of mismatched entries.
pub fn error_rate(x: &[f64], xhat: &[f64]) -> Result<f64> {
    if x.is_empty() || x.len() != xhat.len() {
        return Err(Error::invalid(format!(
            "error rate needs equal non-empty inputs, got {} and {}",
            x.len(),
            xhat.len()
        )));
    }
    Ok(x.iter().zip(xhat).filter(|(a, b)| a != b).count() as f64 / x.len() as f64)
}

/// Mean of per-modality errors.
pub fn aggregate(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return f64::NAN;
    }
    errors.iter().sum::<f64>() / errors.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Nrmse,
    ErrorRate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityError {
    pub modality: String,
    pub family: String,
    pub kind: ErrorKind,
    pub value: f64,
}

/// Per-modality reconstruction errors and their mean.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionErrors {
    pub per_modality: Vec<ModalityError>,
    pub aggregate: f64,
}

impl ReconstructionErrors {
    /// Compares predictions with observed truth column by column; columns
    /// of multi-dimensional modalities are averaged.
    pub fn compute(modalities: &[Modality], truth: &Batch, pred: &[Tensor]) -> Result<Self> {
        if pred.len() != modalities.len() || truth.modalities() != modalities.len() {
            return Err(Error::Schema("reconstruction and schema disagree on the modality count".into()));
        }
        let mut per_modality = Vec::with_capacity(modalities.len());
        for (d, m) in modalities.iter().enumerate() {
            let (x, p) = (&truth.values[d], &pred[d]);
            if x.shape() != p.shape() {
                return Err(Error::shape("reconstruction", x.shape(), p.shape()));
            }
            let kind = if m.spec.family.is_nominal() {
                ErrorKind::ErrorRate
            } else {
                ErrorKind::Nrmse
            };
            let dim = m.dim();
            let mut cols = Vec::with_capacity(dim);
            for j in 0..dim {
                let (mut a, mut b) = (Vec::new(), Vec::new());
                for r in 0..x.rows() {
                    let i = r * dim + j;
                    if truth.mask(d).is_none_or(|mk| mk.data()[i] != 0.0) {
                        a.push(x.data()[i]);
                        b.push(p.data()[i]);
                    }
                }
                if a.is_empty() {
                    continue;
                }
                cols.push(match kind {
                    ErrorKind::ErrorRate => error_rate(&a, &b)?,
                    ErrorKind::Nrmse => nrmse(&a, &b)
                        .map_err(|e| Error::invalid(format!("modality `{}` column {j}: {e}", m.name)))?,
                });
            }
            per_modality.push(ModalityError {
                modality: m.name.clone(),
                family: m.spec.family.name().to_string(),
                kind,
                value: aggregate(&cols),
            });
        }
        let values: Vec<f64> = per_modality.iter().map(|e| e.value).collect();
        Ok(Self {
            aggregate: aggregate(&values),
            per_modality,
        })
    }

    /// Mean error over modalities of the given family name.
    pub fn family_mean(&self, family: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .per_modality
            .iter()
            .filter(|e| e.family == family)
            .map(|e| e.value)
            .collect();
        (!v.is_empty()).then(|| aggregate(&v))
    }
}
