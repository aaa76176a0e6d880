use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Batch, Modality};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::likelihoods::Family;

/// Largest number of distinct non-negative integers read as categorical.
pub const MAX_INFERRED_CLASSES: usize = 20;
/// Floor added to non-negative values before taking logs.
pub const LOG_FLOOR: f64 = 1e-20;

/// Likelihood family suggested by the support of the observed values.
///
/// Rules in order: two distinct values, at most 20 distinct non-negative
/// integers, other non-negative integers, strictly positive reals, reals.
pub fn infer_family(values: &[f64]) -> Result<Family> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::Schema("cannot infer a family from an empty column".into()));
    }
    let distinct: BTreeSet<u64> = finite.iter().map(|v| v.to_bits()).collect();
    let integer = finite.iter().all(|v| v.fract() == 0.0 && *v >= 0.0);
    Ok(if distinct.len() == 2 {
        Family::Bernoulli
    } else if integer && distinct.len() <= MAX_INFERRED_CLASSES {
        Family::Categorical {
            classes: distinct.len().max(2),
        }
    } else if integer {
        Family::Poisson
    } else if finite.iter().all(|v| *v > 0.0) {
        Family::LogNormal
    } else {
        Family::Normal
    })
}

/// One entry of the JSON sidecar that accompanies a CSV file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    /// Family name; inferred from the training rows when absent.
    #[serde(default)]
    pub family: Option<String>,
    #[serde(default)]
    pub classes: Option<usize>,
    /// Extra cell text treated as missing (empty cells and `NaN` always are).
    #[serde(default)]
    pub missing_token: Option<String>,
    /// Category vocabulary for text-coded columns, in index order.
    #[serde(default)]
    pub categories: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(default)]
    pub columns: Vec<ColumnSpec>,
    /// Column holding a class label; excluded from the modalities.
    #[serde(default)]
    pub label: Option<String>,
}

impl Sidecar {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }
}

/// Invertible per-column map from raw values to model space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Transform {
    Identity,
    /// `(x − mean) / std`.
    Standardize { mean: f64, std: f64 },
    /// `ln x' = ln(x + floor) / std`, with `std` measured in log space.
    LogScale { std: f64, floor: f64 },
    /// `x − shift`, clamped at zero.
    Shift { shift: f64 },
    /// Raw value to its index in `vocabulary`.
    Recode { vocabulary: Vec<f64> },
}

impl Transform {
    pub fn forward(&self, x: f64) -> Option<f64> {
        Some(match self {
            Transform::Identity => x,
            Transform::Standardize { mean, std } => (x - mean) / std,
            Transform::LogScale { std, floor } => ((x + floor).ln() / std).exp(),
            Transform::Shift { shift } => (x - shift).max(0.0),
            Transform::Recode { vocabulary } => vocabulary.iter().position(|v| *v == x)? as f64,
        })
    }

    pub fn inverse(&self, y: f64) -> f64 {
        match self {
            Transform::Identity => y,
            Transform::Standardize { mean, std } => y * std + mean,
            Transform::LogScale { std, floor } => (y.ln() * std).exp() - floor,
            Transform::Shift { shift } => y + shift,
            Transform::Recode { vocabulary } => {
                let i = (y.round().max(0.0) as usize).min(vocabulary.len().saturating_sub(1));
                vocabulary.get(i).copied().unwrap_or(y)
            }
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fits the transform of one column on its observed training values.
pub fn fit_transform(name: &str, family: &Family, observed: &[f64]) -> Transform {
    if observed.is_empty() {
        return Transform::Identity;
    }
    let guard = |std: f64| {
        if std > 0.0 && std.is_finite() {
            std
        } else {
            log::warn!("column `{name}` has zero spread on the training split; left unscaled");
            1.0
        }
    };
    match family {
        Family::Normal | Family::Laplace { .. } => {
            let (mean, std) = mean_std(observed);
            Transform::Standardize { mean, std: guard(std) }
        }
        Family::LogNormal => {
            let logs: Vec<f64> = observed.iter().map(|v| (v + LOG_FLOOR).ln()).collect();
            let (_, std) = mean_std(&logs);
            Transform::LogScale {
                std: guard(std),
                floor: LOG_FLOOR,
            }
        }
        Family::Poisson => Transform::Shift {
            shift: observed.iter().copied().fold(f64::INFINITY, f64::min),
        },
        Family::Bernoulli | Family::Categorical { .. } => {
            let set: BTreeSet<u64> = observed.iter().map(|v| v.to_bits()).collect();
            let mut vocabulary: Vec<f64> = set.into_iter().map(f64::from_bits).collect();
            vocabulary.sort_by(f64::total_cmp);
            Transform::Recode { vocabulary }
        }
    }
}

/// A modality with its preprocessing record (one transform per column).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySchema {
    pub modality: Modality,
    pub transforms: Vec<Transform>,
}

/// Train-fitted preprocessing for every modality of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub modalities: Vec<ModalitySchema>,
}

impl Schema {
    /// Fits every transform on the observed entries of `train`. Categorical
    /// class counts are widened to the fitted vocabulary when needed.
    pub fn fit(modalities: &[Modality], train: &Batch) -> Result<Self> {
        if train.modalities() != modalities.len() {
            return Err(Error::Schema("training data and schema disagree on the modality count".into()));
        }
        let mut out = Vec::with_capacity(modalities.len());
        for (d, m) in modalities.iter().enumerate() {
            let dim = m.dim();
            let mut transforms = Vec::with_capacity(dim);
            for j in 0..dim {
                let observed: Vec<f64> = column(&train.values[d], train.mask(d), j).collect();
                transforms.push(fit_transform(&m.name, &m.spec.family, &observed));
            }
            let mut modality = m.clone();
            if let Family::Categorical { classes } = &mut modality.spec.family {
                let widest = transforms
                    .iter()
                    .map(|t| match t {
                        Transform::Recode { vocabulary } => vocabulary.len(),
                        _ => 0,
                    })
                    .max()
                    .unwrap_or(0);
                *classes = (*classes).max(widest).max(2);
            }
            out.push(ModalitySchema { modality, transforms });
        }
        Ok(Self { modalities: out })
    }

    pub fn model_modalities(&self) -> Vec<Modality> {
        self.modalities.iter().map(|m| m.modality.clone()).collect()
    }

    /// Maps raw values to model space. Entries outside the fitted support
    /// (unseen categories) become unobserved.
    pub fn apply(&self, batch: &Batch) -> Result<Batch> {
        if batch.modalities() != self.modalities.len() {
            return Err(Error::Schema("batch and schema disagree on the modality count".into()));
        }
        let mut values = Vec::with_capacity(self.modalities.len());
        let mut masks = Vec::with_capacity(self.modalities.len());
        for (d, ms) in self.modalities.iter().enumerate() {
            let x = &batch.values[d];
            let dim = ms.transforms.len();
            let mut v = vec![0.0; x.len()];
            let mut mask = vec![1.0; x.len()];
            let mut any_missing = batch.mask(d).is_some();
            for (i, &raw) in x.data().iter().enumerate() {
                let observed = batch.mask(d).is_none_or(|m| m.data()[i] != 0.0);
                match observed.then(|| ms.transforms[i % dim].forward(raw)).flatten() {
                    Some(y) if y.is_finite() => v[i] = y,
                    _ => {
                        mask[i] = 0.0;
                        any_missing = true;
                    }
                }
            }
            values.push(Tensor::new(x.shape().to_vec(), v)?);
            masks.push(any_missing.then(|| Tensor::new(x.shape().to_vec(), mask)).transpose()?);
        }
        Batch::new(values, masks, batch.labels.clone())
    }

    /// Maps model-space values of modality `d` back to raw units.
    pub fn invert(&self, d: usize, x: &Tensor) -> Tensor {
        let t = &self.modalities[d].transforms;
        let dim = t.len();
        let data = x.data().iter().enumerate().map(|(i, &y)| t[i % dim].inverse(y)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn invert_all(&self, xs: &[Tensor]) -> Vec<Tensor> {
        xs.iter().enumerate().map(|(d, x)| self.invert(d, x)).collect()
    }
}

/// Observed entries of column `j` of a `(B, dim)` tensor.
pub(crate) fn column<'a>(x: &'a Tensor, mask: Option<&'a Tensor>, j: usize) -> impl Iterator<Item = f64> + 'a {
    let dim = x.last_dim();
    (0..x.rows()).filter_map(move |r| {
        let i = r * dim + j;
        mask.is_none_or(|m| m.data()[i] != 0.0).then(|| x.data()[i])
    })
}
