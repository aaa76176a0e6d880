use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::likelihoods::{Family, LikelihoodSpec};

/// One observed variable group with its likelihood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Modality {
    pub name: String,
    pub spec: LikelihoodSpec,
}

impl Modality {
    pub fn new(name: impl Into<String>, family: Family, dim: usize) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            spec: LikelihoodSpec::new(family, dim)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    /// Width of the encoder-side encoding: one-hot for categorical entries.
    pub fn input_width(&self) -> usize {
        match self.spec.family {
            Family::Categorical { classes } => classes * self.spec.dim,
            _ => self.spec.dim,
        }
    }

    /// Encoder features for `x: (batch, dim)`; unobserved entries become 0.
    pub fn encode_input(&self, x: &Tensor, mask: Option<&Tensor>) -> Tensor {
        let rows = x.rows();
        let dim = self.spec.dim;
        let observed = |i: usize| mask.is_none_or(|m| m.data()[i] != 0.0);
        match self.spec.family {
            Family::Categorical { classes } => {
                let mut out = vec![0.0; rows * dim * classes];
                for i in 0..rows * dim {
                    if observed(i) {
                        let c = x.data()[i] as usize;
                        if c < classes {
                            out[i * classes + c] = 1.0;
                        }
                    }
                }
                Tensor::new(vec![rows, dim * classes], out).expect("consistent shape")
            }
            _ => {
                let data = (0..rows * dim)
                    .map(|i| if observed(i) { x.data()[i] } else { 0.0 })
                    .collect();
                Tensor::new(vec![rows, dim], data).expect("consistent shape")
            }
        }
    }
}

/// Values and observation masks of a set of rows, one entry per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub values: Vec<Tensor>,
    pub masks: Vec<Option<Tensor>>,
    /// Ground-truth class per row, when the data has one.
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(values: Vec<Tensor>, masks: Vec<Option<Tensor>>, labels: Option<Vec<usize>>) -> Result<Self> {
        if values.len() != masks.len() {
            return Err(Error::invalid("one mask slot per modality is required"));
        }
        let rows = values.first().map_or(0, Tensor::rows);
        for (v, m) in values.iter().zip(&masks) {
            if v.rank() != 2 || v.rows() != rows {
                return Err(Error::invalid(format!("modality values must be ({rows}, dim), got {:?}", v.shape())));
            }
            if let Some(m) = m {
                if m.shape() != v.shape() {
                    return Err(Error::shape("mask", m.shape(), v.shape()));
                }
            }
        }
        if labels.as_ref().is_some_and(|l| l.len() != rows) {
            return Err(Error::invalid("label count differs from row count"));
        }
        Ok(Self { values, masks, labels })
    }

    /// Fully observed batch.
    pub fn dense(values: Vec<Tensor>) -> Result<Self> {
        let masks = vec![None; values.len()];
        Self::new(values, masks, None)
    }

    pub fn rows(&self) -> usize {
        self.values.first().map_or(0, Tensor::rows)
    }

    pub fn modalities(&self) -> usize {
        self.values.len()
    }

    pub fn mask(&self, d: usize) -> Option<&Tensor> {
        self.masks[d].as_ref()
    }

    /// Rows at the given indices.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let pick = |t: &Tensor| {
            let w = t.last_dim();
            let mut data = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![idx.len(), w], data).expect("consistent shape")
        };
        Batch {
            values: self.values.iter().map(pick).collect(),
            masks: self.masks.iter().map(|m| m.as_ref().map(pick)).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Consecutive row chunks of at most `size` rows.
    pub fn chunks(&self, size: usize) -> Vec<Batch> {
        let n = self.rows();
        (0..n)
            .step_by(size.max(1))
            .map(|s| self.select(&(s..(s + size).min(n)).collect::<Vec<_>>()))
            .collect()
    }
}
