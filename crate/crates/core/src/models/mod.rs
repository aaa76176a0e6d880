//! Model families and objectives, each declaring its impartiality blocks.

pub mod checkpoint;
mod config;
pub mod hivae;
pub mod mixture;
pub mod nn;
pub mod objectives;
pub mod vae;

pub use config::{HiVaeConfig, LossKind, ModelConfig, ModelKind};
pub use hivae::HiVae;
pub use mixture::{expert_sets, product_of_experts, Mixture};
pub use vae::Vae;

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::data::{Batch, Modality};
use crate::error::{Error, Result};
use crate::impartiality::{BlockInventory, ImpartialityConfig};

/// Loss node to minimize and the current value of the bound it negates.
#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub loss: Var,
    /// Mean per-row objective (an estimate of the bound being maximized).
    pub bound: f64,
}

/// Column-wise concatenation of `(B, w_i)` tensors.
pub(crate) fn concat_columns(parts: &[Tensor]) -> Tensor {
    let rows = parts.first().map_or(0, Tensor::rows);
    let width: usize = parts.iter().map(Tensor::last_dim).sum();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(vec![rows, width], data).expect("consistent shape")
}

/// Encoder features of every modality, side by side.
pub(crate) fn input_tensor(modalities: &[Modality], batch: &Batch) -> Tensor {
    let parts: Vec<Tensor> = modalities
        .iter()
        .enumerate()
        .map(|(d, m)| m.encode_input(&batch.values[d], batch.mask(d)))
        .collect();
    concat_columns(&parts)
}

/// Any of the supported model families.
#[derive(Clone, Debug)]
pub enum Model {
    Vae(Vae),
    HiVae(HiVae),
    Mixture(Mixture),
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            Model::Vae($m) => $body,
            Model::HiVae($m) => $body,
            Model::Mixture($m) => $body,
        }
    };
}

impl Model {
    pub fn build(config: ModelConfig, modalities: Vec<Modality>, seed: u64) -> Result<Self> {
        config.validate()?;
        if modalities.is_empty() {
            return Err(Error::Schema("the schema has no modalities".into()));
        }
        for m in &modalities {
            m.spec.validate()?;
        }
        Ok(match config.kind {
            ModelKind::Vae => Model::Vae(Vae::new(config, modalities, seed)?),
            ModelKind::HiVae => Model::HiVae(HiVae::new(config, modalities, seed)?),
            ModelKind::Mvae | ModelKind::Mmvae | ModelKind::Mopoe => {
                Model::Mixture(Mixture::new(config, modalities, seed)?)
            }
        })
    }

    pub fn config(&self) -> &ModelConfig {
        dispatch!(self, m => m.config())
    }

    pub fn kind(&self) -> ModelKind {
        self.config().kind
    }

    pub fn modalities(&self) -> &[Modality] {
        dispatch!(self, m => m.modalities())
    }

    pub fn latent_dim(&self) -> usize {
        dispatch!(self, m => m.latent_dim())
    }

    pub fn params(&self) -> &ParamStore {
        dispatch!(self, m => m.params())
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        dispatch!(self, m => m.params_mut())
    }

    pub fn inventory(&self) -> &BlockInventory {
        dispatch!(self, m => m.inventory())
    }

    pub fn set_impartiality(&mut self, imp: ImpartialityConfig) -> Result<()> {
        dispatch!(self, m => m.set_impartiality(imp))
    }

    /// Builds the forward graph of one minibatch on `tape`.
    pub fn loss(&mut self, tape: &mut Tape, batch: &Batch) -> Result<LossOutput> {
        if batch.modalities() != self.modalities().len() {
            return Err(Error::Schema(format!(
                "batch has {} modalities, model expects {}",
                batch.modalities(),
                self.modalities().len()
            )));
        }
        dispatch!(self, m => m.loss(tape, batch))
    }

    /// Imputed values (modes) for every modality.
    pub fn reconstruct(&self, batch: &Batch) -> Result<Vec<Tensor>> {
        dispatch!(self, m => m.reconstruct(batch))
    }

    /// Posterior location `(B, ℓ)` used for post-hoc density fitting.
    pub fn latent_mean(&self, batch: &Batch) -> Result<Tensor> {
        dispatch!(self, m => m.latent_mean(batch))
    }

    /// Decodes latent codes to modes. HI-VAE outputs are in the normalization
    /// of `reference`.
    pub fn decode_modes(&self, z: &Tensor, reference: &Batch) -> Result<Vec<Tensor>> {
        match self {
            Model::Vae(m) => m.decode_modes(z),
            Model::HiVae(m) => m.decode_modes(z, reference),
            Model::Mixture(m) => m.decode_modes(z),
        }
    }

    pub fn as_mixture(&self) -> Option<&Mixture> {
        match self {
            Model::Mixture(m) => Some(m),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests;
