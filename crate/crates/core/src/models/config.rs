use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impartiality::ImpartialityConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vae,
    HiVae,
    Mvae,
    Mmvae,
    Mopoe,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Vae,
        ModelKind::HiVae,
        ModelKind::Mvae,
        ModelKind::Mmvae,
        ModelKind::Mopoe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::HiVae => "hivae",
            ModelKind::Mvae => "mvae",
            ModelKind::Mmvae => "mmvae",
            ModelKind::Mopoe => "mopoe",
        }
    }

    pub fn is_mixture(self) -> bool {
        matches!(self, ModelKind::Mvae | ModelKind::Mmvae | ModelKind::Mopoe)
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase().replace('-', ""))
            .ok_or_else(|| Error::invalid(format!("unknown model `{s}` (expected vae, hivae, mvae, mmvae, mopoe)")))
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Elbo,
    Iwae,
    Dreg,
    Loose,
    Siwae,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [LossKind::Elbo, LossKind::Iwae, LossKind::Dreg, LossKind::Loose, LossKind::Siwae];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Elbo => "elbo",
            LossKind::Iwae => "iwae",
            LossKind::Dreg => "dreg",
            LossKind::Loose => "loose",
            LossKind::Siwae => "siwae",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown loss `{s}` (expected elbo, iwae, dreg, loose, siwae)")))
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiVaeConfig {
    pub d_z: usize,
    pub d_s: usize,
    pub tau: f64,
}

impl Default for HiVaeConfig {
    fn default() -> Self {
        Self {
            d_z: 10,
            d_s: 10,
            tau: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub loss: LossKind,
    /// Importance samples per row.
    pub k: usize,
    /// Latent size; `None` picks the model default.
    pub latent: Option<usize>,
    /// Hidden width; `None` picks the model default.
    pub hidden: Option<usize>,
    pub hivae: HiVaeConfig,
    /// Encoder dropout probability (VAE family).
    pub dropout: f64,
    /// Add the prior as an expert in every product of experts.
    pub include_prior: bool,
    /// Sticking-the-landing: expert densities see detached parameters.
    pub stl: bool,
    pub impartiality: ImpartialityConfig,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, loss: LossKind) -> Self {
        Self {
            kind,
            loss,
            k: 1,
            latent: None,
            hidden: None,
            hivae: HiVaeConfig::default(),
            dropout: 0.1,
            include_prior: false,
            stl: true,
            impartiality: ImpartialityConfig::vanilla(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if self.loss == LossKind::Dreg && self.k < 2 {
            return Err(Error::invalid("dreg needs K >= 2"));
        }
        if self.kind == ModelKind::HiVae && self.hivae.d_s < 2 {
            return Err(Error::invalid("hivae needs d_s >= 2"));
        }
        if !(self.hivae.tau > 0.0) {
            return Err(Error::invalid("gumbel temperature must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        match (self.kind.is_mixture(), self.loss) {
            (true, LossKind::Dreg) => Err(Error::Unsupported("dreg is defined for the vae only".into())),
            (false, LossKind::Loose | LossKind::Siwae) => Err(Error::Unsupported(format!(
                "{} is a stratified objective for mixture models",
                self.loss
            ))),
            (_, LossKind::Iwae | LossKind::Dreg) if self.kind == ModelKind::HiVae => {
                Err(Error::Unsupported("hivae is trained with the elbo".into()))
            }
            _ => Ok(()),
        }
    }
}
