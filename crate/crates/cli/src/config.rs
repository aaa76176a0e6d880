use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use ivae::data::SplitFractions;
use ivae::gradconflict::ResolverChain;
use ivae::impartiality::{BetaRule, BlockSet, ImpartialityConfig};
use ivae::models::{LossKind, ModelConfig, ModelKind};
use ivae::train::{AdamConfig, Selection, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::source::DataSource;

/// Flags shared by `train` and `sweep`.
#[derive(Args, Clone, Debug)]
pub struct RunArgs {
    /// vae, hivae, mvae, mmvae or mopoe.
    #[arg(long, default_value = "vae")]
    pub model: ModelKind,
    /// elbo, iwae, dreg, loose or siwae.
    #[arg(long, default_value = "elbo")]
    pub loss: LossKind,
    /// Resolver chain, e.g. `imtl_g+pcgrad` or `gradnorm:alpha=1`.
    #[arg(long, default_value = "identity")]
    pub fpsi: String,
    /// Comma-separated subset of li,eei,dei. Defaults to every block when
    /// a resolver is set and to none otherwise.
    #[arg(long)]
    pub blocks: Option<String>,
    /// LI head weights: inverse_dim, dim, unit or a constant.
    #[arg(long, default_value = "inverse_dim")]
    pub beta: String,
    /// Importance samples per row.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long)]
    pub latent: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Product-of-experts includes the prior.
    #[arg(long)]
    pub include_prior: bool,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// AMSGrad on or off; defaults to on for mixture models only.
    #[arg(long)]
    pub amsgrad: Option<bool>,
    /// Global gradient-norm clip.
    #[arg(long)]
    pub clip: Option<f64>,
    /// Comma-separated seeds; one run per seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// CSV path, `synth:hetero` or `synth:trimodal`.
    #[arg(long)]
    pub data: String,
    /// Schema sidecar for CSV data.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Rows of a synthetic dataset.
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    /// Classes of synth:trimodal.
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Seed of the synthetic generator (splits follow the run seed).
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// val_error, val_bound or val_coherence. Defaults to val_error for
    /// tabular models and val_bound for mixtures.
    #[arg(long)]
    pub select: Option<Selection>,
    #[arg(long, default_value_t = 1)]
    pub validate_every: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Fully resolved run description, written to every run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataSource,
    pub split: SplitFractions,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub validate_every: usize,
    pub selection: Selection,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

pub fn impartiality(fpsi: &str, blocks: Option<&str>, beta: &str) -> Result<ImpartialityConfig> {
    let chain: ResolverChain = fpsi.parse()?;
    let blocks: BlockSet = match blocks {
        Some(b) => b.parse()?,
        None if chain.is_identity() => BlockSet::none(),
        None => BlockSet::all(),
    };
    let beta: BetaRule = beta.parse()?;
    Ok(ImpartialityConfig {
        beta,
        ..ImpartialityConfig::uniform(blocks, chain)
    })
}

impl RunConfig {
    pub fn from_args(a: &RunArgs) -> Result<Self> {
        if a.seeds.is_empty() {
            bail!("--seeds must list at least one seed");
        }
        let mut model = ModelConfig::new(a.model, a.loss);
        model.k = a.k;
        model.latent = a.latent;
        model.hidden = a.hidden;
        model.include_prior = a.include_prior;
        model.impartiality = impartiality(&a.fpsi, a.blocks.as_deref(), &a.beta)?;
        model.validate()?;
        let data = DataSource::parse(&a.data, a.sidecar.as_deref(), a.n, a.classes, a.data_seed)?;
        let selection = a.select.unwrap_or(if a.model.is_mixture() {
            Selection::ValBound
        } else {
            Selection::ValError
        });
        if selection == Selection::ValCoherence && !a.model.is_mixture() {
            bail!("--select val_coherence needs a mixture model");
        }
        Ok(Self {
            model,
            data,
            split: SplitFractions::default(),
            epochs: a.epochs,
            batch_size: a.batch_size,
            optimizer: AdamConfig {
                learning_rate: a.lr,
                amsgrad: a.amsgrad.unwrap_or(a.model.is_mixture()),
                clip_norm: a.clip,
                ..AdamConfig::default()
            },
            validate_every: a.validate_every.max(1),
            selection,
            seeds: a.seeds.clone(),
            out: std::path::absolute(&a.out)?,
        })
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed,
            validate_every: self.validate_every,
            restore_best: true,
        }
    }
}
