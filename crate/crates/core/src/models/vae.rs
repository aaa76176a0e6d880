use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::nn::{gaussian_head, Activation, BatchNorm, Mlp};
use super::objectives::{self, normalized_weights};
use super::{input_tensor, LossOutput, ModelConfig};
use crate::autodiff::{ParamGroup, ParamStore, Tape, Tensor, Var};
use crate::data::{Batch, Modality};
use crate::error::Result;
use crate::impartiality::{BlockHandle, BlockInventory, Goal, HeadSpec, ImpartialityBlock, ImpartialityConfig};
use crate::likelihoods::{self, NaturalParams};
use crate::models::LossKind;

pub(crate) const SIGMA_FLOOR: f64 = 1e-6;
pub const DEFAULT_HIDDEN: usize = 64;

/// Heterogeneous VAE: one encoder over all features, a shared decoder trunk
/// producing `y`, and one linear likelihood head per modality.
#[derive(Clone, Debug)]
pub struct Vae {
    config: ModelConfig,
    modalities: Vec<Modality>,
    store: ParamStore,
    latent: usize,
    bn: BatchNorm,
    encoder: Mlp,
    trunk: Mlp,
    heads: Vec<Mlp>,
    inventory: BlockInventory,
}

/// Decoder nodes bound on one tape.
struct DecoderVars {
    trunk: Vec<Var>,
    heads: Vec<Vec<Var>>,
}

impl DecoderVars {
    fn detached(&self, tape: &mut Tape) -> Self {
        Self {
            trunk: self.trunk.iter().map(|&v| tape.detach(v)).collect(),
            heads: self
                .heads
                .iter()
                .map(|h| h.iter().map(|&v| tape.detach(v)).collect())
                .collect(),
        }
    }
}

impl Vae {
    pub fn new(config: ModelConfig, modalities: Vec<Modality>, seed: u64) -> Result<Self> {
        let d_in: usize = modalities.iter().map(Modality::input_width).sum();
        let features: usize = modalities.iter().map(Modality::dim).sum();
        let latent = config.latent.unwrap_or(features.div_ceil(2)).max(1);
        let h = config.hidden.unwrap_or(DEFAULT_HIDDEN);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = ParamGroup::Encoder(0);
        let bn = BatchNorm::new(&mut store, "encoder.bn", d_in, enc)?;
        let encoder = Mlp::new(&mut store, "encoder.mlp", &[d_in, h, h, h, 2 * latent], Activation::Tanh, false, enc, &mut rng)?;
        let trunk = Mlp::new(&mut store, "decoder.trunk", &[latent, h, h, h], Activation::Relu, true, ParamGroup::Shared, &mut rng)?;
        let heads = modalities
            .iter()
            .enumerate()
            .map(|(d, m)| {
                Mlp::new(
                    &mut store,
                    &format!("decoder.head{d}"),
                    &[h, m.spec.raw_width()],
                    Activation::Identity,
                    false,
                    ParamGroup::Head(d),
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let inventory = Self::build_inventory(&config, &modalities)?;
        Ok(Self {
            config,
            modalities,
            store,
            latent,
            bn,
            encoder,
            trunk,
            heads,
            inventory,
        })
    }

    fn build_inventory(config: &ModelConfig, modalities: &[Modality]) -> Result<BlockInventory> {
        let imp = &config.impartiality;
        let mut inv = BlockInventory::new();
        if !imp.is_active(Goal::Li) {
            return Ok(inv);
        }
        let heads: Vec<HeadSpec> = modalities
            .iter()
            .map(|m| HeadSpec {
                label: m.name.clone(),
                beta: imp.beta(Goal::Li, m.dim()),
            })
            .collect();
        inv.push(ImpartialityBlock::from_config(imp, "li", Goal::Li, vec!["y".into()], heads.clone())?)?;
        if config.loss == LossKind::Dreg {
            inv.push(ImpartialityBlock::from_config(imp, "li.enc", Goal::Li, vec!["y".into()], heads)?)?;
        }
        Ok(inv)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn latent_dim(&self) -> usize {
        self.latent
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn inventory(&self) -> &BlockInventory {
        &self.inventory
    }

    pub fn set_impartiality(&mut self, imp: ImpartialityConfig) -> Result<()> {
        self.config.impartiality = imp;
        self.inventory = Self::build_inventory(&self.config, &self.modalities)?;
        Ok(())
    }

    fn encode(&self, tape: &mut Tape, batch: &Batch) -> Result<(Var, Var, Option<super::nn::BnStats>)> {
        let x = tape.constant(input_tensor(&self.modalities, batch));
        let x = tape.dropout(x, self.config.dropout)?;
        let (x, stats) = self.bn.forward(tape, &self.store, x)?;
        let p = self.encoder.bind(tape, &self.store)?;
        let out = self.encoder.forward(tape, &p, x)?;
        let (mu, sigma) = gaussian_head(tape, out, self.latent, SIGMA_FLOOR)?;
        Ok((mu, sigma, stats))
    }

    fn bind_decoder(&self, tape: &mut Tape) -> Result<DecoderVars> {
        Ok(DecoderVars {
            trunk: self.trunk.bind(tape, &self.store)?,
            heads: self
                .heads
                .iter()
                .map(|h| h.bind(tape, &self.store))
                .collect::<Result<_>>()?,
        })
    }

    fn head_params(&self, tape: &mut Tape, vars: &DecoderVars, y: Var, d: usize) -> Result<NaturalParams> {
        let raw = self.heads[d].forward(tape, &vars.heads[d], y)?;
        likelihoods::constrain(&self.modalities[d].spec, tape, raw)
    }

    /// `Σ_d log p_d(x_d | z)` shaped like `z` without its last axis.
    fn log_likelihood(
        &self,
        tape: &mut Tape,
        vars: &DecoderVars,
        z: Var,
        batch: &Batch,
        block: Option<&ImpartialityBlock>,
    ) -> Result<Var> {
        let y = self.trunk.forward(tape, &vars.trunk, z)?;
        let handle = BlockHandle::open(tape, block, vec![vec![y]], self.modalities.len())?;
        let mut total: Option<Var> = None;
        for d in 0..self.modalities.len() {
            let yd = handle.input1(tape, 0, d)?;
            let np = self.head_params(tape, vars, yd, d)?;
            let lp = likelihoods::log_prob(tape, &np, &batch.values[d], batch.mask(d))?;
            let lp = handle.output(tape, d, lp)?;
            total = Some(match total {
                Some(t) => tape.add(t, lp)?,
                None => lp,
            });
        }
        handle.close(tape)?;
        Ok(total.expect("at least one modality"))
    }

    /// Scalar loss (negated objective averaged over rows).
    pub fn loss(&mut self, tape: &mut Tape, batch: &Batch) -> Result<LossOutput> {
        let (mu, sigma, stats) = self.encode(tape, batch)?;
        if let Some(s) = &stats {
            self.bn.update(&mut self.store, s);
        }
        let k = self.config.k;
        let z = tape.reparam_normal(mu, sigma, k)?;
        let vars = self.bind_decoder(tape)?;
        let li = self.inventory.get("li");
        let objective = match self.config.loss {
            LossKind::Elbo => {
                let rec = self.log_likelihood(tape, &vars, z, batch, li)?;
                let kl = objectives::kl_normal_unit(tape, mu, sigma, None)?;
                objectives::elbo(tape, rec, kl)?
            }
            LossKind::Iwae | LossKind::Loose | LossKind::Siwae => {
                let rec = self.log_likelihood(tape, &vars, z, batch, li)?;
                let log_w = self.log_weights(tape, rec, z, mu, sigma, false)?;
                objectives::iwae(tape, log_w)?
            }
            LossKind::Dreg => return self.dreg(tape, batch, z, mu, sigma, &vars),
        };
        let mean = tape.mean(objective);
        let bound = tape.value(mean).item();
        Ok(LossOutput {
            loss: tape.neg(mean),
            bound,
        })
    }

    fn log_weights(&self, tape: &mut Tape, rec: Var, z: Var, mu: Var, sigma: Var, detach_q: bool) -> Result<Var> {
        let (mu, sigma) = if detach_q {
            (tape.detach(mu), tape.detach(sigma))
        } else {
            (mu, sigma)
        };
        let lp = objectives::log_standard_normal(tape, z)?;
        let lq = objectives::log_normal(tape, z, mu, sigma)?;
        let a = tape.add(rec, lp)?;
        tape.sub(a, lq)
    }

    /// Encoder loss `Σ ω̃² log ω` through the sample path with a detached
    /// decoder, plus decoder loss `Σ ω̃ log ω` with detached samples.
    fn dreg(&self, tape: &mut Tape, batch: &Batch, z: Var, mu: Var, sigma: Var, vars: &DecoderVars) -> Result<LossOutput> {
        let frozen = vars.detached(tape);
        let rec_e = self.log_likelihood(tape, &frozen, z, batch, self.inventory.get("li.enc"))?;
        let lw_e = self.log_weights(tape, rec_e, z, mu, sigma, true)?;
        let w = normalized_weights(tape.value(lw_e));
        let w2 = w.map(|v| v * v);
        let enc = objectives::weighted_sum(tape, lw_e, w2)?;

        let zd = tape.detach(z);
        let rec_d = self.log_likelihood(tape, vars, zd, batch, self.inventory.get("li"))?;
        let lw_d = self.log_weights(tape, rec_d, zd, mu, sigma, true)?;
        let dec = objectives::weighted_sum(tape, lw_d, w)?;

        let bound_v = objectives::iwae(tape, lw_e)?;
        let b = tape.mean(bound_v);
        let bound = tape.value(b).item();
        let total = tape.add(enc, dec)?;
        let mean = tape.mean(total);
        Ok(LossOutput {
            loss: tape.neg(mean),
            bound,
        })
    }

    /// Posterior means `(B, ℓ)`.
    pub fn latent_mean(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new(0);
        tape.set_training(false);
        let (mu, _, _) = self.encode(&mut tape, batch)?;
        Ok(tape.value(mu).clone())
    }

    /// Likelihood modes at latent codes `z: (B, ℓ)`.
    pub fn decode_modes(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new(0);
        tape.set_training(false);
        let zv = tape.constant(z.clone());
        let vars = self.bind_decoder(&mut tape)?;
        let y = self.trunk.forward(&mut tape, &vars.trunk, zv)?;
        (0..self.modalities.len())
            .map(|d| {
                let np = self.head_params(&mut tape, &vars, y, d)?;
                Ok(likelihoods::impute(&tape, &np))
            })
            .collect()
    }

    /// Imputation by the modes of `q(z|X)` and of every likelihood.
    pub fn reconstruct(&self, batch: &Batch) -> Result<Vec<Tensor>> {
        let z = self.latent_mean(batch)?;
        self.decode_modes(&z)
    }
}
