use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::nn::{gaussian_head, Activation, Mlp};
use super::objectives;
use super::vae::SIGMA_FLOOR;
use super::{LossKind, LossOutput, ModelConfig, ModelKind};
use crate::autodiff::{ParamGroup, ParamStore, Tape, Tensor, Var};
use crate::data::{Batch, Modality};
use crate::error::{Error, Result};
use crate::impartiality::{BlockHandle, BlockInventory, Goal, HeadSpec, ImpartialityBlock, ImpartialityConfig};
use crate::likelihoods;

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LATENT: usize = 10;
const MAX_MODALITIES: usize = 16;

/// Expert sets: one for MVAE, singletons for MMVAE, every non-empty subset
/// for MoPoE (ordered by bitmask).
pub fn expert_sets(kind: ModelKind, d: usize) -> Result<Vec<Vec<usize>>> {
    if d == 0 {
        return Err(Error::invalid("mixture models need at least one modality"));
    }
    if d > MAX_MODALITIES {
        return Err(Error::invalid(format!(
            "{d} modalities exceed the supported {MAX_MODALITIES} (2^D - 1 experts)"
        )));
    }
    Ok(match kind {
        ModelKind::Mvae => vec![(0..d).collect()],
        ModelKind::Mmvae => (0..d).map(|i| vec![i]).collect(),
        ModelKind::Mopoe => (1usize..1 << d)
            .map(|mask| (0..d).filter(|i| mask >> i & 1 == 1).collect())
            .collect(),
        other => return Err(Error::invalid(format!("{other} is not a mixture model"))),
    })
}

/// Precision-weighted product of Gaussian experts, optionally with the
/// standard normal prior as one more factor.
pub fn product_of_experts(tape: &mut Tape, factors: &[(Var, Var)], include_prior: bool) -> Result<(Var, Var)> {
    match factors {
        [] => Err(Error::invalid("empty product of experts")),
        [single] if !include_prior => Ok(*single),
        _ => {
            let mut precision: Option<Var> = None;
            let mut weighted: Option<Var> = None;
            for &(mu, sigma) in factors {
                let s2 = tape.square(sigma);
                let one = tape.constant(Tensor::scalar(1.0));
                let t = tape.div(one, s2)?;
                let mt = tape.mul(mu, t)?;
                precision = Some(match precision {
                    Some(p) => tape.add(p, t)?,
                    None => t,
                });
                weighted = Some(match weighted {
                    Some(w) => tape.add(w, mt)?,
                    None => mt,
                });
            }
            let mut precision = precision.expect("non-empty");
            if include_prior {
                precision = tape.offset(precision, 1.0);
            }
            let mu = tape.div(weighted.expect("non-empty"), precision)?;
            let one = tape.constant(Tensor::scalar(1.0));
            let var = tape.div(one, precision)?;
            Ok((mu, tape.sqrt(var)))
        }
    }
}

/// Multimodal VAE with one encoder/decoder pair per modality and a mixture
/// of products of experts as variational posterior.
#[derive(Clone, Debug)]
pub struct Mixture {
    config: ModelConfig,
    modalities: Vec<Modality>,
    store: ParamStore,
    latent: usize,
    encoders: Vec<Mlp>,
    decoders: Vec<Mlp>,
    experts: Vec<Vec<usize>>,
    inventory: BlockInventory,
}

impl Mixture {
    pub fn new(config: ModelConfig, modalities: Vec<Modality>, seed: u64) -> Result<Self> {
        let experts = expert_sets(config.kind, modalities.len())?;
        let latent = config.latent.unwrap_or(DEFAULT_LATENT).max(1);
        let h = config.hidden.unwrap_or(DEFAULT_HIDDEN);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        for (d, m) in modalities.iter().enumerate() {
            encoders.push(Mlp::new(
                &mut store,
                &format!("encoder{d}"),
                &[m.input_width(), h, h, 2 * latent],
                Activation::Relu,
                false,
                ParamGroup::Encoder(d),
                &mut rng,
            )?);
        }
        for (d, m) in modalities.iter().enumerate() {
            decoders.push(Mlp::new(
                &mut store,
                &format!("decoder{d}"),
                &[latent, h, h, m.spec.raw_width()],
                Activation::Relu,
                false,
                ParamGroup::Decoder(d),
                &mut rng,
            )?);
        }
        let mut model = Self {
            config,
            modalities,
            store,
            latent,
            encoders,
            decoders,
            experts,
            inventory: BlockInventory::new(),
        };
        model.inventory = model.build_inventory()?;
        Ok(model)
    }

    pub fn expert_label(&self, a: usize) -> String {
        let names: Vec<&str> = self.experts[a].iter().map(|&d| self.modalities[d].name.as_str()).collect();
        format!("{{{}}}", names.join(","))
    }

    fn build_inventory(&self) -> Result<BlockInventory> {
        let imp = &self.config.impartiality;
        let mut inv = BlockInventory::new();
        let decoder_heads: Vec<HeadSpec> = self
            .modalities
            .iter()
            .map(|m| HeadSpec {
                label: m.name.clone(),
                beta: imp.beta(Goal::Li, m.dim()),
            })
            .collect();
        let expert_heads = |goal: Goal| -> Vec<HeadSpec> {
            (0..self.experts.len())
                .map(|a| HeadSpec {
                    label: self.expert_label(a),
                    beta: imp.beta(goal, 1),
                })
                .collect()
        };
        for a in 0..self.experts.len() {
            let z = format!("z{}", self.expert_label(a));
            if imp.is_active(Goal::Li) {
                inv.push(ImpartialityBlock::from_config(
                    imp,
                    format!("li.{a}"),
                    Goal::Li,
                    vec![z.clone()],
                    decoder_heads.clone(),
                )?)?;
            }
            if imp.is_active(Goal::Eei) {
                inv.push(ImpartialityBlock::from_config(
                    imp,
                    format!("eei.{a}"),
                    Goal::Eei,
                    vec![z],
                    expert_heads(Goal::Eei),
                )?)?;
            }
        }
        if imp.is_active(Goal::Dei) {
            for (d, m) in self.modalities.iter().enumerate() {
                inv.push(ImpartialityBlock::from_config(
                    imp,
                    format!("dei.{d}"),
                    Goal::Dei,
                    vec![format!("theta.{}", m.name)],
                    expert_heads(Goal::Dei),
                )?)?;
            }
        }
        Ok(inv)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn experts(&self) -> &[Vec<usize>] {
        &self.experts
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
        self.inventory = self.build_inventory()?;
        Ok(())
    }

    fn encode_modality(&self, tape: &mut Tape, batch: &Batch, d: usize) -> Result<(Var, Var)> {
        let x = tape.constant(self.modalities[d].encode_input(&batch.values[d], batch.mask(d)));
        let p = self.encoders[d].bind(tape, &self.store)?;
        let out = self.encoders[d].forward(tape, &p, x)?;
        gaussian_head(tape, out, self.latent, SIGMA_FLOOR)
    }

    fn expert_posterior(&self, tape: &mut Tape, unimodal: &[Option<(Var, Var)>], members: &[usize]) -> Result<(Var, Var)> {
        let factors: Vec<(Var, Var)> = members
            .iter()
            .map(|&d| unimodal[d].ok_or_else(|| Error::invalid(format!("modality {d} was not encoded"))))
            .collect::<Result<_>>()?;
        product_of_experts(tape, &factors, self.config.include_prior)
    }

    pub fn loss(&mut self, tape: &mut Tape, batch: &Batch) -> Result<LossOutput> {
        let d_count = self.modalities.len();
        let n_exp = self.experts.len();
        let k = self.config.k;
        let unimodal: Vec<Option<(Var, Var)>> = (0..d_count)
            .map(|d| self.encode_modality(tape, batch, d).map(Some))
            .collect::<Result<_>>()?;
        let posts: Vec<(Var, Var)> = self
            .experts
            .iter()
            .map(|e| self.expert_posterior(tape, &unimodal, e))
            .collect::<Result<_>>()?;
        let dens: Vec<(Var, Var)> = if self.config.stl {
            posts.iter().map(|&(m, s)| (tape.detach(m), tape.detach(s))).collect()
        } else {
            posts.clone()
        };
        let dei: Vec<BlockHandle> = (0..d_count)
            .map(|d| {
                let vars = self.decoders[d].bind(tape, &self.store)?;
                BlockHandle::open(tape, self.inventory.get(&format!("dei.{d}")), vec![vars], n_exp)
            })
            .collect::<Result<_>>()?;

        let mut strata = Vec::with_capacity(n_exp);
        for (a, &(mu, sigma)) in posts.iter().enumerate() {
            let z = tape.reparam_normal(mu, sigma, k)?;
            let li = BlockHandle::open(tape, self.inventory.get(&format!("li.{a}")), vec![vec![z]], d_count)?;
            let mut rec: Option<Var> = None;
            for (d, dei_d) in dei.iter().enumerate() {
                let zd = li.input1(tape, 0, d)?;
                let theta = dei_d.input(tape, 0, a)?;
                let raw = self.decoders[d].forward(tape, &theta, zd)?;
                let np = likelihoods::constrain(&self.modalities[d].spec, tape, raw)?;
                let lp = likelihoods::log_prob(tape, &np, &batch.values[d], batch.mask(d))?;
                let lp = li.output(tape, d, lp)?;
                let lp = dei_d.output(tape, a, lp)?;
                rec = Some(match rec {
                    Some(r) => tape.add(r, lp)?,
                    None => lp,
                });
            }
            li.close(tape)?;

            let eei = BlockHandle::open(tape, self.inventory.get(&format!("eei.{a}")), vec![vec![z]], n_exp)?;
            let mut comps = Vec::with_capacity(n_exp);
            for (b, &(m, s)) in dens.iter().enumerate() {
                let ze = eei.input1(tape, 0, b)?;
                let lq = objectives::log_normal(tape, ze, m, s)?;
                let lq = eei.output(tape, b, lq)?;
                let mut shape = vec![1];
                shape.extend_from_slice(tape.shape(lq));
                comps.push(tape.reshape(lq, &shape)?);
            }
            eei.close(tape)?;
            let stacked = tape.concat(&comps, 0)?;
            let lq = tape.log_sum_exp(stacked, 0)?;
            let lq = tape.offset(lq, -(n_exp as f64).ln());

            let lp = objectives::log_standard_normal(tape, z)?;
            let joint = tape.add(rec.expect("at least one modality"), lp)?;
            strata.push(tape.sub(joint, lq)?);
        }
        for h in &dei {
            h.close(tape)?;
        }

        let objective = match self.config.loss {
            LossKind::Elbo => objectives::stratified_elbo(tape, &strata)?,
            LossKind::Iwae | LossKind::Loose => objectives::loose(tape, &strata)?,
            LossKind::Siwae => objectives::siwae(tape, &strata)?,
            LossKind::Dreg => return Err(Error::Unsupported("dreg is defined for the vae only".into())),
        };
        let mean = tape.mean(objective);
        let bound = tape.value(mean).item();
        Ok(LossOutput {
            loss: tape.neg(mean),
            bound,
        })
    }

    /// Latent codes `(B, ℓ)` of the product over `evidence`: one draw from
    /// `q_A`, or its mean when `sample` is false.
    pub fn expert_latent(&self, batch: &Batch, evidence: &[usize], sample: bool, seed: u64) -> Result<Tensor> {
        if evidence.is_empty() || evidence.iter().any(|&d| d >= self.modalities.len()) {
            return Err(Error::invalid(format!("invalid evidence set {evidence:?}")));
        }
        let mut tape = Tape::new(seed);
        tape.set_training(false);
        let mut unimodal = vec![None; self.modalities.len()];
        for &d in evidence {
            unimodal[d] = Some(self.encode_modality(&mut tape, batch, d)?);
        }
        let (mu, sigma) = self.expert_posterior(&mut tape, &unimodal, evidence)?;
        if !sample {
            return Ok(tape.value(mu).clone());
        }
        let z = tape.reparam_normal(mu, sigma, 1)?;
        let shape = tape.shape(mu).to_vec();
        Ok(tape.value(z).reshape(&shape)?)
    }

    /// Modality `target` decoded from latent codes: modes, or one draw each.
    pub fn decode(&self, z: &Tensor, target: usize, sample: bool, seed: u64) -> Result<Tensor> {
        let mut tape = Tape::new(seed);
        tape.set_training(false);
        let zv = tape.constant(z.clone());
        let p = self.decoders[target].bind(&mut tape, &self.store)?;
        let raw = self.decoders[target].forward(&mut tape, &p, zv)?;
        let np = likelihoods::constrain(&self.modalities[target].spec, &mut tape, raw)?;
        Ok(if sample {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            likelihoods::sample(&tape, &np, &mut rng)
        } else {
            likelihoods::impute(&tape, &np)
        })
    }

    /// `x_target ~ p(x_target | Z_A)` with `Z_A ~ q_A(Z | X_A)`.
    pub fn conditional_generate(
        &self,
        batch: &Batch,
        evidence: &[usize],
        target: usize,
        sample: bool,
        seed: u64,
    ) -> Result<Tensor> {
        if target >= self.modalities.len() {
            return Err(Error::invalid(format!("no modality {target}")));
        }
        let z = self.expert_latent(batch, evidence, true, seed)?;
        self.decode(&z, target, sample, seed)
    }

    pub fn latent_mean(&self, batch: &Batch) -> Result<Tensor> {
        let all: Vec<usize> = (0..self.modalities.len()).collect();
        self.expert_latent(batch, &all, false, 0)
    }

    pub fn decode_modes(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        (0..self.modalities.len()).map(|d| self.decode(z, d, false, 0)).collect()
    }

    pub fn reconstruct(&self, batch: &Batch) -> Result<Vec<Tensor>> {
        let z = self.latent_mean(batch)?;
        self.decode_modes(&z)
    }
}
