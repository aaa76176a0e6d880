use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::nn::{Activation, Mlp};
use super::objectives;
use super::vae::SIGMA_FLOOR;
use super::{LossOutput, ModelConfig};
use crate::autodiff::{ParamGroup, ParamStore, Tape, Tensor, Var};
use crate::data::{Batch, Modality};
use crate::error::Result;
use crate::impartiality::{BlockHandle, BlockInventory, Goal, HeadSpec, ImpartialityBlock, ImpartialityConfig};
use crate::likelihoods::{self, Family, NaturalParams};

/// Per-batch normalization of real-valued features: `(x − m) / s`, computed
/// in log space for positive features.
#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    /// `(mean, std)` per entry of every Gaussian modality, `None` otherwise.
    pub stats: Vec<Option<Vec<(f64, f64)>>>,
}

impl NormLayer {
    pub fn fit(modalities: &[Modality], batch: &Batch) -> Self {
        let stats = modalities
            .iter()
            .enumerate()
            .map(|(d, m)| {
                let log = match m.spec.family {
                    Family::Normal => false,
                    Family::LogNormal => true,
                    _ => return None,
                };
                let x = &batch.values[d];
                let dim = m.dim();
                Some(
                    (0..dim)
                        .map(|j| {
                            let vals: Vec<f64> = (0..x.rows())
                                .filter(|&r| batch.mask(d).is_none_or(|mk| mk.data()[r * dim + j] != 0.0))
                                .map(|r| {
                                    let v = x.data()[r * dim + j];
                                    if log {
                                        v.ln()
                                    } else {
                                        v
                                    }
                                })
                                .collect();
                            if vals.is_empty() {
                                return (0.0, 1.0);
                            }
                            let n = vals.len() as f64;
                            let mean = vals.iter().sum::<f64>() / n;
                            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                            let sd = var.sqrt();
                            (mean, if sd > 1e-8 { sd } else { 1.0 })
                        })
                        .collect(),
                )
            })
            .collect();
        Self { stats }
    }

    fn log_space(family: &Family) -> bool {
        matches!(family, Family::LogNormal)
    }

    /// Normalized copy of modality `d`.
    pub fn normalize(&self, modality: &Modality, d: usize, x: &Tensor) -> Tensor {
        let Some(st) = &self.stats[d] else { return x.clone() };
        let dim = modality.dim();
        let log = Self::log_space(&modality.spec.family);
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (m, s) = st[i % dim];
                if log {
                    ((v.ln() - m) / s).exp()
                } else {
                    (v - m) / s
                }
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn denormalize(&self, modality: &Modality, d: usize, x: &Tensor) -> Tensor {
        let Some(st) = &self.stats[d] else { return x.clone() };
        let dim = modality.dim();
        let log = Self::log_space(&modality.spec.family);
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (m, s) = st[i % dim];
                if log {
                    (v.ln() * s + m).exp()
                } else {
                    v * s + m
                }
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    /// Change-of-variables term `log |dx'/dx|` per row, over observed entries.
    fn log_jacobian(&self, modality: &Modality, d: usize, x: &Tensor, mask: Option<&Tensor>) -> Option<Tensor> {
        let st = self.stats[d].as_ref()?;
        let dim = modality.dim();
        let log = Self::log_space(&modality.spec.family);
        let rows = x.rows();
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            for j in 0..dim {
                let i = r * dim + j;
                if mask.is_some_and(|m| m.data()[i] == 0.0) {
                    continue;
                }
                let (m, s) = st[j];
                out[r] += if log {
                    // x' = exp((ln x − m)/s): ln x' − ln s − ln x
                    (x.data()[i].ln() - m) / s - s.ln() - x.data()[i].ln()
                } else {
                    -s.ln()
                };
            }
        }
        Some(Tensor::vector(out))
    }

    /// Normalized batch (masked entries keep a valid placeholder).
    pub fn apply(&self, modalities: &[Modality], batch: &Batch) -> Batch {
        let values = modalities
            .iter()
            .enumerate()
            .map(|(d, m)| {
                let x = match (&batch.masks[d], m.spec.family) {
                    // keep unobserved entries inside the support before the log
                    (Some(mask), Family::LogNormal) => Tensor::new(
                        batch.values[d].shape().to_vec(),
                        batch.values[d]
                            .data()
                            .iter()
                            .zip(mask.data())
                            .map(|(&v, &o)| if o == 0.0 { 1.0 } else { v })
                            .collect(),
                    )
                    .expect("same shape"),
                    _ => batch.values[d].clone(),
                };
                self.normalize(m, d, &x)
            })
            .collect();
        Batch {
            values,
            masks: batch.masks.clone(),
            labels: batch.labels.clone(),
        }
    }
}

/// Hierarchical VAE with a categorical `s`, a Gaussian `z | s`, a Gaussian
/// mixture prior and heads reading `[y, s]`.
#[derive(Clone, Debug)]
pub struct HiVae {
    config: ModelConfig,
    modalities: Vec<Modality>,
    store: ParamStore,
    s_encoder: Mlp,
    z_encoder: Mlp,
    prior_mean: Mlp,
    y_layer: Mlp,
    heads: Vec<Mlp>,
    inventory: BlockInventory,
}

struct Encoded {
    s_logits: Var,
    s: Var,
    mu: Var,
    sigma: Var,
    z: Var,
}

impl HiVae {
    pub fn new(config: ModelConfig, modalities: Vec<Modality>, seed: u64) -> Result<Self> {
        let d_in: usize = modalities.iter().map(Modality::input_width).sum();
        let dz = config.latent.unwrap_or(config.hivae.d_z).max(1);
        let ds = config.hivae.d_s;
        let h = config.hidden.unwrap_or(5 * modalities.len()).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = ParamGroup::Encoder(0);
        let id = Activation::Identity;
        let s_encoder = Mlp::new(&mut store, "encoder.s", &[d_in, ds], id, false, enc, &mut rng)?;
        let z_encoder = Mlp::new(&mut store, "encoder.z", &[d_in + ds, 2 * dz], id, false, enc, &mut rng)?;
        let prior_mean = Mlp::new(&mut store, "prior.mean", &[ds, dz], id, false, ParamGroup::Shared, &mut rng)?;
        let y_layer = Mlp::new(&mut store, "decoder.y", &[dz, h], id, false, ParamGroup::Shared, &mut rng)?;
        let heads = modalities
            .iter()
            .enumerate()
            .map(|(d, m)| {
                Mlp::new(
                    &mut store,
                    &format!("decoder.head{d}"),
                    &[h + ds, m.spec.raw_width()],
                    id,
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
            s_encoder,
            z_encoder,
            prior_mean,
            y_layer,
            heads,
            inventory,
        })
    }

    fn build_inventory(config: &ModelConfig, modalities: &[Modality]) -> Result<BlockInventory> {
        let imp = &config.impartiality;
        let mut inv = BlockInventory::new();
        if imp.is_active(Goal::Li) {
            let heads = modalities
                .iter()
                .map(|m| HeadSpec {
                    label: m.name.clone(),
                    beta: imp.beta(Goal::Li, m.dim()),
                })
                .collect();
            inv.push(ImpartialityBlock::from_config(
                imp,
                "li",
                Goal::Li,
                vec!["y".into(), "s".into()],
                heads,
            )?)?;
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
        self.z_encoder.output_width() / 2
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

    /// Encoder input: normalized real features, `ln(1 + x)` for counts.
    fn input(&self, norm: &Batch) -> Tensor {
        let parts: Vec<Tensor> = self
            .modalities
            .iter()
            .enumerate()
            .map(|(d, m)| {
                let t = m.encode_input(&norm.values[d], norm.mask(d));
                match m.spec.family {
                    Family::Poisson => t.map(f64::ln_1p),
                    Family::LogNormal => {
                        // encoder sees the normalized log value
                        let mask = norm.mask(d);
                        Tensor::new(
                            t.shape().to_vec(),
                            t.data()
                                .iter()
                                .enumerate()
                                .map(|(i, &v)| {
                                    if mask.is_some_and(|mk| mk.data()[i] == 0.0) {
                                        0.0
                                    } else {
                                        v.ln()
                                    }
                                })
                                .collect(),
                        )
                        .expect("same shape")
                    }
                    _ => t,
                }
            })
            .collect();
        super::concat_columns(&parts)
    }

    fn encode(&self, tape: &mut Tape, norm: &Batch) -> Result<Encoded> {
        let x = tape.constant(self.input(norm));
        let sp = self.s_encoder.bind(tape, &self.store)?;
        let s_logits = self.s_encoder.forward(tape, &sp, x)?;
        let s = if tape.is_training() {
            let g = tape.gumbel_softmax(s_logits, self.config.hivae.tau, 1)?;
            let b = tape.shape(s_logits).to_vec();
            tape.reshape(g, &b)?
        } else {
            let v = tape.value(s_logits);
            let ds = v.last_dim();
            let mut hot = vec![0.0; v.len()];
            for r in 0..v.rows() {
                hot[r * ds + likelihoods::argmax(v.row(r))] = 1.0;
            }
            tape.constant(Tensor::new(v.shape().to_vec(), hot)?)
        };
        let xs = tape.concat(&[x, s], 1)?;
        let zp = self.z_encoder.bind(tape, &self.store)?;
        let out = self.z_encoder.forward(tape, &zp, xs)?;
        let (mu, sigma) = super::nn::gaussian_head(tape, out, self.latent_dim(), SIGMA_FLOOR)?;
        let z = if tape.is_training() {
            let z = tape.reparam_normal(mu, sigma, 1)?;
            let b = tape.shape(mu).to_vec();
            tape.reshape(z, &b)?
        } else {
            mu
        };
        Ok(Encoded {
            s_logits,
            s,
            mu,
            sigma,
            z,
        })
    }

    fn head_params(&self, tape: &mut Tape, y: Var, s: Var, d: usize) -> Result<NaturalParams> {
        let ys = tape.concat(&[y, s], 1)?;
        let p = self.heads[d].bind(tape, &self.store)?;
        let raw = self.heads[d].forward(tape, &p, ys)?;
        likelihoods::constrain(&self.modalities[d].spec, tape, raw)
    }

    pub fn loss(&mut self, tape: &mut Tape, batch: &Batch) -> Result<LossOutput> {
        let norm_layer = NormLayer::fit(&self.modalities, batch);
        let norm = norm_layer.apply(&self.modalities, batch);
        let e = self.encode(tape, &norm)?;
        let yp = self.y_layer.bind(tape, &self.store)?;
        let y = self.y_layer.forward(tape, &yp, e.z)?;
        let handle = BlockHandle::open(tape, self.inventory.get("li"), vec![vec![y], vec![e.s]], self.modalities.len())?;
        let mut rec: Option<Var> = None;
        for d in 0..self.modalities.len() {
            let yd = handle.input1(tape, 0, d)?;
            let sd = handle.input1(tape, 1, d)?;
            let np = self.head_params(tape, yd, sd, d)?;
            let mut lp = likelihoods::log_prob(tape, &np, &norm.values[d], norm.mask(d))?;
            if let Some(j) = norm_layer.log_jacobian(&self.modalities[d], d, &batch.values[d], batch.mask(d)) {
                let jc = tape.constant(j);
                lp = tape.add(lp, jc)?;
            }
            let lp = handle.output(tape, d, lp)?;
            rec = Some(match rec {
                Some(r) => tape.add(r, lp)?,
                None => lp,
            });
        }
        handle.close(tape)?;
        let rec = rec.expect("at least one modality");

        // KL(q(s|X) ‖ uniform) = Σ π log π + log d_s
        let logp = tape.log_softmax(e.s_logits);
        let pi = tape.exp(logp);
        let ent = tape.mul(pi, logp)?;
        let kl_s = tape.sum_axis(ent, 1)?;
        let kl_s = tape.offset(kl_s, (self.config.hivae.d_s as f64).ln());
        let pp = self.prior_mean.bind(tape, &self.store)?;
        let m0 = self.prior_mean.forward(tape, &pp, e.s)?;
        let kl_z = objectives::kl_normal_unit(tape, e.mu, e.sigma, Some(m0))?;
        let kl = tape.add(kl_s, kl_z)?;
        let obj = tape.sub(rec, kl)?;
        let mean = tape.mean(obj);
        let bound = tape.value(mean).item();
        Ok(LossOutput {
            loss: tape.neg(mean),
            bound,
        })
    }

    /// Mode of `z` under the most likely `s`.
    pub fn latent_mean(&self, batch: &Batch) -> Result<Tensor> {
        let norm = NormLayer::fit(&self.modalities, batch).apply(&self.modalities, batch);
        let mut tape = Tape::new(0);
        tape.set_training(false);
        let e = self.encode(&mut tape, &norm)?;
        Ok(tape.value(e.mu).clone())
    }

    /// Modes for `z` with `s` set to the component whose prior mean is closest.
    /// Values are in the normalization of `reference`.
    pub fn decode_modes(&self, z: &Tensor, reference: &Batch) -> Result<Vec<Tensor>> {
        let norm_layer = NormLayer::fit(&self.modalities, reference);
        let mut tape = Tape::new(0);
        tape.set_training(false);
        let ds = self.config.hivae.d_s;
        let eye = Tensor::new(vec![ds, ds], (0..ds * ds).map(|i| f64::from(u8::from(i % (ds + 1) == 0))).collect())?;
        let ev = tape.constant(eye);
        let pp = self.prior_mean.bind(&mut tape, &self.store)?;
        let means = self.prior_mean.forward(&mut tape, &pp, ev)?;
        let mv = tape.value(means).clone();
        let rows = z.rows();
        let dz = z.last_dim();
        let mut hot = vec![0.0; rows * ds];
        for r in 0..rows {
            let zr = z.row(r);
            let best = (0..ds)
                .min_by(|&a, &b| {
                    let da: f64 = mv.row(a).iter().zip(zr).map(|(m, v)| (m - v).powi(2)).sum();
                    let db: f64 = mv.row(b).iter().zip(zr).map(|(m, v)| (m - v).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .expect("d_s >= 2");
            hot[r * ds + best] = 1.0;
        }
        debug_assert_eq!(dz, self.latent_dim());
        let s = tape.constant(Tensor::new(vec![rows, ds], hot)?);
        let zv = tape.constant(z.clone());
        self.decode_with(&mut tape, zv, s, &norm_layer)
    }

    fn decode_with(&self, tape: &mut Tape, z: Var, s: Var, norm_layer: &NormLayer) -> Result<Vec<Tensor>> {
        let yp = self.y_layer.bind(tape, &self.store)?;
        let y = self.y_layer.forward(tape, &yp, z)?;
        (0..self.modalities.len())
            .map(|d| {
                let np = self.head_params(tape, y, s, d)?;
                let mode = likelihoods::impute(tape, &np);
                Ok(norm_layer.denormalize(&self.modalities[d], d, &mode))
            })
            .collect()
    }

    pub fn reconstruct(&self, batch: &Batch) -> Result<Vec<Tensor>> {
        let norm_layer = NormLayer::fit(&self.modalities, batch);
        let norm = norm_layer.apply(&self.modalities, batch);
        let mut tape = Tape::new(0);
        tape.set_training(false);
        let e = self.encode(&mut tape, &norm)?;
        self.decode_with(&mut tape, e.z, e.s, &norm_layer)
    }
}
