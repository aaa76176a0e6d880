//! Seeded synthetic datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use super::{Batch, Dataset, Modality};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::likelihoods::Family;

/// Layout of the heterogeneous tabular generator. Every column is driven by
/// a shared low-dimensional Gaussian factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeteroSpec {
    pub latent: usize,
    pub normal: usize,
    pub lognormal: usize,
    pub poisson: usize,
    /// Range of the per-row Poisson rate; the population mean is the midpoint.
    pub poisson_rate: (f64, f64),
    pub categorical: usize,
    pub classes: usize,
    /// Scale of the categorical logits.
    pub logit_scale: f64,
}

impl Default for HeteroSpec {
    fn default() -> Self {
        Self {
            latent: 2,
            normal: 2,
            lognormal: 1,
            poisson: 1,
            poisson_rate: (20.0, 80.0),
            categorical: 2,
            classes: 4,
            logit_scale: 2.0,
        }
    }
}

impl HeteroSpec {
    pub fn mean_rate(&self) -> f64 {
        0.5 * (self.poisson_rate.0 + self.poisson_rate.1)
    }

    pub fn modalities(&self) -> Result<Vec<Modality>> {
        let mut m = Vec::new();
        for i in 0..self.normal {
            m.push(Modality::new(format!("normal{i}"), Family::Normal, 1)?);
        }
        for i in 0..self.lognormal {
            m.push(Modality::new(format!("lognormal{i}"), Family::LogNormal, 1)?);
        }
        for i in 0..self.poisson {
            m.push(Modality::new(format!("poisson{i}"), Family::Poisson, 1)?);
        }
        for i in 0..self.categorical {
            m.push(Modality::new(
                format!("categorical{i}"),
                Family::Categorical { classes: self.classes },
                1,
            )?);
        }
        Ok(m)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Heterogeneous table whose Poisson rate is uniform on `poisson_rate`
/// across rows (a standardized latent projection pushed through Φ).
pub fn synth_hetero(seed: u64, n: usize, spec: &HeteroSpec) -> Result<Dataset> {
    if spec.latent == 0 || spec.classes < 2 {
        return Err(Error::invalid("the generator needs a latent factor and at least two classes"));
    }
    let (lo, hi) = spec.poisson_rate;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::invalid(format!("invalid Poisson rate range {:?}", spec.poisson_rate)));
    }
    let modalities = spec.modalities()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = spec.latent;
    let normal_w: Vec<Vec<f64>> = (0..spec.normal).map(|_| gaussian_vec(&mut rng, l)).collect();
    let lognormal_w: Vec<Vec<f64>> = (0..spec.lognormal).map(|_| unit(gaussian_vec(&mut rng, l))).collect();
    let poisson_w: Vec<Vec<f64>> = (0..spec.poisson).map(|_| unit(gaussian_vec(&mut rng, l))).collect();
    let cat_w: Vec<Vec<Vec<f64>>> = (0..spec.categorical)
        .map(|_| (0..spec.classes).map(|_| gaussian_vec(&mut rng, l)).collect())
        .collect();
    let phi = NormalDist::standard();

    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); modalities.len()];
    for _ in 0..n {
        let z = gaussian_vec(&mut rng, l);
        let mut c = 0;
        for w in &normal_w {
            let e: f64 = rng.sample(StandardNormal);
            cols[c].push(dot(w, &z) + 0.5 * e);
            c += 1;
        }
        for w in &lognormal_w {
            let e: f64 = rng.sample(StandardNormal);
            cols[c].push((0.5 * dot(w, &z) + 0.25 * e).exp());
            c += 1;
        }
        for w in &poisson_w {
            let rate = lo + (hi - lo) * phi.cdf(dot(w, &z));
            let x: f64 = Poisson::new(rate).expect("positive rate").sample(&mut rng);
            cols[c].push(x);
            c += 1;
        }
        for ws in &cat_w {
            let logits: Vec<f64> = ws.iter().map(|w| spec.logit_scale * dot(w, &z)).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
            let total: f64 = p.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut k = p.len() - 1;
            for (i, pi) in p.iter().enumerate() {
                if u < *pi {
                    k = i;
                    break;
                }
                u -= pi;
            }
            cols[c].push(k as f64);
            c += 1;
        }
    }
    let values = cols
        .into_iter()
        .map(|c| Tensor::new(vec![n, 1], c))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(modalities, Batch::dense(values)?)
}

/// Dimensions and noise of the three-modality labelled generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimodalSpec {
    pub classes: usize,
    pub m_dim: usize,
    pub m_noise: f64,
    pub s_dim: usize,
    pub s_noise: f64,
    pub s_scale: f64,
    /// Probability that the text label is redrawn uniformly.
    pub label_noise: f64,
}

impl TrimodalSpec {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            m_dim: 16,
            m_noise: 0.5,
            s_dim: 64,
            s_noise: 1.0,
            s_scale: 0.5,
            label_noise: 0.05,
        }
    }
}

/// Shared label `c`; `M` and `S` are Gaussian around class prototypes and
/// `T` is the label itself, redrawn uniformly with probability `label_noise`.
pub fn synth_trimodal(seed: u64, n: usize, spec: &TrimodalSpec) -> Result<Dataset> {
    let c_count = spec.classes;
    if c_count < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {c_count}")));
    }
    let modalities = vec![
        Modality::new("M", Family::Normal, spec.m_dim)?,
        Modality::new("S", Family::Normal, spec.s_dim)?,
        Modality::new("T", Family::Categorical { classes: c_count }, 1)?,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proto_m: Vec<Vec<f64>> = (0..c_count).map(|_| gaussian_vec(&mut rng, spec.m_dim)).collect();
    let proto_s: Vec<Vec<f64>> = (0..c_count)
        .map(|_| gaussian_vec(&mut rng, spec.s_dim).iter().map(|v| v * spec.s_scale).collect())
        .collect();
    let mut m = Vec::with_capacity(n * spec.m_dim);
    let mut s = Vec::with_capacity(n * spec.s_dim);
    let mut t = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..c_count);
        labels.push(c);
        for p in &proto_m[c] {
            let e: f64 = rng.sample(StandardNormal);
            m.push(p + spec.m_noise * e);
        }
        for p in &proto_s[c] {
            let e: f64 = rng.sample(StandardNormal);
            s.push(p + spec.s_noise * e);
        }
        let text = if rng.random::<f64>() < spec.label_noise {
            rng.random_range(0..c_count)
        } else {
            c
        };
        t.push(text as f64);
    }
    let data = Batch::new(
        vec![
            Tensor::new(vec![n, spec.m_dim], m)?,
            Tensor::new(vec![n, spec.s_dim], s)?,
            Tensor::new(vec![n, 1], t)?,
        ],
        vec![None, None, None],
        Some(labels),
    )?;
    Dataset::new(modalities, data)
}
