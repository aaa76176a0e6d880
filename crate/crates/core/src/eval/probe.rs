use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm, gemm_at_b, Tensor};
use crate::data::{Batch, Modality};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.05,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression on standardized features, fitted by
/// full-batch gradient descent with Adam step sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticProbe {
    pub classes: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `(features, classes)` row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn softmax_rows(logits: &mut [f64], classes: usize) {
    for row in logits.chunks_mut(classes) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
}

impl LogisticProbe {
    pub fn fit(x: &Tensor, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if x.rank() != 2 || x.rows() == 0 || x.rows() != labels.len() {
            return Err(Error::invalid("probe needs (n, features) inputs with one label per row"));
        }
        if classes < 2 || labels.iter().any(|&c| c >= classes) {
            return Err(Error::invalid(format!("labels must lie in 0..{classes} with at least 2 classes")));
        }
        let (n, f) = (x.rows(), x.last_dim());
        let mut mean = vec![0.0; f];
        let mut scale = vec![0.0; f];
        for r in 0..n {
            for (j, v) in x.row(r).iter().enumerate() {
                mean[j] += v / n as f64;
            }
        }
        for r in 0..n {
            for (j, v) in x.row(r).iter().enumerate() {
                scale[j] += (v - mean[j]).powi(2) / n as f64;
            }
        }
        scale.iter_mut().for_each(|s| *s = if *s > 1e-12 { s.sqrt() } else { 1.0 });
        let mut probe = Self {
            classes,
            weights: {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                (0..f * classes).map(|_| (rng.random::<f64>() - 0.5) * 0.02).collect()
            },
            bias: vec![0.0; classes],
            mean,
            scale,
        };
        let z = probe.standardize(x);
        let params = f * classes + classes;
        let (mut m1, mut m2) = (vec![0.0; params], vec![0.0; params]);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut p = vec![0.0; n * classes];
        let mut gw = vec![0.0; f * classes];
        for step in 1..=cfg.epochs {
            probe.logits_into(&z, n, &mut p);
            softmax_rows(&mut p, classes);
            for (r, &c) in labels.iter().enumerate() {
                p[r * classes + c] -= 1.0;
            }
            p.iter_mut().for_each(|v| *v /= n as f64);
            gemm_at_b(f, n, classes, &z, &p, &mut gw, false);
            let mut grad = Vec::with_capacity(params);
            grad.extend(gw.iter().zip(&probe.weights).map(|(g, w)| g + cfg.l2 * w));
            grad.extend((0..classes).map(|c| p.iter().skip(c).step_by(classes).sum::<f64>()));
            let (c1, c2) = (1.0 - b1.powi(step as i32), 1.0 - b2.powi(step as i32));
            for (i, g) in grad.iter().enumerate() {
                m1[i] = b1 * m1[i] + (1.0 - b1) * g;
                m2[i] = b2 * m2[i] + (1.0 - b2) * g * g;
                let delta = cfg.learning_rate * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
                if i < f * classes {
                    probe.weights[i] -= delta;
                } else {
                    probe.bias[i - f * classes] -= delta;
                }
            }
        }
        Ok(probe)
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, x: &Tensor) -> Vec<f64> {
        let f = self.features();
        x.data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % f]) / self.scale[i % f])
            .collect()
    }

    fn logits_into(&self, z: &[f64], n: usize, out: &mut [f64]) {
        gemm(n, self.features(), self.classes, z, &self.weights, out, false);
        for row in out.chunks_mut(self.classes) {
            row.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        if x.rank() != 2 || x.last_dim() != self.features() {
            return Err(Error::invalid(format!(
                "probe expects {} features, got shape {:?}",
                self.features(),
                x.shape()
            )));
        }
        let n = x.rows();
        let mut out = vec![0.0; n * self.classes];
        self.logits_into(&self.standardize(x), n, &mut out);
        Ok(out.chunks(self.classes).map(crate::likelihoods::argmax).collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.len() != x.rows() || labels.is_empty() {
            return Err(Error::invalid("one label per row is required"));
        }
        let pred = self.predict(x)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
    }
}

/// One probe per modality, classifying the shared label from that modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub modalities: Vec<Modality>,
    pub probes: Vec<LogisticProbe>,
}

impl ProbeSet {
    pub fn fit(modalities: &[Modality], data: &Batch, classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let labels = data
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("probes need labelled data"))?;
        let probes = modalities
            .iter()
            .enumerate()
            .map(|(d, m)| LogisticProbe::fit(&m.encode_input(&data.values[d], None), labels, classes, cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            modalities: modalities.to_vec(),
            probes,
        })
    }

    /// Accuracy of the modality-`d` probe on values `x` of that modality.
    pub fn accuracy(&self, d: usize, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let m = self
            .modalities
            .get(d)
            .ok_or_else(|| Error::invalid(format!("no probe for modality {d}")))?;
        self.probes[d].accuracy(&m.encode_input(x, None), labels)
    }
}
