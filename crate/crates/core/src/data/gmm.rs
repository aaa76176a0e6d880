use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 200;
pub const TOLERANCE: f64 = 1e-6;
pub const VARIANCE_FLOOR: f64 = 1e-8;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal-covariance Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    /// Mean log-likelihood after every EM iteration.
    pub trace: Vec<f64>,
}

/// Component count used for post-hoc sampling: `min(100, n / 50)`, at least 1.
pub fn default_components(n: usize) -> usize {
    (n / 50).clamp(1, 100)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn kmeans_pp(x: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut centers = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = x.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

impl Gmm {
    /// EM from k-means++ seeds; stops after 200 iterations or when the mean
    /// log-likelihood improves by less than 1e-6.
    pub fn fit(x: &Tensor, k: usize, seed: u64) -> Result<Self> {
        if x.rank() != 2 || x.rows() == 0 {
            return Err(Error::invalid("GMM needs a non-empty (n, dim) latent matrix"));
        }
        if k == 0 {
            return Err(Error::invalid("GMM needs at least one component"));
        }
        let (n, dim) = (x.rows(), x.last_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = kmeans_pp(x, k, &mut rng);
        let mut global = vec![0.0; dim];
        let mu: Vec<f64> = (0..dim).map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64).collect();
        for (j, g) in global.iter_mut().enumerate() {
            *g = ((0..n).map(|i| (x.row(i)[j] - mu[j]).powi(2)).sum::<f64>() / n as f64).max(VARIANCE_FLOOR);
        }
        let mut gmm = Gmm {
            weights: vec![1.0 / k as f64; k],
            means,
            variances: vec![global; k],
            trace: Vec::new(),
        };
        let mut resp = vec![0.0; n * k];
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..MAX_ITERATIONS {
            // E-step
            let mut ll = 0.0;
            let mut row = vec![0.0; k];
            for i in 0..n {
                for (c, r) in row.iter_mut().enumerate() {
                    *r = gmm.weights[c].ln() + gmm.component_log_density(c, x.row(i));
                }
                let lse = log_sum_exp(&row);
                ll += lse;
                for c in 0..k {
                    resp[i * k + c] = (row[c] - lse).exp();
                }
            }
            // M-step
            for c in 0..k {
                let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
                gmm.weights[c] = nk / n as f64;
                if nk < 1e-12 {
                    continue;
                }
                for j in 0..dim {
                    let m = (0..n).map(|i| resp[i * k + c] * x.row(i)[j]).sum::<f64>() / nk;
                    let v = (0..n).map(|i| resp[i * k + c] * (x.row(i)[j] - m).powi(2)).sum::<f64>() / nk;
                    gmm.means[c][j] = m;
                    gmm.variances[c][j] = v.max(VARIANCE_FLOOR);
                }
            }
            let mean_ll = ll / n as f64;
            gmm.trace.push(mean_ll);
            if (mean_ll - prev).abs() < TOLERANCE {
                break;
            }
            prev = mean_ll;
        }
        Ok(gmm)
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn component_log_density(&self, c: usize, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.means[c])
            .zip(&self.variances[c])
            .map(|((x, m), v)| -0.5 * (LN_2PI + v.ln() + (x - m).powi(2) / v))
            .sum()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .map(|c| self.weights[c].ln() + self.component_log_density(c, x))
            .collect();
        log_sum_exp(&terms)
    }

    /// Draws a component, then a Gaussian sample from it.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Tensor {
        let dim = self.dim();
        let total: f64 = self.weights.iter().sum();
        let mut out = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let mut u = rng.random::<f64>() * total;
            let mut c = self.components() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                if u < *w {
                    c = i;
                    break;
                }
                u -= w;
            }
            for j in 0..dim {
                let e: f64 = rng.sample(StandardNormal);
                out.push(self.means[c][j] + self.variances[c][j].sqrt() * e);
            }
        }
        Tensor::new(vec![n, dim], out).expect("consistent shape")
    }
}
