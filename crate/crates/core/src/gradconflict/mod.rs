//! Gradient-conflict resolvers: maps from a stack of per-head gradients to an
//! equal-length stack whose row-sum is propagated instead of the raw sum.

mod config;
mod linalg;
mod methods;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ResolverChain, ResolverConfig, ResolverKind};
pub use linalg::solve;
pub use methods::{
    cagrad, graddrop, graddrop_with_uniforms, gradnorm, imtl_g, mgda_ub, pcgrad, pcgrad_with_orders, GradNormState,
    CAGRAD_STEPS, CAGRAD_STEP_SIZE, GRADNORM_STEP, MGDA_MAX_ITERS, MGDA_TOLERANCE,
};

use crate::error::{Error, Result};

/// `D × ℓ` matrix of per-head gradients w.r.t. one shared input.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientStack {
    rows: Vec<Vec<f64>>,
    labels: Vec<String>,
}

impl GradientStack {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::invalid("gradient stack needs at least one head"));
        };
        let width = first.len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("gradient stack rows have different lengths"));
        }
        if labels.len() != rows.len() {
            return Err(Error::invalid(format!("{} labels for {} heads", labels.len(), rows.len())));
        }
        if let Some((d, _)) = rows.iter().enumerate().find(|(_, r)| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of head `{}`", labels[d])));
        }
        Ok(Self { rows, labels })
    }

    /// Stack with labels `h0, h1, ...`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let labels = (0..rows.len()).map(|d| format!("h{d}")).collect();
        Self::new(rows, labels)
    }

    pub fn heads(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, d: usize) -> &[f64] {
        &self.rows[d]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn into_rows(self) -> Vec<Vec<f64>> {
        self.rows
    }

    /// Same labels, new rows (shape is trusted).
    pub(crate) fn with_rows(&self, rows: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(rows.len(), self.rows.len());
        Self {
            rows,
            labels: self.labels.clone(),
        }
    }

    /// Column sum: the gradient propagated upstream.
    pub fn sum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.width()];
        for r in &self.rows {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    /// Row mean.
    pub fn mean(&self) -> Vec<f64> {
        let d = self.heads() as f64;
        self.sum().into_iter().map(|v| v / d).collect()
    }

    /// Gram matrix `G Gᵀ`.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        let d = self.heads();
        let mut m = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in i..d {
                let v = dot(&self.rows[i], &self.rows[j]);
                m[i][j] = v;
                m[j][i] = v;
            }
        }
        m
    }

    pub fn norms(&self) -> Vec<f64> {
        self.rows.iter().map(|r| dot(r, r).sqrt()).collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One resolver with its persistent memory and random stream.
#[derive(Clone, Debug)]
pub struct Resolver {
    config: ResolverConfig,
    gradnorm: GradNormState,
    rng: ChaCha8Rng,
}

impl Resolver {
    pub fn new(config: ResolverConfig, seed: u64) -> Self {
        Self {
            config,
            gradnorm: GradNormState::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn config(&self) -> &ResolverConfig {
        &self.config
    }

    pub fn gradnorm_state(&self) -> &GradNormState {
        &self.gradnorm
    }

    pub fn resolve(&mut self, stack: &GradientStack) -> Result<GradientStack> {
        let alpha = self.config.alpha;
        match self.config.kind {
            ResolverKind::Identity => Ok(stack.clone()),
            ResolverKind::MgdaUb => Ok(mgda_ub(stack).0),
            ResolverKind::ImtlG => Ok(imtl_g(stack)?.0),
            ResolverKind::CaGrad => Ok(cagrad(stack, alpha)),
            ResolverKind::GradNorm => Ok(gradnorm(&mut self.gradnorm, alpha, stack)),
            ResolverKind::GradDrop => Ok(graddrop(stack, &mut self.rng)),
            ResolverKind::PcGrad => Ok(pcgrad(stack, &mut self.rng)),
        }
    }
}

/// A sequence of resolvers applied one after another.
#[derive(Clone, Debug)]
pub struct ChainResolver {
    stages: Vec<Resolver>,
}

impl ChainResolver {
    /// Each stage gets its own stream derived from `seed`.
    pub fn new(chain: &ResolverChain, seed: u64) -> Self {
        let stages = chain
            .stages()
            .iter()
            .enumerate()
            .map(|(i, cfg)| Resolver::new(cfg.clone(), seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))))
            .collect();
        Self { stages }
    }

    pub fn stages(&self) -> &[Resolver] {
        &self.stages
    }

    pub fn resolve(&mut self, stack: &GradientStack) -> Result<GradientStack> {
        let mut current = stack.clone();
        for stage in &mut self.stages {
            current = stage.resolve(&current)?;
        }
        Ok(current)
    }
}

#[cfg(test)]
mod tests;
