use serde::{Deserialize, Serialize};

use crate::gradconflict::{ResolverChain, ResolverConfig, ResolverKind};

/// Magnitude-aware options: nothing, GradNorm, MGDA-UB, IMTL-G.
pub const MAGNITUDE: [Option<ResolverKind>; 4] = [
    None,
    Some(ResolverKind::GradNorm),
    Some(ResolverKind::MgdaUb),
    Some(ResolverKind::ImtlG),
];

/// Direction-aware options: nothing, GradDrop, PCGrad.
pub const DIRECTION: [Option<ResolverKind>; 3] = [None, Some(ResolverKind::GradDrop), Some(ResolverKind::PcGrad)];

/// The 12 magnitude-then-direction chains. With `gradnorm_alphas`, GradNorm
/// entries are repeated once per α.
pub fn resolver_grid(gradnorm_alphas: &[f64]) -> Vec<ResolverChain> {
    let alphas: Vec<f64> = if gradnorm_alphas.is_empty() {
        vec![ResolverKind::GradNorm.default_alpha()]
    } else {
        gradnorm_alphas.to_vec()
    };
    let mut grid = Vec::new();
    for mag in MAGNITUDE {
        let mag_opts: Vec<Option<ResolverConfig>> = match mag {
            None => vec![None],
            Some(ResolverKind::GradNorm) => alphas
                .iter()
                .map(|&a| Some(ResolverConfig::new(ResolverKind::GradNorm, a).expect("valid alpha")))
                .collect(),
            Some(k) => vec![Some(ResolverConfig::of(k))],
        };
        for m in mag_opts {
            for dir in DIRECTION {
                let stages: Vec<ResolverConfig> = m.iter().cloned().chain(dir.map(ResolverConfig::of)).collect();
                grid.push(if stages.is_empty() {
                    ResolverChain::identity()
                } else {
                    ResolverChain::new(stages)
                });
            }
        }
    }
    grid
}

/// Per-seed validation metrics of one candidate (lower is better).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub name: String,
    pub metrics: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Summary {
            median: f64::INFINITY,
            mean: f64::INFINITY,
            std: f64::INFINITY,
        };
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    Summary { median, mean, std }
}

/// Index of the winner: lowest median, then lowest mean, then lowest spread.
/// Candidates with failed seeds rank by their finite seeds only.
pub fn select_best(candidates: &[Candidate]) -> Option<usize> {
    let key = |c: &Candidate| {
        let s = summarize(&c.metrics);
        (s.median, s.mean, s.std)
    };
    (0..candidates.len()).min_by(|&a, &b| {
        let (ka, kb) = (key(&candidates[a]), key(&candidates[b]));
        ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.total_cmp(&kb.2))
    })
}
