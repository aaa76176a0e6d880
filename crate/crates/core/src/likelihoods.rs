//! Exponential-family likelihood heads in natural parameterization.
//!
//! Raw head outputs are laid out in blocks along the last axis:
//! Normal and LogNormal use two channel blocks `[η₁ | c]` of width `dim`,
//! Categorical uses one block of `I` logits per dimension, the remaining
//! families use a single block of width `dim`.

use rand::Rng;
use rand_distr::{Distribution, Normal as NormalDist, Poisson as PoissonDist};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::autodiff::{sigmoid, softplus, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Fixed Laplace scale used for dense vector modalities.
pub const DEFAULT_LAPLACE_SCALE: f64 = 0.75;

fn default_laplace_scale() -> f64 {
    DEFAULT_LAPLACE_SCALE
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Family {
    Normal,
    LogNormal,
    Poisson,
    Bernoulli,
    Categorical {
        classes: usize,
    },
    Laplace {
        #[serde(default = "default_laplace_scale")]
        scale: f64,
    },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Normal => "normal",
            Family::LogNormal => "lognormal",
            Family::Poisson => "poisson",
            Family::Bernoulli => "bernoulli",
            Family::Categorical { .. } => "categorical",
            Family::Laplace { .. } => "laplace",
        }
    }

    /// Parses a lowercase family name; categorical needs a class count.
    pub fn parse(name: &str, classes: Option<usize>) -> Result<Self> {
        let family = match name {
            "normal" => Family::Normal,
            "lognormal" => Family::LogNormal,
            "poisson" => Family::Poisson,
            "bernoulli" => Family::Bernoulli,
            "categorical" => Family::Categorical {
                classes: classes.ok_or_else(|| Error::Schema("categorical family needs `classes`".into()))?,
            },
            "laplace" => Family::Laplace {
                scale: DEFAULT_LAPLACE_SCALE,
            },
            other => return Err(Error::Schema(format!("unknown family `{other}`"))),
        };
        Ok(family)
    }

    /// Number of natural parameters per data dimension.
    pub fn param_count(&self) -> usize {
        match self {
            Family::Normal | Family::LogNormal => 2,
            Family::Poisson | Family::Bernoulli | Family::Laplace { .. } => 1,
            Family::Categorical { classes } => *classes,
        }
    }

    /// Discrete families whose reconstruction is scored by error rate.
    pub fn is_nominal(&self) -> bool {
        matches!(self, Family::Bernoulli | Family::Categorical { .. })
    }
}

/// Likelihood of one modality: family and data dimensionality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodSpec {
    #[serde(flatten)]
    pub family: Family,
    pub dim: usize,
}

impl LikelihoodSpec {
    pub fn new(family: Family, dim: usize) -> Result<Self> {
        let spec = Self { family, dim };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("likelihood dimension must be positive"));
        }
        match self.family {
            Family::Categorical { classes } if classes < 2 => {
                Err(Error::invalid(format!("categorical needs at least 2 classes, got {classes}")))
            }
            Family::Laplace { scale } if !(scale > 0.0 && scale.is_finite()) => {
                Err(Error::invalid(format!("laplace scale must be positive, got {scale}")))
            }
            _ => Ok(()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.family.param_count()
    }

    /// Width of the raw head output.
    pub fn raw_width(&self) -> usize {
        self.param_count() * self.dim
    }
}

#[derive(Clone, Copy, Debug)]
enum Channels {
    /// η₁ and c = −η₂ > 0 (on `ln x` for log-normal).
    Gaussian { eta1: Var, c: Var },
    /// log-rate.
    Rate { eta: Var },
    /// Bernoulli logit of class 1 (class 0 has logit 0).
    Logit { eta: Var },
    /// log-probabilities, `I` per dimension.
    LogProbs { logp: Var },
    Location { loc: Var },
}

/// Constrained head parameters living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct NaturalParams {
    spec: LikelihoodSpec,
    channels: Channels,
}

impl NaturalParams {
    pub fn spec(&self) -> &LikelihoodSpec {
        &self.spec
    }
}

/// Maps raw head outputs to valid natural parameters: softplus for the
/// positive Gaussian channel, per-dimension log-softmax for class logits,
/// identity otherwise.
pub fn constrain(spec: &LikelihoodSpec, tape: &mut Tape, raw: Var) -> Result<NaturalParams> {
    let width = tape.value(raw).last_dim();
    if tape.value(raw).rank() == 0 || width != spec.raw_width() {
        return Err(Error::invalid(format!(
            "{} head expects {} raw columns, got shape {:?}",
            spec.family.name(),
            spec.raw_width(),
            tape.shape(raw)
        )));
    }
    let dim = spec.dim;
    let channels = match spec.family {
        Family::Normal | Family::LogNormal => {
            let eta1 = tape.columns(raw, 0, dim)?;
            let c_raw = tape.columns(raw, dim, dim)?;
            let c = tape.softplus(c_raw);
            Channels::Gaussian { eta1, c }
        }
        Family::Poisson => Channels::Rate { eta: raw },
        Family::Bernoulli => Channels::Logit { eta: raw },
        Family::Laplace { .. } => Channels::Location { loc: raw },
        Family::Categorical { classes } => {
            let logp = if dim == 1 {
                tape.log_softmax(raw)
            } else {
                let mut parts = Vec::with_capacity(dim);
                for j in 0..dim {
                    let block = tape.columns(raw, j * classes, classes)?;
                    parts.push(tape.log_softmax(block));
                }
                let axis = tape.value(raw).rank() - 1;
                tape.concat(&parts, axis)?
            };
            Channels::LogProbs { logp }
        }
    };
    Ok(NaturalParams {
        spec: *spec,
        channels,
    })
}

fn support_error(family: &Family, dim: usize, detail: String) -> Error {
    Error::Support {
        family: family.name(),
        dim,
        detail,
    }
}

/// Checks observed entries of `x: (batch, dim)` against the family support.
pub fn check_support(spec: &LikelihoodSpec, x: &Tensor, mask: Option<&Tensor>) -> Result<()> {
    if x.last_dim() != spec.dim || x.rank() == 0 {
        return Err(Error::invalid(format!(
            "{} data needs {} columns, got shape {:?}",
            spec.family.name(),
            spec.dim,
            x.shape()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != x.shape() {
            return Err(Error::shape("mask", m.shape(), x.shape()));
        }
    }
    for (i, &v) in x.data().iter().enumerate() {
        if mask.is_some_and(|m| m.data()[i] == 0.0) {
            continue;
        }
        let dim = i % spec.dim;
        let bad = |why: &str| Err(support_error(&spec.family, dim, format!("value {v} {why}")));
        if !v.is_finite() {
            return bad("is not finite");
        }
        match spec.family {
            Family::LogNormal if v <= 0.0 => return bad("is not positive"),
            Family::Poisson if v < 0.0 || v.fract() != 0.0 => return bad("is not a non-negative integer"),
            Family::Bernoulli if v != 0.0 && v != 1.0 => return bad("is not 0 or 1"),
            Family::Categorical { classes } if v < 0.0 || v.fract() != 0.0 || v >= classes as f64 => {
                return bad(&format!("is not a class index below {classes}"))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Per-datum log density, summed over the modality's dimensions, with
/// unobserved entries contributing zero. `x` is `(batch, dim)`; the result
/// keeps any leading sample axis of the parameters: `(..., batch)`.
pub fn log_prob(tape: &mut Tape, params: &NaturalParams, x: &Tensor, mask: Option<&Tensor>) -> Result<Var> {
    let spec = params.spec;
    check_support(&spec, x, mask)?;
    // Unobserved entries may hold sentinels outside the support; neutralize them.
    let clean = |fill: f64| -> Tensor {
        match mask {
            None => x.clone(),
            Some(m) => Tensor::new(
                x.shape().to_vec(),
                x.data()
                    .iter()
                    .zip(m.data())
                    .map(|(&v, &o)| if o == 0.0 { fill } else { v })
                    .collect(),
            )
            .expect("same shape"),
        }
    };
    let elem = match params.channels {
        Channels::Gaussian { eta1, c } => {
            let lognormal = matches!(spec.family, Family::LogNormal);
            let xv = if lognormal { clean(1.0).map(f64::ln) } else { clean(0.0) };
            let xc = tape.constant(xv.clone());
            let two_c = tape.scale(c, 2.0);
            let mu = tape.div(eta1, two_c)?;
            let d = tape.sub(xc, mu)?;
            let d2 = tape.square(d);
            let quad = tape.mul(c, d2)?;
            let lc = tape.log(c);
            let half = tape.scale(lc, 0.5);
            let mut out = tape.sub(half, quad)?;
            out = tape.offset(out, -0.5 * std::f64::consts::PI.ln());
            if lognormal {
                let jac = tape.constant(xv);
                out = tape.sub(out, jac)?;
            }
            out
        }
        Channels::Rate { eta } => {
            let xv = clean(0.0);
            let lg = xv.map(|v| ln_gamma(v + 1.0));
            let xc = tape.constant(xv);
            let xe = tape.mul(xc, eta)?;
            let rate = tape.exp(eta);
            let out = tape.sub(xe, rate)?;
            let lgc = tape.constant(lg);
            tape.sub(out, lgc)?
        }
        Channels::Logit { eta } => {
            // log p = x·η − softplus(η): the two-class categorical with logits [0, η]
            let xc = tape.constant(clean(0.0));
            let xe = tape.mul(xc, eta)?;
            let sp = tape.softplus(eta);
            tape.sub(xe, sp)?
        }
        Channels::Location { loc } => {
            let Family::Laplace { scale } = spec.family else { unreachable!() };
            let xc = tape.constant(clean(0.0));
            let d = tape.sub(xc, loc)?;
            let a = tape.abs(d);
            let s = tape.scale(a, -1.0 / scale);
            tape.offset(s, -(2.0 * scale).ln())
        }
        Channels::LogProbs { logp } => {
            let Family::Categorical { classes } = spec.family else { unreachable!() };
            let xv = clean(0.0);
            let rows = xv.rows();
            let mut hot = vec![0.0; rows * spec.dim * classes];
            for r in 0..rows {
                for j in 0..spec.dim {
                    let observed = mask.is_none_or(|m| m.data()[r * spec.dim + j] != 0.0);
                    if observed {
                        let c = xv.data()[r * spec.dim + j] as usize;
                        hot[(r * spec.dim + j) * classes + c] = 1.0;
                    }
                }
            }
            let mut shape = xv.shape().to_vec();
            *shape.last_mut().expect("rank >= 1") = spec.dim * classes;
            let hot = tape.constant(Tensor::new(shape, hot)?);
            let picked = tape.mul(logp, hot)?;
            let axis = tape.value(picked).rank() - 1;
            return tape.sum_axis(picked, axis);
        }
    };
    let elem = match mask {
        Some(m) => {
            let mc = tape.constant(m.clone());
            tape.mul(elem, mc)?
        }
        None => elem,
    };
    let axis = tape.value(elem).rank() - 1;
    tape.sum_axis(elem, axis)
}

/// Standard parameters of every entry, read off the tape.
#[derive(Clone, Debug, PartialEq)]
pub enum EntryParams {
    /// mean and standard deviation (in log space for log-normal)
    Gaussian { mu: f64, sigma: f64 },
    Poisson { lambda: f64 },
    Bernoulli { p: f64 },
    Categorical { probs: Vec<f64> },
    Laplace { loc: f64, scale: f64 },
}

/// Standard parameters for every (row, dimension) entry, row-major.
pub fn entry_params(tape: &Tape, params: &NaturalParams) -> Vec<EntryParams> {
    let spec = params.spec;
    match params.channels {
        Channels::Gaussian { eta1, c } => tape
            .value(eta1)
            .data()
            .iter()
            .zip(tape.value(c).data())
            .map(|(&e, &c)| EntryParams::Gaussian {
                mu: e / (2.0 * c),
                sigma: (1.0 / (2.0 * c)).sqrt(),
            })
            .collect(),
        Channels::Rate { eta } => tape
            .value(eta)
            .data()
            .iter()
            .map(|e| EntryParams::Poisson { lambda: e.exp() })
            .collect(),
        Channels::Logit { eta } => tape
            .value(eta)
            .data()
            .iter()
            .map(|&e| EntryParams::Bernoulli { p: sigmoid(e) })
            .collect(),
        Channels::Location { loc } => {
            let Family::Laplace { scale } = spec.family else { unreachable!() };
            tape.value(loc)
                .data()
                .iter()
                .map(|&l| EntryParams::Laplace { loc: l, scale })
                .collect()
        }
        Channels::LogProbs { logp } => {
            let Family::Categorical { classes } = spec.family else { unreachable!() };
            tape.value(logp)
                .data()
                .chunks(classes)
                .map(|c| EntryParams::Categorical {
                    probs: c.iter().map(|v| v.exp()).collect(),
                })
                .collect()
        }
    }
}

fn output_shape(tape: &Tape, params: &NaturalParams) -> Vec<usize> {
    let raw = match params.channels {
        Channels::Gaussian { eta1, .. } => eta1,
        Channels::Rate { eta } | Channels::Logit { eta } => eta,
        Channels::Location { loc } => loc,
        Channels::LogProbs { logp } => logp,
    };
    let mut shape = tape.shape(raw).to_vec();
    *shape.last_mut().expect("rank >= 1") = params.spec.dim;
    shape
}

/// Mode of a single entry (class index for nominal families).
pub fn entry_mode(family: &Family, p: &EntryParams) -> f64 {
    match p {
        EntryParams::Gaussian { mu, sigma } => match family {
            Family::LogNormal => (mu - sigma * sigma).exp(),
            _ => *mu,
        },
        EntryParams::Poisson { lambda } => lambda.floor(),
        EntryParams::Bernoulli { p } => {
            if *p > 0.5 {
                1.0
            } else {
                0.0
            }
        }
        EntryParams::Categorical { probs } => argmax(probs) as f64,
        EntryParams::Laplace { loc, .. } => *loc,
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Distribution modes, shaped like the data.
pub fn impute(tape: &Tape, params: &NaturalParams) -> Tensor {
    let family = params.spec.family;
    let data = entry_params(tape, params).iter().map(|p| entry_mode(&family, p)).collect();
    Tensor::new(output_shape(tape, params), data).expect("consistent shape")
}

/// One draw per entry, shaped like the data.
pub fn sample<R: Rng>(tape: &Tape, params: &NaturalParams, rng: &mut R) -> Tensor {
    let data = entry_params(tape, params)
        .iter()
        .map(|p| sample_entry(&params.spec.family, p, rng))
        .collect();
    Tensor::new(output_shape(tape, params), data).expect("consistent shape")
}

pub fn sample_entry<R: Rng>(family: &Family, p: &EntryParams, rng: &mut R) -> f64 {
    match p {
        EntryParams::Gaussian { mu, sigma } => {
            let z = NormalDist::new(*mu, *sigma).map(|d| d.sample(rng)).unwrap_or(*mu);
            if matches!(family, Family::LogNormal) {
                z.exp()
            } else {
                z
            }
        }
        EntryParams::Poisson { lambda } => PoissonDist::new(*lambda).map(|d| d.sample(rng)).unwrap_or(0.0),
        EntryParams::Bernoulli { p } => {
            if rng.random::<f64>() < *p {
                1.0
            } else {
                0.0
            }
        }
        EntryParams::Categorical { probs } => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, q) in probs.iter().enumerate() {
                acc += q;
                if u < acc {
                    return i as f64;
                }
            }
            (probs.len() - 1) as f64
        }
        EntryParams::Laplace { loc, scale } => {
            let u: f64 = rng.random::<f64>() - 0.5;
            loc - scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
        }
    }
}

/// Distribution parameters for the expected-gradient-norm oracle.
#[derive(Clone, Debug, PartialEq)]
pub enum Moments {
    Normal { mu: f64, sigma: f64 },
    /// parameters of `ln x`
    LogNormal { mu: f64, sigma: f64 },
    Poisson { lambda: f64 },
    Bernoulli { p: f64 },
    Categorical { probs: Vec<f64> },
    Laplace { loc: f64, scale: f64 },
}

/// Expected squared norm of the natural-parameter score `E‖∇_η log p(x; η)‖²`
/// for `x ~ p`, using the per-family table: Normal and LogNormal
/// `σ² + 4μ²σ²`, Poisson `λ`, Categorical `Σᵢ πᵢ(1 − πᵢ)`. Bernoulli is
/// reduced to the two-class categorical. Laplace with a fixed scale is not an
/// exponential family in its location and is rejected.
pub fn expected_sq_grad_norm(m: &Moments) -> Result<f64> {
    let check = |ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid {what}")))
        }
    };
    match m {
        Moments::Normal { mu, sigma } | Moments::LogNormal { mu, sigma } => {
            check(*sigma > 0.0 && mu.is_finite(), "gaussian parameters")?;
            let s2 = sigma * sigma;
            Ok(s2 + 4.0 * mu * mu * s2)
        }
        Moments::Poisson { lambda } => {
            check(*lambda > 0.0, "poisson rate")?;
            Ok(*lambda)
        }
        Moments::Bernoulli { p } => expected_sq_grad_norm(&Moments::Categorical {
            probs: vec![1.0 - p, *p],
        }),
        Moments::Categorical { probs } => {
            check(
                probs.len() >= 2 && probs.iter().all(|p| (0.0..=1.0).contains(p)),
                "class probabilities",
            )?;
            Ok(probs.iter().map(|p| p * (1.0 - p)).sum())
        }
        Moments::Laplace { .. } => Err(Error::Unsupported(
            "expected gradient norm is defined for exponential-family heads only (not laplace)".into(),
        )),
    }
}

/// `softplus` exposed for callers building raw parameters by hand.
pub fn softplus_value(x: f64) -> f64 {
    softplus(x)
}

/// Inverse of softplus, for initializing a raw channel to a target value.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Raw Gaussian head row `[η₁ | c_raw]` encoding mean `mu` and std `sigma`.
pub fn gaussian_raw(mu: f64, sigma: f64) -> (f64, f64) {
    let c = 1.0 / (2.0 * sigma * sigma);
    (2.0 * c * mu, inverse_softplus(c))
}
