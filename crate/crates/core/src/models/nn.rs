use rand::Rng;

use crate::autodiff::{ParamGroup, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }
}

/// Stack of linear layers whose parameters live in a [`ParamStore`]. Forward
/// passes take the bound parameter nodes explicitly so callers can substitute
/// detached or head-private copies.
#[derive(Clone, Debug)]
pub struct Mlp {
    prefix: String,
    sizes: Vec<usize>,
    activation: Activation,
    activate_last: bool,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        sizes: &[usize],
        activation: Activation,
        activate_last: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("mlp `{prefix}` needs at least two positive sizes, got {sizes:?}")));
        }
        for (i, w) in sizes.windows(2).enumerate() {
            store.insert_linear(&format!("{prefix}.{i}"), w[0], w[1], group, rng)?;
        }
        Ok(Self {
            prefix: prefix.to_string(),
            sizes: sizes.to_vec(),
            activation,
            activate_last,
        })
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    /// Parameter names in `[w0, b0, w1, b1, ...]` order.
    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers())
            .flat_map(|i| [format!("{}.{i}.weight", self.prefix), format!("{}.{i}.bias", self.prefix)])
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<Vec<Var>> {
        self.param_names().iter().map(|n| tape.param(store, n)).collect()
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        if params.len() != 2 * self.layers() {
            return Err(Error::invalid(format!(
                "mlp `{}` takes {} parameter nodes, got {}",
                self.prefix,
                2 * self.layers(),
                params.len()
            )));
        }
        let mut h = x;
        for i in 0..self.layers() {
            h = tape.linear(h, params[2 * i], params[2 * i + 1])?;
            if i + 1 < self.layers() || self.activate_last {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }
}

/// Batch normalization without affine parameters. Running statistics are
/// kept as non-trainable entries of the store and used in evaluation mode.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    mean: String,
    var: String,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, group: ParamGroup) -> Result<Self> {
        let mean = format!("{prefix}.running_mean");
        let var = format!("{prefix}.running_var");
        store.insert(&mean, Tensor::zeros(&[width]), group)?;
        store.insert(&var, Tensor::full(&[width], 1.0), group)?;
        for n in [&mean, &var] {
            store.get_mut(n).expect("just inserted").requires_grad = false;
        }
        Ok(Self {
            mean,
            var,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Batch statistics while training, running statistics otherwise. The
    /// batch statistics are returned for [`BatchNorm::update`].
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Option<BnStats>)> {
        if tape.is_training() && tape.value(x).rows() > 1 {
            let rows = tape.value(x).rows();
            let (y, mean, var) = tape.batch_norm(x, self.eps)?;
            Ok((y, Some(BnStats { mean, var, rows })))
        } else {
            let mean = store.get(&self.mean).expect("registered").value.clone();
            let inv: Vec<f64> = store
                .get(&self.var)
                .expect("registered")
                .value
                .data()
                .iter()
                .map(|v| 1.0 / (v + self.eps).sqrt())
                .collect();
            let mc = tape.constant(mean);
            let centered = tape.sub(x, mc)?;
            let ic = tape.constant(Tensor::vector(inv));
            Ok((tape.mul(centered, ic)?, None))
        }
    }

    /// Folds batch statistics into the running ones.
    pub fn update(&self, store: &mut ParamStore, stats: &BnStats) {
        let m = self.momentum;
        let n = stats.rows as f64;
        let rm = store.get_mut(&self.mean).expect("registered");
        for (r, b) in rm.value.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        let rv = store.get_mut(&self.var).expect("registered");
        for (r, b) in rv.value.data_mut().iter_mut().zip(&stats.var) {
            // unbiased estimate for the running variance
            *r = (1.0 - m) * *r + m * b * n / (n - 1.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub rows: usize,
}

/// Splits `(..., 2ℓ)` into a mean and a positive scale `softplus(raw) + floor`.
pub fn gaussian_head(tape: &mut Tape, out: Var, latent: usize, floor: f64) -> Result<(Var, Var)> {
    let mu = tape.columns(out, 0, latent)?;
    let raw = tape.columns(out, latent, latent)?;
    let sp = tape.softplus(raw);
    Ok((mu, tape.offset(sp, floor)))
}
