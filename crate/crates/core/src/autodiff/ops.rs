use rand::Rng;
use rand_distr::StandardNormal;

use super::kernels::{self, axis_split, broadcast};
use super::tape::{Binary, Op, Tape, Unary, Var};
use super::tensor::{Tensor, MAX_RANK};
use crate::error::{Error, Result};

impl Tape {
    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let av = self.value(a);
        let bv = self.value(b);
        let bc = broadcast(name, av.shape(), bv.shape())?;
        let (x, y) = (av.data(), bv.data());
        let n: usize = bc.out.iter().product();
        let (na, nb) = (x.len(), y.len());
        let f = |p: f64, q: f64| match kind {
            Binary::Add => p + q,
            Binary::Sub => p - q,
            Binary::Mul => p * q,
            Binary::Div => p / q,
        };
        let data = if na == nb {
            x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()
        } else {
            (0..n).map(|i| f(x[i % na], y[i % nb])).collect()
        };
        let value = Tensor::from_parts(bc.out, data);
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                lhs: a.0,
                rhs: b.0,
            },
        ))
    }

    /// Elementwise sum; the smaller operand repeats over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// `x · w` for `x: (..., n)` and `w: (n, m)`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.rank() != 2 || xv.rank() == 0 || xv.last_dim() != wv.shape()[0] {
            return Err(Error::shape("matmul", xv.shape(), wv.shape()));
        }
        let (k, m) = (wv.shape()[0], wv.shape()[1]);
        let rows = xv.len() / k.max(1);
        let mut out = vec![0.0; rows * m];
        kernels::gemm(rows, k, m, xv.data(), wv.data(), &mut out, false);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = m;
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(x.0, w.0)))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add(h, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x.0, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `x + c` for a constant scalar.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::Offset(x.0))
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => f64::tanh,
            Unary::Relu => |v| v.max(0.0),
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Softplus => kernels::softplus,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Square => |v| v * v,
            Unary::Sqrt => f64::sqrt,
            Unary::Abs => f64::abs,
        };
        let value = self.value(x).map(f);
        self.push(value, Op::Unary(x.0, kind))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    /// Natural log; non-positive inputs yield non-finite values.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(value, Op::Softmax(x.0))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let lse = kernels::log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(value, Op::LogSoftmax(x.0))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(
            value,
            Op::Concat {
                parents: parts.iter().map(|v| v.0).collect(),
                axis,
            },
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) of axis {axis} is outside {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_split(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&xv.data()[from..from + len * inner]);
        }
        let mut out = shape.to_vec();
        out[axis] = len;
        let value = Tensor::from_parts(out, data);
        Ok(self.push(
            value,
            Op::Slice {
                parent: x.0,
                axis,
                start,
            },
        ))
    }

    /// Slice of the last axis.
    pub fn columns(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let axis = self.value(x).rank().saturating_sub(1);
        self.slice(x, axis, start, len)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x.0)))
    }

    /// Repeats `x` `k` times along a new leading axis.
    pub fn expand(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() + 1 > MAX_RANK || k == 0 {
            return Err(Error::invalid(format!("cannot expand {:?} by {k}", xv.shape())));
        }
        let mut shape = vec![k];
        shape.extend_from_slice(xv.shape());
        let mut data = Vec::with_capacity(k * xv.len());
        for _ in 0..k {
            data.extend_from_slice(xv.data());
        }
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::Expand(x.0)))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::invalid(format!("axis {axis} out of range for {:?}", xv.shape())));
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let d = xv.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += d[(o * len + j) * inner + i];
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SumAxis(x.0, axis)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.value(x).shape().get(axis).copied().unwrap_or(1).max(1) as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Overflow-safe log-sum-exp over one axis, which is removed.
    pub fn log_sum_exp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::invalid(format!("axis {axis} out of range for {:?}", xv.shape())));
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let d = xv.data();
        let mut data = Vec::with_capacity(outer * inner);
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = d[(o * len + j) * inner + i];
                }
                data.push(kernels::log_sum_exp(&buf));
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Tensor::from_parts(shape, data), Op::LogSumExp(x.0, axis)))
    }

    /// Multiplies by a constant tensor of the same shape (gradient is masked too).
    pub fn mask(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != mask.shape() {
            return Err(Error::shape("mask", xv.shape(), mask.shape()));
        }
        let data = xv.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(value, Op::Mask(x.0, mask.data().to_vec())))
    }

    /// Inverted dropout with drop probability `p`; identity outside training.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !self.is_training() || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng().random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.mask(x, &Tensor::from_parts(shape, mask))
    }

    /// Normalizes each column by its batch mean and biased variance. Returns
    /// the normalized node with the batch statistics used.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(Error::invalid("batch norm of a scalar"));
        }
        let c = xv.last_dim();
        let rows = xv.rows();
        if rows == 0 {
            return Err(Error::invalid("batch norm of an empty batch"));
        }
        let d = xv.data();
        let mut mean = vec![0.0; c];
        for r in 0..rows {
            for j in 0..c {
                mean[j] += d[r * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for j in 0..c {
                let e = d[r * c + j] - mean[j];
                var[j] += e * e;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = d.to_vec();
        for r in 0..rows {
            for j in 0..c {
                let i = r * c + j;
                data[i] = (data[i] - mean[j]) * inv_std[j];
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let v = self.push(value, Op::BatchNorm { parent: x.0, inv_std });
        Ok((v, mean, var))
    }

    /// Draws a constant tensor of standard normal noise from the tape rng.
    pub fn standard_normal(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng().sample(StandardNormal)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// `k` reparameterized samples `mu + sigma·ε`, shape `(k, ...mu.shape)`.
    pub fn reparam_normal(&mut self, mu: Var, sigma: Var, k: usize) -> Result<Var> {
        if let Some(s) = self.value(sigma).data().iter().find(|s| !(**s > 0.0)) {
            return Err(Error::invalid(format!("reparameterization needs sigma > 0, got {s}")));
        }
        self.reparam_normal_unchecked(mu, sigma, k)
    }

    /// As [`Tape::reparam_normal`] but accepts `sigma = 0` (deterministic samples).
    pub fn reparam_normal_degenerate(&mut self, mu: Var, sigma: Var, k: usize) -> Result<Var> {
        if let Some(s) = self.value(sigma).data().iter().find(|s| !(**s >= 0.0)) {
            return Err(Error::invalid(format!("sigma must be non-negative, got {s}")));
        }
        self.reparam_normal_unchecked(mu, sigma, k)
    }

    fn reparam_normal_unchecked(&mut self, mu: Var, sigma: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let ms = self.value(mu).shape().to_vec();
        if ms != self.value(sigma).shape() {
            return Err(Error::shape("reparam_normal", &ms, self.value(sigma).shape()));
        }
        if ms.len() + 1 > MAX_RANK {
            return Err(Error::invalid(format!("cannot draw samples of {ms:?} along a new axis")));
        }
        let mut shape = vec![k];
        shape.extend_from_slice(&ms);
        let eps = self.standard_normal(&shape);
        let eps = self.constant(eps);
        let noise = self.mul(eps, sigma)?;
        self.add(noise, mu)
    }

    /// Relaxed one-hot samples `softmax((logits + G) / tau)` with Gumbel noise
    /// `G`, shape `(k, ...logits.shape)`.
    pub fn gumbel_softmax(&mut self, logits: Var, tau: f64, k: usize) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
        }
        let ls = self.value(logits).shape().to_vec();
        if ls.len() + 1 > MAX_RANK || k == 0 {
            return Err(Error::invalid(format!("cannot draw {k} relaxed samples of {ls:?}")));
        }
        let mut shape = vec![k];
        shape.extend_from_slice(&ls);
        let n: usize = shape.iter().product();
        let g: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = self.rng().random::<f64>().max(f64::MIN_POSITIVE);
                -(-u.ln()).ln()
            })
            .collect();
        let g = self.constant(Tensor::from_parts(shape, g));
        let pert = self.add(g, logits)?;
        let scaled = self.scale(pert, 1.0 / tau);
        Ok(self.softmax(scaled))
    }
}
