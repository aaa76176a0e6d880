use rand::seq::SliceRandom;
use rand::Rng;

use super::linalg::solve;
use super::{dot, GradientStack};
use crate::error::{Error, Result};

pub const MGDA_MAX_ITERS: usize = 100;
pub const MGDA_TOLERANCE: f64 = 1e-8;
pub const CAGRAD_STEPS: usize = 200;
pub const CAGRAD_STEP_SIZE: f64 = 0.05;
pub const GRADNORM_STEP: f64 = 1e-3;

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn scaled_rows(stack: &GradientStack, weights: &[f64]) -> Vec<Vec<f64>> {
    stack
        .rows()
        .iter()
        .zip(weights)
        .map(|(r, w)| r.iter().map(|v| v * w).collect())
        .collect()
}

/// Min-norm point of the convex hull of the rows. Returns rows `D·γ_d·g_d`
/// (so their mean is the min-norm point) and the convex weights `γ`.
///
/// Away-step Frank-Wolfe with exact line search on the Gram matrix, followed
/// by an exact solve on the active face when that face is non-degenerate.
pub fn mgda_ub(stack: &GradientStack) -> (GradientStack, Vec<f64>) {
    let d = stack.heads();
    let m = stack.gram();
    let gamma = min_norm_weights(&m);
    let weights: Vec<f64> = gamma.iter().map(|g| g * d as f64).collect();
    (stack.with_rows(scaled_rows(stack, &weights)), gamma)
}

fn quad(m: &[Vec<f64>], v: &[f64]) -> f64 {
    dot(v, &mat_vec(m, v))
}

pub(crate) fn min_norm_weights(m: &[Vec<f64>]) -> Vec<f64> {
    let d = m.len();
    let mut gamma = vec![1.0 / d as f64; d];
    if d == 1 {
        return vec![1.0];
    }
    for _ in 0..MGDA_MAX_ITERS {
        let grad = mat_vec(m, &gamma);
        let cur = dot(&gamma, &grad);
        let s = (0..d).min_by(|&i, &j| grad[i].total_cmp(&grad[j])).expect("d >= 1");
        let gap = cur - grad[s];
        if gap < MGDA_TOLERANCE {
            break;
        }
        let v = (0..d)
            .filter(|&i| gamma[i] > 0.0)
            .max_by(|&i, &j| grad[i].total_cmp(&grad[j]))
            .expect("non-empty support");
        let away_gap = grad[v] - cur;
        let (dir, t_max) = if gap >= away_gap || gamma[v] >= 1.0 {
            let mut dir: Vec<f64> = gamma.iter().map(|g| -g).collect();
            dir[s] += 1.0;
            (dir, 1.0)
        } else {
            let mut dir = gamma.clone();
            dir[v] -= 1.0;
            (dir, gamma[v] / (1.0 - gamma[v]))
        };
        let md = mat_vec(m, &dir);
        let curv = dot(&dir, &md);
        let slope = dot(&dir, &grad);
        let t = if curv > 0.0 { (-slope / curv).clamp(0.0, t_max) } else { t_max };
        for (g, dv) in gamma.iter_mut().zip(&dir) {
            *g = (*g + t * dv).max(0.0);
        }
        let total: f64 = gamma.iter().sum();
        gamma.iter_mut().for_each(|g| *g /= total);
    }
    let gamma = polish_on_face(m, gamma);
    if d <= EXACT_FACE_LIMIT {
        if let Some(exact) = best_face(m) {
            if quad(m, &exact) <= quad(m, &gamma) {
                return exact;
            }
        }
    }
    gamma
}

/// Up to this many heads every face of the simplex is checked exactly.
const EXACT_FACE_LIMIT: usize = 10;

/// Solves the KKT system on the face spanned by `support`; `None` when the
/// face is affinely degenerate or its stationary point leaves the simplex.
fn face_minimizer(m: &[Vec<f64>], support: &[usize]) -> Option<Vec<f64>> {
    let k = support.len();
    let mut a = vec![vec![0.0; k + 1]; k + 1];
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            a[r][c] = m[i][j];
        }
        a[r][k] = 1.0;
        a[k][r] = 1.0;
    }
    let mut b = vec![0.0; k + 1];
    b[k] = 1.0;
    let x = solve(a, b).ok()?;
    if x[..k].iter().any(|v| *v < -1e-12 || !v.is_finite()) {
        return None;
    }
    let mut cand = vec![0.0; m.len()];
    for (r, &i) in support.iter().enumerate() {
        cand[i] = x[r].max(0.0);
    }
    let total: f64 = cand.iter().sum();
    cand.iter_mut().for_each(|g| *g /= total);
    Some(cand)
}

/// Exhaustive search over faces. The hull is the union of the hulls of its
/// affinely independent subsets, so skipping degenerate faces loses nothing.
fn best_face(m: &[Vec<f64>]) -> Option<Vec<f64>> {
    let d = m.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1usize..(1 << d) {
        let support: Vec<usize> = (0..d).filter(|i| mask >> i & 1 == 1).collect();
        if let Some(cand) = face_minimizer(m, &support) {
            let v = quad(m, &cand);
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, cand));
            }
        }
    }
    best.map(|(_, g)| g)
}

/// Solves the equality-constrained problem on the support of `gamma` and
/// keeps the answer if it is feasible and no worse.
fn polish_on_face(m: &[Vec<f64>], gamma: Vec<f64>) -> Vec<f64> {
    let support: Vec<usize> = (0..gamma.len()).filter(|&i| gamma[i] > 1e-12).collect();
    if support.len() < 2 {
        return gamma;
    }
    match face_minimizer(m, &support) {
        Some(cand) if quad(m, &cand) <= quad(m, &gamma) => cand,
        _ => gamma,
    }
}

/// Weights `α` making the aggregate `Σ α_d g_d` project equally onto every
/// unit row direction, scaled so that `Σ α_d = D`. Zero rows get weight 0.
pub fn imtl_g(stack: &GradientStack) -> Result<(GradientStack, Vec<f64>)> {
    let d = stack.heads();
    let norms = stack.norms();
    let active: Vec<usize> = (0..d).filter(|&i| norms[i] > 0.0).collect();
    let mut alpha = vec![0.0; d];
    match active.len() {
        0 => return Ok((stack.with_rows(vec![vec![0.0; stack.width()]; d]), alpha)),
        1 => alpha[active[0]] = 1.0,
        t => {
            let unit = |i: usize| -> Vec<f64> { stack.row(i).iter().map(|v| v / norms[i]).collect() };
            let g1 = stack.row(active[0]);
            let u1 = unit(active[0]);
            let diffs: Vec<Vec<f64>> = active[1..]
                .iter()
                .map(|&i| g1.iter().zip(stack.row(i)).map(|(a, b)| a - b).collect())
                .collect();
            let udiffs: Vec<Vec<f64>> = active[1..]
                .iter()
                .map(|&i| u1.iter().zip(unit(i)).map(|(a, b)| a - b).collect())
                .collect();
            // α_{2:T} (D Uᵀ) = g₁ Uᵀ  ⇔  (D Uᵀ)ᵀ α_{2:T}ᵀ = (g₁ Uᵀ)ᵀ
            let n = t - 1;
            let mut lhs = vec![vec![0.0; n]; n];
            for (r, row) in lhs.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    // transpose of (D Uᵀ)[c][r]
                    *v = dot(&diffs[c], &udiffs[r]);
                }
            }
            let rhs: Vec<f64> = udiffs.iter().map(|u| dot(g1, u)).collect();
            let tail = solve(lhs, rhs).map_err(|e| {
                Error::Singular(format!(
                    "{e}; equal-projection weights are undefined for these gradients, consider mgda_ub or cagrad"
                ))
            })?;
            alpha[active[0]] = 1.0 - tail.iter().sum::<f64>();
            for (k, &i) in active[1..].iter().enumerate() {
                alpha[i] = tail[k];
            }
        }
    }
    let total: f64 = alpha.iter().sum();
    if total.abs() < 1e-300 || !total.is_finite() {
        return Err(Error::Singular(
            "equal-projection weights sum to zero, consider mgda_ub or cagrad".into(),
        ));
    }
    alpha.iter_mut().for_each(|a| *a *= d as f64 / total);
    Ok((stack.with_rows(scaled_rows(stack, &alpha)), alpha))
}

/// PCGrad with explicit visiting orders: `orders[i]` lists the rows that row
/// `i` is projected against, in order.
pub fn pcgrad_with_orders(stack: &GradientStack, orders: &[Vec<usize>]) -> GradientStack {
    let rows = stack.rows();
    let sq: Vec<f64> = rows.iter().map(|r| dot(r, r)).collect();
    let out = rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut g = row.clone();
            for &j in &orders[i] {
                if j == i || sq[j] == 0.0 {
                    continue;
                }
                let d = dot(&g, &rows[j]);
                if d < 0.0 {
                    let f = d / sq[j];
                    for (gk, hk) in g.iter_mut().zip(&rows[j]) {
                        *gk -= f * hk;
                    }
                }
            }
            g
        })
        .collect();
    stack.with_rows(out)
}

/// PCGrad: every row is projected off each conflicting row, visiting the
/// others in a random order.
pub fn pcgrad<R: Rng>(stack: &GradientStack, rng: &mut R) -> GradientStack {
    let d = stack.heads();
    let orders: Vec<Vec<usize>> = (0..d)
        .map(|i| {
            let mut o: Vec<usize> = (0..d).filter(|&j| j != i).collect();
            o.shuffle(rng);
            o
        })
        .collect();
    pcgrad_with_orders(stack, &orders)
}

/// GradDrop with one supplied uniform per coordinate.
pub fn graddrop_with_uniforms(stack: &GradientStack, uniforms: &[f64]) -> GradientStack {
    let width = stack.width();
    assert_eq!(uniforms.len(), width, "one uniform per coordinate");
    let mut out = stack.rows().to_vec();
    for k in 0..width {
        let (s, a) = stack
            .rows()
            .iter()
            .fold((0.0, 0.0), |(s, a), r| (s + r[k], a + r[k].abs()));
        let p = if a == 0.0 { 0.5 } else { 0.5 * (1.0 + s / a) };
        let keep_positive = uniforms[k] < p;
        for row in out.iter_mut() {
            let v = row[k];
            if (v > 0.0 && !keep_positive) || (v < 0.0 && keep_positive) {
                row[k] = 0.0;
            }
        }
    }
    stack.with_rows(out)
}

/// GradDrop: per coordinate keep one sign, chosen with probability given by
/// the sign purity of the column.
pub fn graddrop<R: Rng>(stack: &GradientStack, rng: &mut R) -> GradientStack {
    let u: Vec<f64> = (0..stack.width()).map(|_| rng.random::<f64>()).collect();
    graddrop_with_uniforms(stack, &u)
}

/// Persistent GradNorm memory: initial norms and current weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradNormState {
    pub initial: Option<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// GradNorm driven by gradient magnitudes instead of task losses.
///
/// The training-rate proxy is `r_d = (n_d/n_d⁰) / mean(n/n⁰)`; targets are
/// `mean(w·n)·r_d^α`; each weight moves one signed step towards its target,
/// then weights are renormalized to sum to `D`.
pub fn gradnorm(state: &mut GradNormState, alpha: f64, stack: &GradientStack) -> GradientStack {
    let d = stack.heads();
    let norms = stack.norms();
    let reset = state.initial.as_ref().is_none_or(|i| i.len() != d);
    if reset {
        state.initial = Some(norms.clone());
        state.weights = vec![1.0; d];
    }
    let initial = state.initial.as_ref().expect("initialized");
    let ratios: Vec<f64> = norms
        .iter()
        .zip(initial)
        .map(|(n, n0)| if *n0 > 0.0 { n / n0 } else { 1.0 })
        .collect();
    let mean_ratio = ratios.iter().sum::<f64>() / d as f64;
    let weighted: Vec<f64> = state.weights.iter().zip(&norms).map(|(w, n)| w * n).collect();
    let mean_weighted = weighted.iter().sum::<f64>() / d as f64;
    for i in 0..d {
        let r = if mean_ratio > 0.0 { ratios[i] / mean_ratio } else { 1.0 };
        let target = mean_weighted * r.powf(alpha);
        let diff = weighted[i] - target;
        if diff.abs() > 1e-12 * target.abs().max(1e-300) {
            state.weights[i] -= GRADNORM_STEP * diff.signum();
        }
        state.weights[i] = state.weights[i].max(1e-6);
    }
    let total: f64 = state.weights.iter().sum();
    state.weights.iter_mut().for_each(|w| *w *= d as f64 / total);
    stack.with_rows(scaled_rows(stack, &state.weights))
}

pub(crate) fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// CAGrad with radius `c`. Solves `min_w g_w·g₀ + √φ‖g_w‖` over the simplex by
/// projected gradient descent on the scale-normalized Gram matrix, and returns
/// `D` equal rows `d/D` with `d = g₀ + (√φ/‖g_w‖)·g_w`.
pub fn cagrad(stack: &GradientStack, c: f64) -> GradientStack {
    let dh = stack.heads();
    let df = dh as f64;
    let g0 = stack.mean();
    let g0_norm = dot(&g0, &g0).sqrt();
    let equal_rows = |dvec: &[f64]| stack.with_rows(vec![dvec.iter().map(|v| v / df).collect(); dh]);
    let mut m = stack.gram();
    let scale = (0..dh).map(|i| m[i][i]).sum::<f64>() / df;
    if scale == 0.0 || g0_norm == 0.0 {
        return equal_rows(&g0);
    }
    m.iter_mut().flat_map(|r| r.iter_mut()).for_each(|v| *v /= scale);
    let uniform = vec![1.0 / df; dh];
    let b = mat_vec(&m, &uniform);
    let sqrt_phi = c * dot(&uniform, &b).max(0.0).sqrt();
    let mut w = uniform.clone();
    for _ in 0..CAGRAD_STEPS {
        let mw = mat_vec(&m, &w);
        let gw = dot(&w, &mw).max(0.0).sqrt();
        let grad: Vec<f64> = (0..dh)
            .map(|i| b[i] + if gw > 0.0 { sqrt_phi * mw[i] / gw } else { 0.0 })
            .collect();
        let step: Vec<f64> = w.iter().zip(&grad).map(|(wi, gi)| wi - CAGRAD_STEP_SIZE * gi).collect();
        w = project_simplex(&step);
    }
    let mut gw = vec![0.0; stack.width()];
    for (row, wi) in stack.rows().iter().zip(&w) {
        for (g, v) in gw.iter_mut().zip(row) {
            *g += wi * v;
        }
    }
    let gw_norm = dot(&gw, &gw).sqrt();
    if gw_norm == 0.0 {
        return equal_rows(&g0);
    }
    let coef = c * g0_norm / gw_norm;
    let d: Vec<f64> = g0.iter().zip(&gw).map(|(a, b)| a + coef * b).collect();
    equal_rows(&d)
}
