//! Exact robust upper bound for L1-bounded perturbations.
//!
//! For a class `k` with `c_k = e_k - e_y`, the worst-case margin
//! `sup_{‖δ‖_1 ≤ ρ} c_k^T z^L(x + δ)` is bounded above by the maximum over
//! `2M` branch networks `g^L_{k,m}(x, t, a)`, one per input coordinate `m`
//! and sign `a ∈ {+ρ, -ρ}`. Each branch evaluates the network at the L1-ball
//! vertex `x + a e_m` with every layer split into its positive and negative
//! weight paths:
//!
//! ```text
//! g^1(a, r)   = r (a W^1_m + W^1 x + b^1)
//! g^l(a, r)   = [r W^l]^+ [g^{l-1}(a, 1)]^+ + [-r W^l]^+ (g^{l-1}(a, -1) ⊙ t_l) + r b^l
//! g^L_{k,m}(a) = [c_k^T W^L]^+ [g^{L-1}(a, 1)]^+ + [-c_k^T W^L]^+ (g^{L-1}(a, -1) ⊙ t_L) + c_k^T b^L
//! ```
//!
//! The bound holds for every `t` with entries in `[0, 1]`. We use
//! `t_l = [sign(z^{l-1}(x))]^+`, recomputed from the current parameters, which
//! makes the bound exact at `ρ = 0`.
//!
//! Branch columns are laid out as `2m` for `a = +ρ` and `2m + 1` for
//! `a = -ρ`; maxima take the first column on ties.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{dual_maximizer, project_lp_ball, sample_lp_ball};
use crate::error::{Error, Result};
use crate::network::{Example, NetworkParams, ParamNodes};
use crate::objectives::{margin_matrix, objective_on_tape, ObjectiveKind, RobustConfig};
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::tape::{NodeId, Tape};
use crate::tensor::{argmax, dot, Norm, Tensor};

/// Relaxation weights `t_2 .. t_L`; `t_l` has one entry per unit of layer `l - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedT<T> {
    layers: Vec<Vec<T>>,
}

impl<T: Real> FixedT<T> {
    pub fn new(params: &NetworkParams<T>, layers: Vec<Vec<T>>) -> Result<Self> {
        let widths = params.widths();
        if layers.len() + 1 != params.depth() {
            return Err(Error::DimensionMismatch {
                expected: params.depth() - 1,
                got: layers.len(),
            });
        }
        for (l, t) in layers.iter().enumerate() {
            if t.len() != widths[l + 1] {
                return Err(Error::DimensionMismatch {
                    expected: widths[l + 1],
                    got: t.len(),
                });
            }
            if t.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
                return Err(Error::InvalidConfig("t entries must lie in [0, 1]".into()));
            }
        }
        Ok(Self { layers })
    }

    /// Uniform random `t` in `[0, 1]`.
    pub fn random(params: &NetworkParams<T>, rng: &mut SeededRng) -> Self {
        let widths = params.widths();
        Self {
            layers: widths[1..params.depth()]
                .iter()
                .map(|&r| (0..r).map(|_| T::lit(rng.uniform(0.0, 1.0))).collect())
                .collect(),
        }
    }

    /// `t_l` for `l` in `2 ..= L`.
    pub fn layer(&self, l: usize) -> &[T] {
        &self.layers[l - 2]
    }

    pub fn layers(&self) -> &[Vec<T>] {
        &self.layers
    }
}

/// `t_l = [sign(z^{l-1}(x))]^+` for `l = 2 ..= L`.
pub fn fixed_t<T: Real>(params: &NetworkParams<T>, x: &[T]) -> Result<FixedT<T>> {
    Ok(FixedT {
        layers: params.forward(x)?.activation_masks(),
    })
}

/// One branch of the bound: input coordinate `m` moved by `a ∈ {+ρ, -ρ}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GBranchInput<T> {
    pub m: usize,
    pub a: T,
}

impl<T: Real> GBranchInput<T> {
    pub fn new(m: usize, a: T, input_dim: usize) -> Result<Self> {
        if m >= input_dim {
            return Err(Error::DimensionMismatch {
                expected: input_dim,
                got: m,
            });
        }
        Ok(Self { m, a })
    }
}

fn check_t<T: Real>(params: &NetworkParams<T>, t: &FixedT<T>) -> Result<()> {
    if t.layers.len() + 1 != params.depth() {
        return Err(Error::DimensionMismatch {
            expected: params.depth() - 1,
            got: t.layers.len(),
        });
    }
    Ok(())
}

fn pos_neg_rows<T: Real>(w: &Tensor<T>, i: usize) -> (Vec<T>, Vec<T>) {
    let row = w.row(i);
    (row.iter().map(|v| v.pos()).collect(), row.iter().map(|v| (-*v).pos()).collect())
}

/// `g^L_{k,m}(θ, x, t, a)`, evaluated layer by layer for both `r = ±1`.
pub fn g_branch<T: Real>(
    params: &NetworkParams<T>,
    x: &[T],
    y: usize,
    k: usize,
    t: &FixedT<T>,
    branch: GBranchInput<T>,
) -> Result<T> {
    params.check_input(x)?;
    params.check_label(y)?;
    params.check_label(k)?;
    check_t(params, t)?;
    if branch.m >= params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            got: branch.m,
        });
    }
    let layers = params.layers();
    let first = &layers[0];
    // g^1(a, 1); g^1(a, -1) is its negation.
    let mut gp: Vec<T> = (0..first.outputs())
        .map(|i| branch.a * first.weight.at(i, branch.m) + dot(first.weight.row(i), x) + first.bias.data()[i])
        .collect();
    let mut gn: Vec<T> = gp.iter().map(|v| -*v).collect();
    let depth = params.depth();
    let c_of = |v: &[T]| v[k] - v[y];
    if depth == 1 {
        return Ok(c_of(&gp));
    }
    for (idx, layer) in layers[1..depth - 1].iter().enumerate() {
        let l = idx + 2;
        let tl = t.layer(l);
        let rp: Vec<T> = gp.iter().map(|v| v.pos()).collect();
        let tn: Vec<T> = gn.iter().zip(tl).map(|(&g, &ti)| g * ti).collect();
        let mut next_p = Vec::with_capacity(layer.outputs());
        let mut next_n = Vec::with_capacity(layer.outputs());
        for i in 0..layer.outputs() {
            let (wp, wn) = pos_neg_rows(&layer.weight, i);
            let b = layer.bias.data()[i];
            next_p.push(dot(&wp, &rp) + dot(&wn, &tn) + b);
            next_n.push(dot(&wn, &rp) + dot(&wp, &tn) - b);
        }
        gp = next_p;
        gn = next_n;
    }
    let last = &layers[depth - 1];
    let ckw: Vec<T> = (0..last.inputs())
        .map(|j| last.weight.at(k, j) - last.weight.at(y, j))
        .collect();
    let tl = t.layer(depth);
    let mut out = c_of(last.bias.data());
    for j in 0..ckw.len() {
        out = out + ckw[j].pos() * gp[j].pos() + (-ckw[j]).pos() * gn[j] * tl[j];
    }
    Ok(out)
}

/// All branch values as a `K x 2M` matrix, hidden layers shared across classes.
pub fn branch_scores<T: Real>(
    params: &NetworkParams<T>,
    x: &[T],
    y: usize,
    rho: T,
    t: &FixedT<T>,
) -> Result<Tensor<T>> {
    params.check_input(x)?;
    params.check_label(y)?;
    check_t(params, t)?;
    let layers = params.layers();
    let first = &layers[0];
    let m = params.input_dim();
    let r1 = first.outputs();
    let z1: Vec<T> = (0..r1)
        .map(|i| dot(first.weight.row(i), x) + first.bias.data()[i])
        .collect();
    let mut gp = Tensor::zeros(&[r1, 2 * m]);
    for i in 0..r1 {
        for j in 0..m {
            let d = rho * first.weight.at(i, j);
            gp.data_mut()[i * 2 * m + 2 * j] = z1[i] + d;
            gp.data_mut()[i * 2 * m + 2 * j + 1] = z1[i] - d;
        }
    }
    let c = margin_matrix::<T>(params.class_count(), y);
    if params.depth() == 1 {
        return c.matmul(&gp);
    }
    let mut gn = gp.neg();
    let depth = params.depth();
    for (idx, layer) in layers[1..depth - 1].iter().enumerate() {
        let tl = t.layer(idx + 2);
        let wp = layer.weight.relu();
        let wn = layer.weight.neg().relu();
        let rp = gp.relu();
        let tn = scale_rows(&gn, tl);
        let b = layer.bias.data();
        gp = add_col(&wp.matmul(&rp)?.add(&wn.matmul(&tn)?)?, b);
        gn = add_col(&wn.matmul(&rp)?.add(&wp.matmul(&tn)?)?, &b.iter().map(|v| -*v).collect::<Vec<_>>());
    }
    let last = &layers[depth - 1];
    let v = c.matmul(&last.weight)?;
    let cb = c.matmul(&last.bias)?;
    let tn = scale_rows(&gn, t.layer(depth));
    let s = v.relu().matmul(&gp.relu())?.add(&v.neg().relu().matmul(&tn)?)?;
    Ok(add_col(&s, cb.data()))
}

fn scale_rows<T: Real>(m: &Tensor<T>, f: &[T]) -> Tensor<T> {
    let cols = m.cols();
    let mut out = m.clone();
    for (i, &fi) in f.iter().enumerate() {
        for v in &mut out.data_mut()[i * cols..(i + 1) * cols] {
            *v = *v * fi;
        }
    }
    out
}

fn add_col<T: Real>(m: &Tensor<T>, b: &[T]) -> Tensor<T> {
    let cols = m.cols();
    let mut out = m.clone();
    for (i, &bi) in b.iter().enumerate() {
        for v in &mut out.data_mut()[i * cols..(i + 1) * cols] {
            *v = *v + bi;
        }
    }
    out
}

/// Upper bounds on `sup_{‖δ‖_1 ≤ ρ} c_k^T z^L(x + δ)` for every class `k`.
pub fn rub_class_bounds<T: Real>(
    params: &NetworkParams<T>,
    x: &[T],
    y: usize,
    rho: T,
    t: &FixedT<T>,
) -> Result<Vec<T>> {
    if !(rho >= T::zero()) {
        return Err(Error::InvalidConfig("rho must be >= 0".into()));
    }
    let s = branch_scores(params, x, y, rho, t)?;
    Ok((0..s.rows()).map(|k| s.row(k)[argmax(s.row(k))]).collect())
}

/// `max_m max{g^L_{k,m}(+ρ), g^L_{k,m}(-ρ)}`.
pub fn rub_class_bound<T: Real>(
    params: &NetworkParams<T>,
    x: &[T],
    y: usize,
    k: usize,
    rho: T,
    t: &FixedT<T>,
) -> Result<T> {
    params.check_label(k)?;
    Ok(rub_class_bounds(params, x, y, rho, t)?[k])
}

/// Records `log Σ_k exp(max over branches of g^L_{k,m})` for one sample, with
/// `t` taken from the current parameters and held constant.
pub fn rub_term<T: Real>(
    tape: &mut Tape<T>,
    nodes: &ParamNodes,
    params: &NetworkParams<T>,
    ex: Example<'_, T>,
    rho: T,
) -> Result<NodeId> {
    params.check_input(ex.x)?;
    let t = fixed_t(params, ex.x)?;
    let depth = params.depth();
    let (w1, b1) = nodes.layers[0];
    let x = tape.constant(Tensor::vector(ex.x.to_vec()));
    let w1x = tape.matmul(w1, x)?;
    let z1 = tape.add(w1x, b1)?;
    let cols = tape.signed_columns(w1, rho)?;
    let mut gp = tape.add_col(cols, z1)?;
    let c = tape.constant(margin_matrix(params.class_count(), ex.y));
    let scores = if depth == 1 {
        tape.matmul(c, gp)?
    } else {
        let mut gn = tape.neg(gp);
        for (idx, &(w, b)) in nodes.layers[1..depth - 1].iter().enumerate() {
            let wp = tape.relu(w);
            let neg_w = tape.neg(w);
            let wn = tape.relu(neg_w);
            let rp = tape.relu(gp);
            let tn = tape.scale_rows(gn, t.layer(idx + 2).to_vec())?;
            let a = tape.matmul(wp, rp)?;
            let bb = tape.matmul(wn, tn)?;
            let sum_p = tape.add(a, bb)?;
            let a = tape.matmul(wn, rp)?;
            let bb = tape.matmul(wp, tn)?;
            let sum_n = tape.add(a, bb)?;
            gp = tape.add_col(sum_p, b)?;
            let neg_b = tape.neg(b);
            gn = tape.add_col(sum_n, neg_b)?;
        }
        let (wl, bl) = nodes.layers[depth - 1];
        let v = tape.matmul(c, wl)?;
        let vp = tape.relu(v);
        let neg_v = tape.neg(v);
        let vn = tape.relu(neg_v);
        let rp = tape.relu(gp);
        let tn = tape.scale_rows(gn, t.layer(depth).to_vec())?;
        let a = tape.matmul(vp, rp)?;
        let bb = tape.matmul(vn, tn)?;
        let s = tape.add(a, bb)?;
        let cb = tape.matmul(c, bl)?;
        tape.add_col(s, cb)?
    };
    let bounds = tape.row_max(scores)?;
    tape.logsumexp(bounds)
}

pub fn rub_objective<T: Real>(
    tape: &mut Tape<T>,
    nodes: &ParamNodes,
    params: &NetworkParams<T>,
    batch: &[Example<'_, T>],
    rho: f64,
) -> Result<NodeId> {
    objective_on_tape(tape, nodes, params, batch, &RobustConfig::new(ObjectiveKind::Rub, Norm::L1, rho)?)
}

/// Two-layer dual objective for given relaxation weights `s`, `t`:
///
/// `ρ ‖(p - q)^T W^1‖_q + (p - q)^T (W^1 x + b^1) + c_k^T b^2` with
/// `p = [W^2^T c_k]^+ ⊙ s` and `q = [-W^2^T c_k]^+ ⊙ t`.
#[allow(clippy::too_many_arguments)]
pub fn two_layer_dual_objective<T: Real>(
    params: &NetworkParams<T>,
    x: &[T],
    y: usize,
    k: usize,
    s: &[T],
    t: &[T],
    rho: T,
    q: Norm,
) -> Result<T> {
    if params.depth() != 2 {
        return Err(Error::InvalidNetwork("two-layer network required".into()));
    }
    params.check_input(x)?;
    params.check_label(y)?;
    params.check_label(k)?;
    let (l1, l2) = (&params.layers()[0], &params.layers()[1]);
    let r1 = l1.outputs();
    if s.len() != r1 || t.len() != r1 {
        return Err(Error::DimensionMismatch {
            expected: r1,
            got: s.len().min(t.len()),
        });
    }
    let d: Vec<T> = (0..r1)
        .map(|j| {
            let v = l2.weight.at(k, j) - l2.weight.at(y, j);
            v.pos() * s[j] - (-v).pos() * t[j]
        })
        .collect();
    let dw: Vec<T> = (0..l1.inputs())
        .map(|m| (0..r1).map(|j| d[j] * l1.weight.at(j, m)).sum())
        .collect();
    let z1: Vec<T> = (0..r1).map(|j| dot(l1.weight.row(j), x) + l1.bias.data()[j]).collect();
    let cb = l2.bias.data()[k] - l2.bias.data()[y];
    Ok(rho * q.of(&dw) + dot(&d, &z1) + cb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertResult {
    pub sample_id: usize,
    pub label: usize,
    pub predicted: usize,
    pub certified: bool,
    /// `max_{k ≠ y}` of the class bounds.
    pub worst_bound: f64,
    pub rho: f64,
}

/// Certified iff every class bound `k ≠ y` is strictly negative, which
/// guarantees `predict(x + δ) = y` for all `‖δ‖_1 ≤ ρ`.
pub fn certify_sample<T: Real>(
    params: &NetworkParams<T>,
    sample_id: usize,
    x: &[T],
    y: usize,
    rho: T,
) -> Result<CertResult> {
    let t = fixed_t(params, x)?;
    let bounds = rub_class_bounds(params, x, y, rho, &t)?;
    let worst = bounds
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != y)
        .map(|(_, &b)| b)
        .fold(T::neg_infinity(), T::max);
    Ok(CertResult {
        sample_id,
        label: y,
        predicted: params.predict(x)?,
        certified: worst < T::zero(),
        worst_bound: worst.as_f64(),
        rho: rho.as_f64(),
    })
}

pub fn certify_all<T: Real>(params: &NetworkParams<T>, examples: &[Example<'_, T>], rho: T) -> Result<Vec<CertResult>> {
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| certify_sample(params, i, ex.x, ex.y, rho))
        .collect()
}

/// Fraction of samples certified at radius `ρ`: a lower bound on accuracy
/// under any L1 attack of radius at most `ρ`.
pub fn certified_accuracy<T: Real>(params: &NetworkParams<T>, examples: &[Example<'_, T>], rho: T) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty);
    }
    let results = certify_all(params, examples, rho)?;
    Ok(results.iter().filter(|r| r.certified).count() as f64 / results.len() as f64)
}

/// Largest input dimension accepted by [`brute_force_sup`].
pub const BRUTE_FORCE_MAX_DIM: usize = 6;

/// Lower estimate of `sup_{‖δ‖_1 ≤ ρ} c_k^T z^L(x + δ)` from the clean point,
/// all `2M` vertices, `samples` random points of the ball and projected
/// gradient ascent started from the best candidate found.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_sup<T: Real>(
    params: &NetworkParams<T>,
    x: &[T],
    y: usize,
    k: usize,
    rho: T,
    samples: usize,
    seed: u64,
) -> Result<T> {
    params.check_input(x)?;
    params.check_label(y)?;
    params.check_label(k)?;
    let m = params.input_dim();
    if m > BRUTE_FORCE_MAX_DIM {
        return Err(Error::DimensionTooLarge(m, BRUTE_FORCE_MAX_DIM));
    }
    let margin = |d: &[T]| -> Result<T> {
        let xd: Vec<T> = x.iter().zip(d).map(|(&a, &b)| a + b).collect();
        let z = params.logits(&xd)?;
        Ok(z[k] - z[y])
    };
    let mut best_delta = vec![T::zero(); m];
    let mut best = margin(&best_delta)?;
    let consider = |d: Vec<T>, best: &mut T, best_delta: &mut Vec<T>| -> Result<()> {
        let v = margin(&d)?;
        if v > *best {
            *best = v;
            *best_delta = d;
        }
        Ok(())
    };
    for j in 0..m {
        for a in [rho, -rho] {
            let mut d = vec![T::zero(); m];
            d[j] = a;
            consider(d, &mut best, &mut best_delta)?;
        }
    }
    let mut rng = SeededRng::new(seed);
    for _ in 0..samples {
        let d = sample_lp_ball(m, Norm::L1, rho, &mut rng);
        consider(d, &mut best, &mut best_delta)?;
    }
    if rho > T::zero() {
        let mut c = vec![T::zero(); params.class_count()];
        c[k] = c[k] + T::one();
        c[y] = c[y] - T::one();
        let mut d = best_delta.clone();
        let step = rho * T::lit(0.05);
        for _ in 0..200 {
            let xd: Vec<T> = x.iter().zip(&d).map(|(&a, &b)| a + b).collect();
            let g = params.input_vjp(&xd, &c)?;
            let dir = dual_maximizer(&g, Norm::L1, T::one());
            let moved: Vec<T> = d.iter().zip(&dir).map(|(&a, &b)| a + step * b).collect();
            d = project_lp_ball(&moved, Norm::L1, rho);
            consider(d.clone(), &mut best, &mut best_delta)?;
        }
    }
    Ok(best)
}
