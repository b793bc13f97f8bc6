//! Training objectives over a batch of labelled inputs.
//!
//! Every objective is the mean over the batch of a per-sample term recorded
//! on a [`Tape`]. The per-class margins use `c_k = e_k - e_y`, so the loss
//! `log Σ_k exp(c_k^T z)` is cross-entropy written in its
//! translation-invariant form. Activation masks inside Jacobian-bearing terms
//! are constants of the tape.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Example, NetworkParams, ParamNodes};
use crate::robust_bound;
use crate::scalar::Real;
use crate::tape::{NodeId, Tape};
use crate::tensor::{logsumexp, softmax, Norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Nominal,
    Baseline,
    Arub,
    Rub,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 4] = [Self::Nominal, Self::Baseline, Self::Arub, Self::Rub];
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Nominal => "nominal",
            Self::Baseline => "baseline",
            Self::Arub => "arub",
            Self::Rub => "rub",
        })
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nominal" => Ok(Self::Nominal),
            "baseline" => Ok(Self::Baseline),
            "arub" => Ok(Self::Arub),
            "rub" => Ok(Self::Rub),
            other => Err(Error::InvalidConfig(format!("unknown objective `{other}`"))),
        }
    }
}

/// Objective plus the uncertainty set `{δ : ‖δ‖_p ≤ ρ}` it is robust to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustConfig {
    pub objective: ObjectiveKind,
    pub p: Norm,
    pub rho: f64,
}

impl RobustConfig {
    pub fn new(objective: ObjectiveKind, p: Norm, rho: f64) -> Result<Self> {
        let cfg = Self { objective, p, rho };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn nominal() -> Self {
        Self {
            objective: ObjectiveKind::Nominal,
            p: Norm::Inf,
            rho: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::InvalidConfig(format!("rho must be finite and >= 0, got {}", self.rho)));
        }
        if self.objective == ObjectiveKind::Rub && self.p != Norm::L1 {
            return Err(Error::InvalidConfig("rub requires p = 1".into()));
        }
        Ok(())
    }

    /// Dual norm order.
    pub fn q(&self) -> Norm {
        self.p.dual()
    }

    pub fn with_rho(self, rho: f64) -> Self {
        Self { rho, ..self }
    }
}

/// `log Σ_k exp(z_k - z_y)`.
pub fn cross_entropy<T: Real>(y: usize, z: &[T]) -> Result<T> {
    if y >= z.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: z.len(),
        });
    }
    let zy = z[y];
    let shifted: Vec<T> = z.iter().map(|&v| v - zy).collect();
    Ok(logsumexp(&shifted))
}

/// Constant `K x K` matrix whose row `k` is `c_k = e_k - e_y`.
pub fn margin_matrix<T: Real>(k: usize, y: usize) -> Tensor<T> {
    let mut c = Tensor::identity(k);
    for r in 0..k {
        let idx = r * k + y;
        c.data_mut()[idx] = c.data()[idx] - T::one();
    }
    c
}

/// `c_k^T v` for `c_k = e_k - e_y`.
fn class_diff<T: Real>(v: &[T], y: usize, k: usize) -> T {
    v[k] - v[y]
}

/// First-order robust class margin
/// `c_k^T z^L(x) + ρ ‖c_k^T ∇_x z^L(x)‖_q`.
pub fn arub_class_margin<T: Real>(
    params: &NetworkParams<T>,
    x: &[T],
    y: usize,
    k: usize,
    rho: T,
    q: Norm,
) -> Result<T> {
    params.check_label(y)?;
    params.check_label(k)?;
    let z = params.logits(x)?;
    let j = params.input_jacobian(x)?;
    let row: Vec<T> = (0..j.cols()).map(|m| j.at(k, m) - j.at(y, m)).collect();
    Ok(class_diff(&z, y, k) + rho * q.of(&row))
}

/// `∇_x L(y, z^L(x)) = J^T (softmax(z^L) - e_y)`.
pub fn loss_input_gradient<T: Real>(params: &NetworkParams<T>, x: &[T], y: usize) -> Result<Vec<T>> {
    params.check_label(y)?;
    let mut r = softmax(&params.logits(x)?);
    r[y] = r[y] - T::one();
    params.input_vjp(x, &r)
}

/// Records the per-sample term of the configured objective.
pub fn sample_term<T: Real>(
    tape: &mut Tape<T>,
    nodes: &ParamNodes,
    params: &NetworkParams<T>,
    ex: Example<'_, T>,
    cfg: &RobustConfig,
) -> Result<NodeId> {
    params.check_label(ex.y)?;
    let rho = T::lit(cfg.rho);
    match cfg.objective {
        ObjectiveKind::Nominal => nominal_term(tape, nodes, ex),
        ObjectiveKind::Baseline => baseline_term(tape, nodes, params, ex, rho, cfg.q()),
        ObjectiveKind::Arub => arub_term(tape, nodes, params, ex, rho, cfg.q()),
        ObjectiveKind::Rub => robust_bound::rub_term(tape, nodes, params, ex, rho),
    }
}

fn class_margins<T: Real>(tape: &mut Tape<T>, logits: NodeId, y: usize) -> Result<NodeId> {
    let k = tape.value(logits).len();
    let c = tape.constant(margin_matrix(k, y));
    tape.matmul(c, logits)
}

fn nominal_term<T: Real>(tape: &mut Tape<T>, nodes: &ParamNodes, ex: Example<'_, T>) -> Result<NodeId> {
    let z = nodes.forward(tape, ex.x)?;
    let margins = class_margins(tape, *z.last().expect("nonempty"), ex.y)?;
    tape.logsumexp(margins)
}

fn masks_on_tape<T: Real>(tape: &Tape<T>, preacts: &[NodeId]) -> Vec<Vec<T>> {
    preacts[..preacts.len() - 1]
        .iter()
        .map(|&id| tape.value(id).data().iter().map(|v| v.step()).collect())
        .collect()
}

fn arub_term<T: Real>(
    tape: &mut Tape<T>,
    nodes: &ParamNodes,
    params: &NetworkParams<T>,
    ex: Example<'_, T>,
    rho: T,
    q: Norm,
) -> Result<NodeId> {
    let z = nodes.forward(tape, ex.x)?;
    let masks = masks_on_tape(tape, &z);
    let jac = nodes.input_jacobian(tape, &masks)?;
    let c = tape.constant(margin_matrix(params.class_count(), ex.y));
    let cz = tape.matmul(c, *z.last().expect("nonempty"))?;
    let cj = tape.matmul(c, jac)?;
    let norms = tape.row_norms(cj, q)?;
    let robust = tape.scale(norms, rho);
    let margins = tape.add(cz, robust)?;
    tape.logsumexp(margins)
}

fn baseline_term<T: Real>(
    tape: &mut Tape<T>,
    nodes: &ParamNodes,
    params: &NetworkParams<T>,
    ex: Example<'_, T>,
    rho: T,
    q: Norm,
) -> Result<NodeId> {
    let z = nodes.forward(tape, ex.x)?;
    let logits = *z.last().expect("nonempty");
    let masks = masks_on_tape(tape, &z);
    let margins = class_margins(tape, logits, ex.y)?;
    let loss = tape.logsumexp(margins)?;
    let jac = nodes.input_jacobian(tape, &masks)?;
    let s = tape.softmax(logits)?;
    let mut onehot = Tensor::zeros(&[params.class_count()]);
    onehot.data_mut()[ex.y] = T::one();
    let e_y = tape.constant(onehot);
    let r = tape.sub(s, e_y)?;
    let jt = tape.transpose(jac)?;
    let gx = tape.matmul(jt, r)?;
    let n = tape.norm(gx, q)?;
    let reg = tape.scale(n, rho);
    tape.add(loss, reg)
}

/// Records `(1/N) Σ_n term_n` for the batch on a single tape.
pub fn objective_on_tape<T: Real>(
    tape: &mut Tape<T>,
    nodes: &ParamNodes,
    params: &NetworkParams<T>,
    batch: &[Example<'_, T>],
    cfg: &RobustConfig,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Empty);
    }
    cfg.validate()?;
    let terms = batch
        .iter()
        .map(|&ex| sample_term(tape, nodes, params, ex, cfg))
        .collect::<Result<Vec<_>>>()?;
    let total = tape.add_all(&terms)?;
    Ok(tape.scale(total, T::one() / T::lit(batch.len() as f64)))
}

pub fn nominal_objective<T: Real>(
    tape: &mut Tape<T>,
    nodes: &ParamNodes,
    params: &NetworkParams<T>,
    batch: &[Example<'_, T>],
) -> Result<NodeId> {
    objective_on_tape(tape, nodes, params, batch, &RobustConfig::nominal())
}

pub fn arub_objective<T: Real>(
    tape: &mut Tape<T>,
    nodes: &ParamNodes,
    params: &NetworkParams<T>,
    batch: &[Example<'_, T>],
    rho: f64,
    p: Norm,
) -> Result<NodeId> {
    objective_on_tape(tape, nodes, params, batch, &RobustConfig::new(ObjectiveKind::Arub, p, rho)?)
}

pub fn baseline_objective<T: Real>(
    tape: &mut Tape<T>,
    nodes: &ParamNodes,
    params: &NetworkParams<T>,
    batch: &[Example<'_, T>],
    rho: f64,
    p: Norm,
) -> Result<NodeId> {
    objective_on_tape(tape, nodes, params, batch, &RobustConfig::new(ObjectiveKind::Baseline, p, rho)?)
}

/// Per-sample objective value.
pub fn sample_value<T: Real>(params: &NetworkParams<T>, ex: Example<'_, T>, cfg: &RobustConfig) -> Result<T> {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let root = sample_term(&mut tape, &nodes, params, ex, cfg)?;
    Ok(tape.scalar_value(root))
}

/// Batch objective value, evaluated per sample in parallel.
pub fn evaluate<T: Real>(params: &NetworkParams<T>, batch: &[Example<'_, T>], cfg: &RobustConfig) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::Empty);
    }
    cfg.validate()?;
    let values = batch
        .par_iter()
        .map(|&ex| sample_value(params, ex, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(values.into_iter().sum::<T>() / T::lit(batch.len() as f64))
}

/// Batch objective value and its gradient with respect to every parameter.
///
/// Each sample is differentiated on its own tape in parallel and the results
/// are reduced in batch order, so the output does not depend on the number
/// of worker threads.
pub fn value_and_grad<T: Real>(
    params: &NetworkParams<T>,
    batch: &[Example<'_, T>],
    cfg: &RobustConfig,
) -> Result<(T, NetworkParams<T>)> {
    if batch.is_empty() {
        return Err(Error::Empty);
    }
    cfg.validate()?;
    let per_sample = batch
        .par_iter()
        .map(|&ex| {
            let mut tape = Tape::new();
            let nodes = params.register(&mut tape);
            let root = sample_term(&mut tape, &nodes, params, ex, cfg)?;
            tape.backward(root)?;
            Ok((tape.scalar_value(root), nodes.gradients(&tape, params)))
        })
        .collect::<Result<Vec<_>>>()?;
    let inv = T::one() / T::lit(batch.len() as f64);
    let mut grad = params.zeros_like();
    let mut value = T::zero();
    for (v, g) in &per_sample {
        value = value + *v;
        grad.axpy(inv, g)?;
    }
    Ok((value * inv, grad))
}
