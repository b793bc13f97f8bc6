//! Norm-bounded adversarial attacks: FGSM, FGM and PGD.
//!
//! All attacks return a perturbation `δ` with `‖δ‖_p ≤ ρ` that tries to
//! increase the cross-entropy loss at `x + δ`.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Example, NetworkParams};
use crate::objectives::{cross_entropy, loss_input_gradient};
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::tensor::{argmax, Norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Fgm,
    Pgd,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [AttackKind::Fgsm, AttackKind::Fgm, AttackKind::Pgd];
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Fgm => "fgm",
            AttackKind::Pgd => "pgd",
        })
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "fgm" => Ok(AttackKind::Fgm),
            "pgd" => Ok(AttackKind::Pgd),
            other => Err(Error::InvalidConfig(format!("unknown attack `{other}`"))),
        }
    }
}

pub const DEFAULT_PGD_STEPS: usize = 40;
pub const DEFAULT_PGD_RESTARTS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub p: Norm,
    pub rho: f64,
    pub steps: usize,
    /// PGD step length; `None` means `2.5 ρ / steps`.
    pub step_size: Option<f64>,
    pub restarts: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, p: Norm, rho: f64) -> Result<Self> {
        let cfg = Self {
            kind,
            p,
            rho,
            steps: DEFAULT_PGD_STEPS,
            step_size: None,
            restarts: DEFAULT_PGD_RESTARTS,
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fgsm(rho: f64) -> Result<Self> {
        Self::new(AttackKind::Fgsm, Norm::Inf, rho)
    }

    pub fn fgm(p: Norm, rho: f64) -> Result<Self> {
        Self::new(AttackKind::Fgm, p, rho)
    }

    pub fn pgd(p: Norm, rho: f64) -> Result<Self> {
        Self::new(AttackKind::Pgd, p, rho)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidConfig(format!("attack radius must be >= 0, got {}", self.rho)));
        }
        if self.kind == AttackKind::Fgsm && self.p != Norm::Inf {
            return Err(Error::InvalidConfig("fgsm is defined for p = inf only".into()));
        }
        if self.kind == AttackKind::Pgd {
            if self.steps == 0 || self.restarts == 0 {
                return Err(Error::InvalidConfig("pgd needs at least one step and one restart".into()));
            }
            if let Some(s) = self.step_size {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::InvalidConfig("pgd step size must be > 0".into()));
                }
            }
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(2.5 * self.rho / self.steps as f64)
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Euclidean projection onto `{δ : ‖δ‖_p ≤ ρ}`.
pub fn project_lp_ball<T: Real>(v: &[T], p: Norm, rho: T) -> Vec<T> {
    match p {
        Norm::Inf => v.iter().map(|&x| x.max(-rho).min(rho)).collect(),
        Norm::L2 => {
            let n = p.of(v);
            if n <= rho {
                v.to_vec()
            } else {
                v.iter().map(|&x| x * rho / n).collect()
            }
        }
        Norm::L1 => project_l1(v, rho),
    }
}

// Sort-and-threshold projection onto the L1 ball.
fn project_l1<T: Real>(v: &[T], rho: T) -> Vec<T> {
    if Norm::L1.of(v) <= rho {
        return v.to_vec();
    }
    if rho <= T::zero() {
        return vec![T::zero(); v.len()];
    }
    let mut u: Vec<T> = v.iter().map(|x| x.abs()).collect();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cum = T::zero();
    let mut theta = T::zero();
    for (j, &uj) in u.iter().enumerate() {
        cum = cum + uj;
        let t = (cum - rho) / T::lit((j + 1) as f64);
        if uj > t {
            theta = t;
        } else {
            break;
        }
    }
    v.iter()
        .map(|&x| x.signum() * (x.abs() - theta).max(T::zero()))
        .collect()
}

/// `argmax_{‖δ‖_p ≤ ρ} c^T δ`; zero when `c = 0`.
pub fn dual_maximizer<T: Real>(c: &[T], p: Norm, rho: T) -> Vec<T> {
    match p {
        Norm::Inf => c.iter().map(|x| rho * x.sign0()).collect(),
        Norm::L2 => {
            let n = Norm::L2.of(c);
            if n > T::zero() {
                c.iter().map(|&x| rho * x / n).collect()
            } else {
                vec![T::zero(); c.len()]
            }
        }
        Norm::L1 => {
            let mut out = vec![T::zero(); c.len()];
            if !c.is_empty() {
                let abs: Vec<T> = c.iter().map(|x| x.abs()).collect();
                let i = argmax(&abs);
                out[i] = rho * c[i].sign0();
            }
            out
        }
    }
}

/// Uniform sample from the Lp ball of radius `ρ` in `m` dimensions.
pub fn sample_lp_ball<T: Real>(m: usize, p: Norm, rho: T, rng: &mut SeededRng) -> Vec<T> {
    let rho = rho.as_f64();
    let v: Vec<f64> = match p {
        Norm::Inf => (0..m).map(|_| rng.uniform(-rho, rho)).collect(),
        Norm::L2 => {
            let g: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
            let n = Norm::L2.of(&g).max(f64::MIN_POSITIVE);
            let r = rho * rng.uniform(0.0, 1.0).powf(1.0 / m.max(1) as f64);
            g.iter().map(|x| x * r / n).collect()
        }
        Norm::L1 => {
            // m + 1 exponentials: the first m normalised coordinates are
            // uniform on the simplex interior, the last absorbs the slack.
            let e: Vec<f64> = (0..=m).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = e.iter().sum();
            e[..m]
                .iter()
                .map(|x| {
                    let s = if rng.below(2) == 0 { 1.0 } else { -1.0 };
                    s * rho * x / total
                })
                .collect()
        }
    };
    v.into_iter().map(T::lit).collect()
}

fn shifted<T: Real>(x: &[T], d: &[T]) -> Vec<T> {
    x.iter().zip(d).map(|(&a, &b)| a + b).collect()
}

/// `ρ sign(∇_x L)`.
pub fn fgsm<T: Real>(params: &NetworkParams<T>, x: &[T], y: usize, rho: T) -> Result<Vec<T>> {
    fgm(params, x, y, Norm::Inf, rho)
}

/// One step to the boundary of the Lp ball along the loss gradient's dual direction.
pub fn fgm<T: Real>(params: &NetworkParams<T>, x: &[T], y: usize, p: Norm, rho: T) -> Result<Vec<T>> {
    let g = loss_input_gradient(params, x, y)?;
    Ok(dual_maximizer(&g, p, rho))
}

/// Projected steepest ascent on the loss. Restart 0 starts at `δ = 0`, later
/// restarts at a uniform point of the ball. Returns the highest-loss iterate
/// seen, including the clean point.
pub fn pgd<T: Real>(params: &NetworkParams<T>, x: &[T], y: usize, cfg: &AttackConfig) -> Result<Vec<T>> {
    cfg.validate()?;
    params.check_input(x)?;
    let m = x.len();
    let rho = T::lit(cfg.rho);
    let step = T::lit(cfg.step());
    let loss = |d: &[T]| -> Result<T> { cross_entropy(y, &params.logits(&shifted(x, d))?) };
    let mut best = vec![T::zero(); m];
    let mut best_loss = loss(&best)?;
    if cfg.rho == 0.0 {
        return Ok(best);
    }
    let mut rng = SeededRng::new(cfg.seed);
    for r in 0..cfg.restarts {
        let mut d = if r == 0 {
            vec![T::zero(); m]
        } else {
            sample_lp_ball(m, cfg.p, rho, &mut rng)
        };
        if r > 0 {
            let l = loss(&d)?;
            if l > best_loss {
                best_loss = l;
                best = d.clone();
            }
        }
        for _ in 0..cfg.steps {
            let g = loss_input_gradient(params, &shifted(x, &d), y)?;
            let dir = dual_maximizer(&g, cfg.p, step);
            d = project_lp_ball(&shifted(&d, &dir), cfg.p, rho);
            let l = loss(&d)?;
            if l > best_loss {
                best_loss = l;
                best = d.clone();
            }
        }
    }
    Ok(best)
}

pub fn attack<T: Real>(params: &NetworkParams<T>, x: &[T], y: usize, cfg: &AttackConfig) -> Result<Vec<T>> {
    cfg.validate()?;
    params.check_label(y)?;
    match cfg.kind {
        AttackKind::Fgsm => fgsm(params, x, y, T::lit(cfg.rho)),
        AttackKind::Fgm => fgm(params, x, y, cfg.p, T::lit(cfg.rho)),
        AttackKind::Pgd => pgd(params, x, y, cfg),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub sample_id: usize,
    pub attack: AttackKind,
    pub p: Norm,
    pub rho: f64,
    pub label: usize,
    pub clean_prediction: usize,
    pub adversarial_prediction: usize,
    /// `‖δ‖_p` of the perturbation used.
    pub perturbation_norm: f64,
}

impl AttackRecord {
    pub fn correct(&self) -> bool {
        self.adversarial_prediction == self.label
    }
}

/// Attacks every example; sample `i` uses a seed derived from `(cfg.seed, i)`.
pub fn attack_all<T: Real>(
    params: &NetworkParams<T>,
    examples: &[Example<'_, T>],
    cfg: &AttackConfig,
) -> Result<Vec<AttackRecord>> {
    cfg.validate()?;
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let local = cfg.with_seed(SeededRng::derive(cfg.seed, i as u64).seed());
            let d = attack(params, ex.x, ex.y, &local)?;
            Ok(AttackRecord {
                sample_id: i,
                attack: cfg.kind,
                p: cfg.p,
                rho: cfg.rho,
                label: ex.y,
                clean_prediction: params.predict(ex.x)?,
                adversarial_prediction: params.predict(&shifted(ex.x, &d))?,
                perturbation_norm: cfg.p.of(&d).as_f64(),
            })
        })
        .collect()
}

/// Fraction of examples still classified correctly after the attack.
pub fn adversarial_accuracy<T: Real>(
    params: &NetworkParams<T>,
    examples: &[Example<'_, T>],
    cfg: &AttackConfig,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty);
    }
    let records = attack_all(params, examples, cfg)?;
    Ok(records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64)
}

/// Fraction of examples classified correctly without perturbation.
pub fn clean_accuracy<T: Real>(params: &NetworkParams<T>, examples: &[Example<'_, T>]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty);
    }
    let correct: Result<Vec<bool>> = examples
        .par_iter()
        .map(|ex| Ok(params.predict(ex.x)? == ex.y))
        .collect();
    Ok(correct?.iter().filter(|&&c| c).count() as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::{random_net, random_x};
    use proptest::prelude::*;

    fn brute_l1_projection(v: &[f64], rho: f64) -> f64 {
        // distance from v to the L1 ball via bisection on the soft threshold
        if Norm::L1.of(v) <= rho {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0, v.iter().fold(0.0f64, |a, x| a.max(x.abs())));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let s: f64 = v.iter().map(|x| (x.abs() - mid).max(0.0)).sum();
            if s > rho {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        v.iter()
            .map(|x| x.abs() - (x.abs() - hi).max(0.0))
            .map(|d| d * d)
            .sum::<f64>()
            .sqrt()
    }

    proptest! {
        #[test]
        fn projection_feasible_and_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..12), rho in 0.0f64..3.0) {
            for p in Norm::ALL {
                let w = project_lp_ball(&v, p, rho);
                prop_assert!(p.of(&w) <= rho * (1.0 + 1e-9) + 1e-12);
                let ww = project_lp_ball(&w, p, rho);
                for (a, b) in w.iter().zip(&ww) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn l1_projection_is_nearest_point(v in prop::collection::vec(-5.0f64..5.0, 1..10), rho in 0.01f64..3.0) {
            let w = project_lp_ball(&v, Norm::L1, rho);
            let dist = v.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            prop_assert!((dist - brute_l1_projection(&v, rho)).abs() < 1e-7);
        }

        #[test]
        fn dual_maximizer_attains_dual_norm(c in prop::collection::vec(-5.0f64..5.0, 1..10), rho in 0.0f64..3.0) {
            for p in Norm::ALL {
                let d = dual_maximizer(&c, p, rho);
                prop_assert!(p.of(&d) <= rho * (1.0 + 1e-12) + 1e-15);
                let val: f64 = c.iter().zip(&d).map(|(a, b)| a * b).sum();
                prop_assert!((val - rho * p.dual().of(&c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_lp_ball(&[3.0, -1.0], Norm::L1, 2.0), vec![2.0, 0.0]);
        assert_eq!(project_lp_ball(&[3.0, -4.0], Norm::L2, 1.0), vec![0.6, -0.8]);
        assert_eq!(project_lp_ball(&[3.0, -0.5], Norm::Inf, 1.0), vec![1.0, -0.5]);
        assert_eq!(project_lp_ball(&[0.5, 0.5], Norm::L1, 0.0), vec![0.0, 0.0]);
        assert_eq!(dual_maximizer(&[0.0, 0.0], Norm::L2, 1.0), vec![0.0, 0.0]);
        assert_eq!(dual_maximizer(&[1.0, -3.0, 3.0], Norm::L1, 2.0), vec![0.0, -2.0, 0.0]);
    }

    #[test]
    fn ball_samples_inside() {
        let mut rng = SeededRng::new(1);
        for p in Norm::ALL {
            for _ in 0..200 {
                let d: Vec<f64> = sample_lp_ball(5, p, 0.7, &mut rng);
                assert!(p.of(&d) <= 0.7 + 1e-12);
            }
        }
    }

    #[test]
    fn fgsm_requires_inf() {
        assert!(AttackConfig::new(AttackKind::Fgsm, Norm::L2, 0.1).is_err());
        assert!(AttackConfig::fgsm(-0.1).is_err());
        assert_eq!(AttackConfig::pgd(Norm::L2, 0.4).unwrap().step(), 2.5 * 0.4 / 40.0);
    }

    #[test]
    fn zero_radius_attacks_are_identity() {
        let net = random_net(&[3, 5, 3], 1);
        let xs: Vec<Vec<f64>> = (0..20).map(|i| random_x(3, i)).collect();
        let ex: Vec<_> = xs.iter().enumerate().map(|(i, x)| Example::new(&x[..], i % 3)).collect();
        let clean = clean_accuracy(&net, &ex).unwrap();
        for kind in AttackKind::ALL {
            let p = if kind == AttackKind::Fgsm { Norm::Inf } else { Norm::L2 };
            let cfg = AttackConfig::new(kind, p, 0.0).unwrap();
            assert_eq!(attack(&net, &xs[0], 0, &cfg).unwrap(), vec![0.0; 3]);
            assert_eq!(adversarial_accuracy(&net, &ex, &cfg).unwrap(), clean);
        }
        assert!(adversarial_accuracy(&net, &[], &AttackConfig::fgsm(0.1).unwrap()).is_err());
    }

    #[test]
    fn one_step_pgd_on_linear_model_equals_fgm() {
        let net = random_net(&[4, 2], 3);
        let x = random_x(4, 5);
        for p in Norm::ALL {
            let mut cfg = AttackConfig::pgd(p, 0.3).unwrap();
            cfg.steps = 1;
            cfg.restarts = 1;
            cfg.step_size = Some(0.5);
            let a = pgd(&net, &x, 0, &cfg).unwrap();
            let b = fgm(&net, &x, 0, p, 0.3).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12, "{p}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn attacks_feasible_and_do_not_lower_loss() {
        for seed in 0..5 {
            let net = random_net(&[5, 8, 3], seed);
            let x = random_x(5, seed + 7);
            let clean = cross_entropy(1, &net.logits(&x).unwrap()).unwrap();
            for p in Norm::ALL {
                let cfg = AttackConfig::pgd(p, 0.4).unwrap().with_seed(seed);
                let d = pgd(&net, &x, 1, &cfg).unwrap();
                assert!(p.of(&d) <= 0.4 * (1.0 + 1e-9));
                let adv = cross_entropy(1, &net.logits(&shifted(&x, &d)).unwrap()).unwrap();
                assert!(adv >= clean);
                assert_eq!(pgd(&net, &x, 1, &cfg).unwrap(), d);
            }
        }
    }
}
