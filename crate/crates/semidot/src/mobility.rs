//! Mobility (mean) functions weighting mass exchange between graph nodes.
//!
//! Two kinds are provided:
//!
//! * **mass independent**: `theta_{x,g,g'}(s,t) = e^{-W(x)}` — constant in
//!   the masses, symmetric in the node pair;
//! * **log-mean scaled**: `theta_{x,g,g'}(s,t) =
//!   theta_log(s e^{V(x,g)}, t e^{V(x,g')})` built from the logarithmic
//!   mean `theta_log(a,b) = (a - b) / (log a - log b)`.
//!
//! The logarithmic mean is evaluated in the cancellation-free form
//! `sqrt(ab) * sinh(x) / x` with `x = (log a - log b) / 2`, switching to the
//! Taylor series `sqrt(ab) (1 + x^2/6 + x^4/120)` when `|log a - log b|`
//! falls below `1e-6`. This keeps the product identity
//! `theta_log(a,b) * (log a - log b) = a - b` accurate to roundoff, which
//! downstream code relies on (the log-mean exchange term is then exactly
//! linear in the masses).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potentials::PotentialPair;

/// Threshold on `|log a - log b|` below which the series branch is used.
pub const DIAGONAL_THRESHOLD: f64 = 1e-6;

/// Identifier of a mobility kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MobilityKind {
    /// Constant-in-mass mobility `e^{-W(x)}`.
    MassIndependent,
    /// Logarithmic mean of the `e^{V}`-scaled masses.
    LogMean,
}

/// Logarithmic mean `(a - b) / (log a - log b)`, extended continuously by
/// `theta_log(a, a) = a` and `theta_log(a, 0) = 0`.
pub fn theta_log(a: f64, b: f64) -> Result<f64> {
    if !(a >= 0.0 && b >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "logarithmic mean needs nonnegative arguments, got ({a}, {b})"
        )));
    }
    Ok(theta_log_nonneg(a, b))
}

/// Infallible logarithmic mean for validated nonnegative inputs.
fn theta_log_nonneg(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        return 0.0;
    }
    let m = a.sqrt() * b.sqrt();
    let x = 0.5 * (a.ln() - b.ln());
    if (2.0 * x).abs() < DIAGONAL_THRESHOLD {
        let x2 = x * x;
        m * (1.0 + x2 / 6.0 + x2 * x2 / 120.0)
    } else {
        m * x.sinh() / x
    }
}

/// Partial derivative of the logarithmic mean in its first argument, for
/// positive inputs; the diagonal limit is 1/2.
fn dtheta_log_first(a: f64, b: f64) -> f64 {
    let x = 0.5 * (a.ln() - b.ln());
    if (2.0 * x).abs() < DIAGONAL_THRESHOLD {
        0.5 - x / 3.0 + x * x / 6.0
    } else {
        let d = 2.0 * x;
        (d - (1.0 - b / a)) / (d * d)
    }
}

/// A mobility together with the potential tables it evaluates against.
#[derive(Debug, Clone)]
pub enum Mobility {
    /// `theta = e^{-W(x)}`, independent of the masses and of the node order.
    MassIndependent {
        /// Table of `e^{-W}` per grid cell.
        exp_neg_w: DVector<f64>,
    },
    /// `theta = theta_log(s e^{V(x,g)}, t e^{V(x,g')})`.
    LogMeanScaled {
        /// Potential values `V(x, g)`.
        v: DMatrix<f64>,
        /// Table of `e^{V(x, g)}`.
        exp_v: DMatrix<f64>,
    },
}

impl Mobility {
    /// Mass-independent mobility drawing `W` from a potential pair.
    pub fn mass_independent(pot: &PotentialPair) -> Self {
        Mobility::MassIndependent {
            exp_neg_w: pot.exp_neg_w().clone(),
        }
    }

    /// Log-mean mobility drawing `V` from a potential pair.
    pub fn log_mean_scaled(pot: &PotentialPair) -> Self {
        Mobility::LogMeanScaled {
            v: pot.v().values().clone(),
            exp_v: pot.exp_v().clone(),
        }
    }

    /// Builds the kind selected by `kind` from a potential pair.
    pub fn of_kind(kind: MobilityKind, pot: &PotentialPair) -> Self {
        match kind {
            MobilityKind::MassIndependent => Self::mass_independent(pot),
            MobilityKind::LogMean => Self::log_mean_scaled(pot),
        }
    }

    /// This mobility's kind.
    pub fn kind(&self) -> MobilityKind {
        match self {
            Mobility::MassIndependent { .. } => MobilityKind::MassIndependent,
            Mobility::LogMeanScaled { .. } => MobilityKind::LogMean,
        }
    }

    /// Whether the mobility ignores the mass arguments.
    pub fn is_mass_independent(&self) -> bool {
        matches!(self, Mobility::MassIndependent { .. })
    }

    /// Mobility value at grid cell `i` for the node pair `(g, g')` and
    /// masses `(s, t)`.
    pub fn theta_eval(&self, i: usize, g: usize, gp: usize, s: f64, t: f64) -> f64 {
        match self {
            Mobility::MassIndependent { exp_neg_w } => exp_neg_w[i],
            Mobility::LogMeanScaled { exp_v, .. } => {
                theta_log_nonneg(s * exp_v[(i, g)], t * exp_v[(i, gp)])
            }
        }
    }

    /// Partial derivative of the mobility in the first mass argument.
    ///
    /// Zero for the mass-independent kind; for the log-mean kind requires
    /// positive masses (the derivative blows down at zero mass).
    pub fn dtheta1(&self, i: usize, g: usize, gp: usize, s: f64, t: f64) -> Result<f64> {
        match self {
            Mobility::MassIndependent { .. } => Ok(0.0),
            Mobility::LogMeanScaled { exp_v, .. } => {
                if s <= 0.0 || t <= 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "log-mean derivative needs positive masses, got ({s}, {t})"
                    )));
                }
                let ev = exp_v[(i, g)];
                Ok(dtheta_log_first(s * ev, t * exp_v[(i, gp)]) * ev)
            }
        }
    }

    /// The normalization integral
    /// `C = integral_0^1 theta(1-t, t)^{-1/2} dt` for the cell/pair context,
    /// by composite midpoint quadrature with the endpoint singularity
    /// removed through the substitution `t = u^2` (and mirrored at `t = 1`),
    /// 256 panels per half.
    pub fn normalization_integral(&self, i: usize, g: usize, gp: usize) -> f64 {
        let panels = 256usize;
        let umax = 0.5f64.sqrt();
        let du = umax / panels as f64;
        let mut total = 0.0;
        for half in 0..2 {
            let mut acc = 0.0;
            for k in 0..panels {
                let u = (k as f64 + 0.5) * du;
                let t = u * u;
                let (s1, s2) = if half == 0 { (1.0 - t, t) } else { (t, 1.0 - t) };
                let theta = self.theta_eval(i, g, gp, s1, s2);
                acc += 2.0 * u / theta.sqrt() * du;
            }
            total += acc;
        }
        total
    }
}

/// One randomized evaluation context for the assumption checker.
#[derive(Debug, Clone, Copy)]
pub struct MobilitySample {
    /// Grid cell index.
    pub cell: usize,
    /// First node.
    pub g: usize,
    /// Second node.
    pub gp: usize,
    /// First mass.
    pub s: f64,
    /// Second mass.
    pub t: f64,
    /// Positive scaling used by the homogeneity check.
    pub scale: f64,
}

/// Draws a randomized sample set over the given grid/node sizes with masses
/// in `(0, mass_cap]` and scalings in `(0, 4]`.
pub fn sample_set(
    cells: usize,
    nodes: usize,
    count: usize,
    mass_cap: f64,
    rng: &mut impl Rng,
) -> Vec<MobilitySample> {
    (0..count)
        .map(|_| {
            let g = rng.random_range(0..nodes);
            let mut gp = rng.random_range(0..nodes);
            if nodes > 1 {
                while gp == g {
                    gp = rng.random_range(0..nodes);
                }
            }
            MobilitySample {
                cell: rng.random_range(0..cells),
                g,
                gp,
                s: rng.random_range(1e-3..mass_cap),
                t: rng.random_range(1e-3..mass_cap),
                scale: rng.random_range(0.1..4.0),
            }
        })
        .collect()
}

/// Outcome of the structural-assumption checks on a mobility.
#[derive(Debug, Clone)]
pub struct AssumptionReport {
    /// Kind that was checked.
    pub kind: MobilityKind,
    /// Number of samples examined.
    pub samples: usize,
    /// Worst relative symmetry defect `|theta(s,t) - theta(t,s)|`
    /// (arguments swapped together with the node pair).
    pub symmetry_worst: f64,
    /// Worst relative homogeneity defect `|theta(ls, lt) - l theta(s,t)|`
    /// (log-mean kind only).
    pub homogeneity_worst: Option<f64>,
    /// Worst monotonicity violation (a positive value means theta decreased
    /// when a mass increased; log-mean kind only).
    pub monotonicity_worst: Option<f64>,
    /// Worst dependence of theta on the mass arguments
    /// (mass-independent kind only).
    pub independence_worst: Option<f64>,
    /// Normalization integrals `C` for the sampled contexts.
    pub c_values: Vec<f64>,
    /// Whether all integrals came out finite.
    pub c_finite: bool,
    /// Relative tolerance used for pass/fail.
    pub tol: f64,
    /// Overall verdict.
    pub pass: bool,
}

/// Checks symmetry, homogeneity/monotonicity (log-mean) or mass
/// independence (mass-independent), and finiteness of the normalization
/// integral on a sample set.
pub fn check_assumptions(mob: &Mobility, samples: &[MobilitySample]) -> AssumptionReport {
    let tol = 1e-12;
    let mut symmetry_worst = 0.0f64;
    let mut homogeneity_worst = 0.0f64;
    let mut monotonicity_worst = f64::NEG_INFINITY;
    let mut independence_worst = 0.0f64;
    let mut c_values = Vec::new();
    for (idx, smp) in samples.iter().enumerate() {
        let th = mob.theta_eval(smp.cell, smp.g, smp.gp, smp.s, smp.t);
        let scale = th.abs().max(1.0);
        let swapped = mob.theta_eval(smp.cell, smp.gp, smp.g, smp.t, smp.s);
        symmetry_worst = symmetry_worst.max((th - swapped).abs() / scale);
        match mob {
            Mobility::LogMeanScaled { .. } => {
                let l = smp.scale;
                let scaled = mob.theta_eval(smp.cell, smp.g, smp.gp, l * smp.s, l * smp.t);
                homogeneity_worst =
                    homogeneity_worst.max((scaled - l * th).abs() / (l * scale));
                let bump = 1e-3 * (1.0 + smp.s);
                let up = mob.theta_eval(smp.cell, smp.g, smp.gp, smp.s + bump, smp.t);
                monotonicity_worst = monotonicity_worst.max((th - up) / scale);
                let bump_t = 1e-3 * (1.0 + smp.t);
                let up_t = mob.theta_eval(smp.cell, smp.g, smp.gp, smp.s, smp.t + bump_t);
                monotonicity_worst = monotonicity_worst.max((th - up_t) / scale);
            }
            Mobility::MassIndependent { .. } => {
                let other = mob.theta_eval(
                    smp.cell,
                    smp.g,
                    smp.gp,
                    smp.s * smp.scale,
                    smp.t * (1.0 + smp.scale),
                );
                independence_worst = independence_worst.max((th - other).abs() / scale);
            }
        }
        if idx < 16 {
            c_values.push(mob.normalization_integral(smp.cell, smp.g, smp.gp));
        }
    }
    let c_finite = c_values.iter().all(|c| c.is_finite() && *c > 0.0);
    let is_log = !mob.is_mass_independent();
    let pass = symmetry_worst <= tol
        && c_finite
        && if is_log {
            homogeneity_worst <= tol && monotonicity_worst <= tol
        } else {
            independence_worst <= tol
        };
    AssumptionReport {
        kind: mob.kind(),
        samples: samples.len(),
        symmetry_worst,
        homogeneity_worst: is_log.then_some(homogeneity_worst),
        monotonicity_worst: is_log.then_some(if monotonicity_worst == f64::NEG_INFINITY {
            0.0
        } else {
            monotonicity_worst
        }),
        independence_worst: (!is_log).then_some(independence_worst),
        c_values,
        c_finite,
        tol,
        pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{GridDomain, SemiDiscreteField};

    fn pot() -> PotentialPair {
        let d = GridDomain::new(1, 1.0, 9).unwrap();
        let v = SemiDiscreteField::from_fn(d, 2, |x, g| 0.3 * x[0] + 0.2 * g as f64).unwrap();
        PotentialPair::with_zero_weight(v).unwrap()
    }

    #[test]
    fn theta_log_rejects_negative_input() {
        assert!(theta_log(-1.0, 1.0).is_err());
        assert!(theta_log(1.0, -1.0).is_err());
    }

    #[test]
    fn theta_log_diagonal_and_zero() {
        assert_eq!(theta_log(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(theta_log(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(theta_log(3.0, 0.0).unwrap(), 0.0);
        assert!((theta_log(2.0, 2.0).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn series_branch_joins_smoothly() {
        // Values straddling the threshold agree to near machine precision.
        let a = 1.0;
        for eps in [0.5e-6, 0.9e-6, 1.1e-6, 2e-6] {
            let b = a * (1.0 + eps);
            let th = theta_log(a, b).unwrap();
            let mid = 0.5 * (a + b);
            assert!(
                (th - mid).abs() < 1e-12 * mid,
                "eps = {eps}: {th} vs {mid}"
            );
        }
    }

    #[test]
    fn product_identity_is_tight() {
        for (a, b) in [(1.0, 2.0), (0.3, 7.0), (1.0, 1.0 + 1e-9), (5.0, 5.0)] {
            let th = theta_log(a, b).unwrap();
            let d: f64 = a.ln() - b.ln();
            let lhs = th * d;
            assert!(
                (lhs - (a - b)).abs() <= 1e-14 * (a + b),
                "({a}, {b}): {lhs} vs {}",
                a - b
            );
        }
    }

    #[test]
    fn mass_independent_ignores_masses() {
        let p = pot();
        let mob = Mobility::mass_independent(&p);
        let a = mob.theta_eval(3, 0, 1, 0.1, 0.2);
        let b = mob.theta_eval(3, 0, 1, 5.0, 7.0);
        assert_eq!(a, b);
        assert_eq!(mob.dtheta1(3, 0, 1, 0.1, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn dtheta1_diagonal_limit_is_half_scaled() {
        let p = pot();
        let mob = Mobility::log_mean_scaled(&p);
        // Masses chosen so the scaled arguments coincide: s e^{V_g} = t e^{V_g'}.
        let (i, g, gp) = (2, 0, 1);
        let ev_g = p.exp_v()[(i, g)];
        let ev_gp = p.exp_v()[(i, gp)];
        let s = 1.0;
        let t = s * ev_g / ev_gp;
        let d = mob.dtheta1(i, g, gp, s, t).unwrap();
        assert!((d - 0.5 * ev_g).abs() < 1e-9, "d = {d}");
    }

    #[test]
    fn dtheta1_rejects_zero_mass_for_log_mean() {
        let p = pot();
        let mob = Mobility::log_mean_scaled(&p);
        assert!(mob.dtheta1(0, 0, 1, 0.0, 1.0).is_err());
    }

    #[test]
    fn normalization_integral_constant_mobility_exact() {
        // With W = 0 the integrand is 1, so C = 1 and the midpoint rule on
        // the substituted integrand (linear in u) is exact.
        let p = pot();
        let mob = Mobility::mass_independent(&p);
        let c = mob.normalization_integral(0, 0, 1);
        assert!((c - 1.0).abs() < 1e-13, "C = {c}");
    }
}
