//! Minimizing-movement iteration for the relative entropy under the
//! static transport cost.
//!
//! A step of size `tau` from `mu` returns the minimizer `sigma` of
//! `entropy(sigma) + cost(mu, sigma)` together with the optimal admissible
//! pair. The minimization reuses the static solver's reduction to per-node
//! intermediate marginals: given the marginals, the optimal plans are the
//! one-dimensional monotone couplings, and the target density is
//! eliminated through the continuity relation, leaving a strictly convex
//! problem in the exchange potentials that a damped Newton iteration
//! solves exactly per cell.
//!
//! The transport part is handled in prefix (quantile) coordinates of the
//! per-node marginals, where the monotone-coupling cost splits into a sum
//! of one-variable convex piecewise-linear functions, one per prefix. An
//! accelerated proximal-gradient loop then treats that part through its
//! exact proximal map (a pool-adjacent-violators pass, since the prefixes
//! must stay ordered), which lands on the kinks of the cost exactly
//! instead of stalling against them; a finishing stage alternates exact
//! proximal-gradient sweeps with Newton steps on the prefixes that sit
//! strictly between kinks, using the exact curvature of the
//! exchange-reduced entropy, so the returned step carries a fixed-point
//! stationarity certificate at full accuracy. Because the exchange block
//! is minimized out at every iterate, the exchange stationarity identity
//! `h = grad_g(log sigma + V)` holds to the inner solver tolerance
//! independent of the outer loop.
//!
//! [`jko_run`] iterates steps (the recorded times are the step multiples,
//! matching the piecewise-constant interpolation read at those times), and
//! [`compare_to_pde`] measures the distance to a finely resolved
//! reaction-diffusion reference on a shared grid.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::domain::{
    barrier_check, entropy, entropy_of_field, spatial_gradient, BarrierReport,
    SemiDiscreteDensity, SemiDiscreteField,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mobility::Mobility;
use crate::pde::{run as pde_run, FlowConfig, Scheme, Trajectory};
use crate::potentials::PotentialPair;
use crate::statics::{
    check_problem_shapes, cost_of_pair, feasibility_residual, monotone_plan, AdmissiblePair,
    ExchangeField, PlanTermWeight, StaticOptions, TransportPlanSet, MAX_SOLVER_CELLS,
};

/// Exclusive upper bound on admissible step sizes; positivity of the
/// transported mass is only guaranteed below one half.
pub const MAX_TAU: f64 = 0.5;

/// Parameters of the minimizing-movement iteration.
#[derive(Debug, Clone)]
pub struct JkoConfig {
    /// Step size, in `(0, MAX_TAU)`.
    pub tau: f64,
    /// Number of steps taken by [`jko_run`].
    pub steps: usize,
    /// Solver controls, shared with the static solver. The plan-term
    /// weight must be the single-counting default: the per-node weighting
    /// changes the optimality system of the step.
    pub options: StaticOptions,
}

impl JkoConfig {
    /// Builds a configuration with default solver controls.
    pub fn new(tau: f64, steps: usize) -> Result<Self> {
        Self::with_options(tau, steps, StaticOptions::default())
    }

    /// Builds a configuration with explicit solver controls.
    pub fn with_options(tau: f64, steps: usize, options: StaticOptions) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0 && tau < MAX_TAU) {
            return Err(Error::InvalidParameter(format!(
                "movement step size must lie in (0, {MAX_TAU}), got {tau}"
            )));
        }
        Ok(Self {
            tau,
            steps,
            options,
        })
    }
}

/// Optimality and structure diagnostics of a single movement step.
#[derive(Debug, Clone, Serialize)]
pub struct JkoDiagnostics {
    /// Minimized value `entropy(sigma) + cost(mu, sigma)`.
    pub objective: f64,
    /// Static-cost part of the objective.
    pub cost: f64,
    /// Entropy of the step result.
    pub entropy: f64,
    /// One-step inequality margin `entropy(mu) - objective`; nonnegative
    /// because the source is an admissible competitor.
    pub entropy_drop: f64,
    /// Sup norm of `h - grad_g(log sigma + V)` over edges and cells.
    pub exchange_residual: f64,
    /// Sup norm of the barycentric-displacement identity
    /// `(S(x) - x)/tau * sigma - (d_x sigma + sigma d_x V)` over supported
    /// cells.
    pub transport_residual: f64,
    /// Largest positive product between the exchange-induced density
    /// change and the exchange drive; dissipativity makes it nonpositive
    /// up to roundoff.
    pub exchange_direction_defect: f64,
    /// Largest plan-support displacement `|x_j - x_i|` over entries with
    /// mass above 1e-12.
    pub max_displacement: f64,
    /// Certified displacement bound
    /// `sqrt(2) (log Lambda - log lambda) sqrt(tau) + dx` when the source
    /// carries a barrier certificate.
    pub displacement_bound: Option<f64>,
    /// Barrier comparison of the result against the source certificate.
    pub barrier: Option<BarrierReport>,
    /// Admissibility residual of the returned pair.
    pub feasibility: f64,
    /// Outer iterations spent.
    pub iterations: usize,
    /// Whether the outer loop met its stationarity certificate and the
    /// pair meets the feasibility tolerance; a non-certified step still
    /// returns its best iterate.
    pub certified: bool,
}

/// The one-dimensional monotone-coupling cost against a fixed source, in
/// prefix coordinates of the target masses.
///
/// With target prefixes `B_1 <= ... <= B_{n-1}` (the last prefix is
/// pinned to the total) the cost equals `sum_i S_i(B_i) + constant`,
/// where each `S_i` is convex piecewise linear with derivative
/// `(dx_i / tau) (Q(B) - mid_i)`: `Q` is the source quantile function and
/// `mid_i` the midpoint between cells `i` and `i + 1`. The separability
/// makes the exact proximal map available.
struct QuantileCost {
    /// Source prefix masses, strictly increasing; the last is the total.
    prefixes: Vec<f64>,
    /// Cell positions.
    xs: Vec<f64>,
    /// Integral of the quantile function at each prefix.
    quantile_integrals: Vec<f64>,
    /// Per free prefix: slope factor `dx_i / tau`.
    factors: Vec<f64>,
    /// Per free prefix: midpoint `(x_i + x_{i+1}) / 2`.
    mids: Vec<f64>,
    /// Additive constant making the total equal the coupling cost.
    constant: f64,
    /// Total mass.
    total: f64,
}

impl QuantileCost {
    fn new(xs: &[f64], masses: &[f64], tau: f64) -> Self {
        let n = xs.len();
        let mut prefixes = Vec::with_capacity(n);
        let mut quantile_integrals = Vec::with_capacity(n);
        let mut acc = 0.0;
        let mut iq = 0.0;
        for j in 0..n {
            acc += masses[j];
            iq += xs[j] * masses[j];
            prefixes.push(acc);
            quantile_integrals.push(iq);
        }
        let total = acc;
        let free = n.saturating_sub(1);
        let mut factors = Vec::with_capacity(free);
        let mut mids = Vec::with_capacity(free);
        for i in 0..free {
            factors.push((xs[i + 1] - xs[i]) / tau);
            mids.push(0.5 * (xs[i] + xs[i + 1]));
        }
        let last = xs[n - 1];
        let constant = (0..n)
            .map(|j| masses[j] * (xs[j] - last) * (xs[j] - last) / (2.0 * tau))
            .sum();
        Self {
            prefixes,
            xs: xs.to_vec(),
            quantile_integrals,
            factors,
            mids,
            constant,
            total,
        }
    }

    /// Index of the source interval whose quantile applies at prefix mass
    /// `b` (intervals are closed on the right).
    fn interval_of(&self, b: f64) -> usize {
        let pos = self.prefixes.partition_point(|&p| p < b);
        pos.min(self.xs.len() - 1)
    }

    /// Integral of the source quantile function from zero to `b`.
    fn quantile_integral(&self, b: f64) -> f64 {
        let b = b.clamp(0.0, self.total);
        let j = self.interval_of(b);
        let (below, start) = if j == 0 {
            (0.0, 0.0)
        } else {
            (self.quantile_integrals[j - 1], self.prefixes[j - 1])
        };
        below + self.xs[j] * (b - start)
    }

    /// Value of the free-prefix summand `S_i` at `b`.
    fn prefix_value(&self, i: usize, b: f64) -> f64 {
        self.factors[i] * (self.quantile_integral(b) - self.mids[i] * b)
    }

    /// Coupling cost at the given free prefixes.
    fn plan_value(&self, free_prefixes: &[f64]) -> f64 {
        let mut acc = self.constant;
        for (i, &b) in free_prefixes.iter().enumerate() {
            acc += self.prefix_value(i, b);
        }
        acc
    }

    /// Minimizer over `b` of the pooled scalar subproblem
    /// `(count b^2 / 2 - zsum b) / alpha + fsum IQ(b) - osum b` of the
    /// proximal map. The derivative is increasing and piecewise linear
    /// with breaks at the source prefixes, so a forward scan finds the
    /// crossing exactly; when the crossing straddles a break, the break
    /// itself (a kink of the coupling cost) is the minimizer.
    fn pooled_argmin(&self, zsum: f64, count: f64, fsum: f64, osum: f64, alpha: f64) -> f64 {
        let n = self.xs.len();
        for j in 0..n {
            let candidate = (zsum + alpha * (osum - fsum * self.xs[j])) / count;
            let lo = if j == 0 {
                f64::NEG_INFINITY
            } else {
                self.prefixes[j - 1]
            };
            if candidate <= lo {
                return lo;
            }
            let hi = if j + 1 == n {
                f64::INFINITY
            } else {
                self.prefixes[j]
            };
            if candidate <= hi {
                return candidate;
            }
        }
        self.total
    }

    /// Exact proximal map
    /// `argmin_B sum_i [(B_i - z_i)^2 / (2 alpha) + S_i(B_i)]` over
    /// ordered prefixes in `[0, total]`, by pool-adjacent-violators with
    /// exact pooled scalar minimizations.
    fn prox(&self, z: &[f64], alpha: f64) -> Vec<f64> {
        struct Pool {
            zsum: f64,
            count: f64,
            fsum: f64,
            osum: f64,
            len: usize,
            argmin: f64,
        }
        let mut pools: Vec<Pool> = Vec::with_capacity(z.len());
        for (i, &zi) in z.iter().enumerate() {
            let f = self.factors[i];
            let mut pool = Pool {
                zsum: zi,
                count: 1.0,
                fsum: f,
                osum: f * self.mids[i],
                len: 1,
                argmin: 0.0,
            };
            pool.argmin = self.pooled_argmin(pool.zsum, pool.count, pool.fsum, pool.osum, alpha);
            pools.push(pool);
            while pools.len() >= 2 {
                let last = pools.len() - 1;
                if pools[last - 1].argmin <= pools[last].argmin {
                    break;
                }
                let top = pools.pop().expect("nonempty stack");
                let prev = pools.last_mut().expect("nonempty stack");
                prev.zsum += top.zsum;
                prev.count += top.count;
                prev.fsum += top.fsum;
                prev.osum += top.osum;
                prev.len += top.len;
                prev.argmin =
                    self.pooled_argmin(prev.zsum, prev.count, prev.fsum, prev.osum, alpha);
            }
        }
        let mut out = Vec::with_capacity(z.len());
        for pool in &pools {
            let value = pool.argmin.clamp(0.0, self.total);
            for _ in 0..pool.len {
                out.push(value);
            }
        }
        out
    }
}

/// Solves `lap y = rhs` for zero-mean `rhs` through the rank-one-shifted
/// Cholesky factorization (the shift is invisible on zero-mean data).
fn solve_on_zero_mean(lap: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let k = lap.nrows();
    let shift = DMatrix::from_element(k, k, 1.0 / k as f64);
    let chol = (lap + shift).cholesky()?;
    Some(chol.solve(rhs))
}

/// Outcome of the accelerated proximal-gradient loop.
struct ProxOutcome {
    x: DMatrix<f64>,
    iterations: usize,
}

/// One backtracked proximal-gradient step from `base`: halves `step`
/// until the candidate lies in the domain of the smooth part and
/// satisfies its quadratic upper model, then returns the candidate with
/// its smooth value and gradient.
fn prox_backtrack(
    base: &DMatrix<f64>,
    gbase: f64,
    dgbase: &DMatrix<f64>,
    step: &mut f64,
    prox: &impl Fn(&DMatrix<f64>, f64) -> DMatrix<f64>,
    smooth: &impl Fn(&DMatrix<f64>) -> Option<(f64, DMatrix<f64>)>,
) -> Option<(DMatrix<f64>, f64, DMatrix<f64>)> {
    loop {
        let cand = prox(&(base - dgbase * *step), *step);
        if let Some((gc, dgc)) = smooth(&cand) {
            let diff = &cand - base;
            let model = gbase + dgbase.dot(&diff) + diff.norm_squared() / (2.0 * *step);
            if gc <= model + 1e-12 * (1.0 + gc.abs()) {
                return Some((cand, gc, dgc));
            }
        }
        *step *= 0.5;
        if *step < 1e-16 {
            return None;
        }
    }
}

/// Accelerated proximal-gradient minimization of `smooth + separable`,
/// where `prox` is the exact proximal map of the separable part (plus the
/// feasible-set indicator) and `smooth` returns `None` outside the domain
/// of the smooth part. Monotone (restarting) variant with backtracking on
/// the smooth upper model; a bounded iteration budget localizes the
/// active kinks, after which the Newton finishing stage takes over.
fn accelerated_prox_minimize(
    start: DMatrix<f64>,
    prox: &impl Fn(&DMatrix<f64>, f64) -> DMatrix<f64>,
    smooth: &impl Fn(&DMatrix<f64>) -> Option<(f64, DMatrix<f64>)>,
    separable: &impl Fn(&DMatrix<f64>) -> f64,
    opts: &StaticOptions,
) -> ProxOutcome {
    let mut x = start;
    let (mut gx, mut dgx) = match smooth(&x) {
        Some(pair) => pair,
        None => return ProxOutcome { x, iterations: 0 },
    };
    let mut fx = gx + separable(&x);
    let mut x_prev = x.clone();
    let mut momentum = 1.0f64;
    let mut step = 1.0f64;
    let mut stall = 0usize;
    let mut iterations = 0usize;

    for iter in 0..opts.max_iterations.min(1000) {
        iterations = iter + 1;
        let step_before = step;
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let beta = (momentum - 1.0) / next_momentum;
        let v = &x + (&x - &x_prev) * beta;
        let accelerated = match smooth(&v) {
            Some((gv, dgv)) => prox_backtrack(&v, gv, &dgv, &mut step, prox, smooth).and_then(
                |(cand, gc, dgc)| {
                    let f_cand = gc + separable(&cand);
                    if f_cand <= fx {
                        Some((cand, f_cand, gc, dgc))
                    } else {
                        None
                    }
                },
            ),
            None => None,
        };
        let accepted = match accelerated {
            Some(tuple) => {
                momentum = next_momentum;
                Some(tuple)
            }
            None => {
                // Restart: plain proximal step from the incumbent.
                momentum = 1.0;
                prox_backtrack(&x, gx, &dgx, &mut step, prox, smooth).and_then(
                    |(cand, gc, dgc)| {
                        let f_cand = gc + separable(&cand);
                        if f_cand <= fx + 1e-12 * (1.0 + fx.abs()) {
                            Some((cand, f_cand, gc, dgc))
                        } else {
                            None
                        }
                    },
                )
            }
        };
        let Some((cand, f_cand, g_cand, dg_cand)) = accepted else {
            stall += 1;
            step *= 0.5;
            if step < 1e-16 || stall >= 30 {
                break;
            }
            continue;
        };
        let drop = fx - f_cand;
        let moved = (&cand - &x).amax();
        x_prev = std::mem::replace(&mut x, cand);
        fx = f_cand;
        gx = g_cand;
        dgx = dg_cand;
        if drop <= opts.objective_tolerance * (1.0 + fx.abs())
            && moved <= 1e-12 * (1.0 + x.amax())
        {
            stall += 1;
        } else {
            stall = 0;
        }
        if step >= step_before {
            step *= 1.2;
        }
        if stall >= 30 {
            break;
        }
    }

    ProxOutcome { x, iterations }
}

/// Result of the exchange-reduced evaluation at fixed marginals: value
/// and gradient of the smooth part, the induced density, and the
/// minimizing exchange potentials.
struct Inner {
    value: f64,
    grad: DMatrix<f64>,
    sigma: DMatrix<f64>,
    y: DMatrix<f64>,
}

/// Read-only problem data shared by the outer solver stages.
struct StepContext<'a> {
    n: usize,
    m: usize,
    tau: f64,
    weights: &'a DVector<f64>,
    e_w: &'a DVector<f64>,
    components: &'a [Vec<usize>],
    comp_laps: &'a [DMatrix<f64>],
    qcosts: &'a [QuantileCost],
}

/// Gradient of the smooth part with respect to the free prefixes: raising
/// prefix `i` moves mass from cell `i + 1` into cell `i`.
fn prefix_grad(grad_nu: &DMatrix<f64>, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n - 1, m, |i, g| grad_nu[(i, g)] - grad_nu[(i + 1, g)])
}

/// Second derivative of the exchange-reduced smooth part with respect to
/// the per-node masses of one cell (the Schur complement of the exchange
/// block), an `m x m` positive-definite matrix coupling the nodes of
/// each graph component.
fn cell_mass_hessian(ctx: &StepContext, cell: usize, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let m = ctx.m;
    let cw = ctx.weights[cell];
    let e = ctx.e_w[cell];
    let mut d = DMatrix::<f64>::zeros(m, m);
    for (ci, comp) in ctx.components.iter().enumerate() {
        let k = comp.len();
        if k == 1 {
            let g = comp[0];
            d[(g, g)] = 1.0 / (cw * sigma[(cell, g)]);
            continue;
        }
        let lap = &ctx.comp_laps[ci];
        let s: Vec<f64> = comp.iter().map(|&g| sigma[(cell, g)]).collect();
        let dinv = DMatrix::from_diagonal(&DVector::from_fn(k, |c, _| 1.0 / s[c]));
        let q = &dinv * lap;
        let hy = lap + (lap * &dinv * lap) * (ctx.tau * e);
        let shift = DMatrix::from_element(k, k, 1.0 / k as f64);
        let block = match (hy + shift).cholesky() {
            Some(chol) => {
                let solved = chol.solve(&q.transpose());
                let reduced = (&dinv - (&q * solved) * (ctx.tau * e)) / cw;
                (&reduced + reduced.transpose()) * 0.5
            }
            // The decoupled curvature is a valid positive fallback.
            None => dinv / cw,
        };
        for (a, &ga) in comp.iter().enumerate() {
            for (b, &gb) in comp.iter().enumerate() {
                d[(ga, gb)] = block[(a, b)];
            }
        }
    }
    d
}

/// High-accuracy finishing stage: alternates exact backtracked
/// proximal-gradient sweeps (which place prefixes on kinks of the
/// coupling cost exactly and release them when beneficial) with damped
/// Newton steps over the prefixes that sit strictly between kinks, using
/// the exact reduced curvature. Newton line searches stop exactly at the
/// first kink they reach, which the next sweep then treats as resting.
/// Returns the refined prefixes and the number of rounds spent.
fn polish_prefixes(
    start: DMatrix<f64>,
    ctx: &StepContext,
    prox: &impl Fn(&DMatrix<f64>, f64) -> DMatrix<f64>,
    eval: &impl Fn(&DMatrix<f64>) -> Option<Inner>,
    separable: &impl Fn(&DMatrix<f64>) -> f64,
) -> (DMatrix<f64>, usize) {
    let n = ctx.n;
    let m = ctx.m;
    let free_rows = n - 1;
    let smooth = |x: &DMatrix<f64>| -> Option<(f64, DMatrix<f64>)> {
        eval(x).map(|inner| (inner.value, prefix_grad(&inner.grad, n, m)))
    };
    let mut b = start;
    let mut step = 1.0f64;
    let mut stall = 0usize;
    let mut rounds = 0usize;
    for round in 0..60 {
        rounds = round + 1;
        let Some(inner) = eval(&b) else { break };
        let grad_b = prefix_grad(&inner.grad, n, m);
        let fx = inner.value + separable(&b);
        let step_before = step;
        let Some((b1, g1, dg1)) = prox_backtrack(&b, inner.value, &grad_b, &mut step, prox, &smooth)
        else {
            break;
        };
        let moved = (&b1 - &b).amax();
        let mut best = b1;
        let mut fbest = g1 + separable(&best);
        let _ = &dg1;

        // Newton refinement over the strictly-between-kinks prefixes.
        if let Some(inn1) = eval(&best) {
            let grad1 = prefix_grad(&inn1.grad, n, m);
            // Classify each prefix: resting on a kink (or box edge) or
            // free inside a source interval with a definite slope.
            let mut free: Vec<(usize, usize)> = Vec::new();
            let mut slope = DMatrix::<f64>::zeros(free_rows, m);
            let mut seg_lo = DMatrix::<f64>::zeros(free_rows, m);
            let mut seg_hi = DMatrix::<f64>::zeros(free_rows, m);
            for g in 0..m {
                let qc = &ctx.qcosts[g];
                let atol = 1e-13 * (1.0 + qc.total);
                for i in 0..free_rows {
                    let val = best[(i, g)];
                    if val <= atol || val >= qc.total - atol {
                        continue;
                    }
                    let pos = qc.prefixes.partition_point(|&p| p < val - atol);
                    if pos < qc.prefixes.len() && (qc.prefixes[pos] - val).abs() <= atol {
                        continue;
                    }
                    let piece = qc.interval_of(val);
                    slope[(i, g)] = qc.factors[i] * (qc.xs[piece] - qc.mids[i]);
                    seg_lo[(i, g)] = if piece == 0 { 0.0 } else { qc.prefixes[piece - 1] };
                    seg_hi[(i, g)] = qc.prefixes[piece];
                    free.push((i, g));
                }
            }
            if !free.is_empty() {
                let f_count = free.len();
                let residual = DVector::from_fn(f_count, |a, _| {
                    let (i, g) = free[a];
                    grad1[(i, g)] + slope[(i, g)]
                });
                let d_cells: Vec<DMatrix<f64>> = (0..n)
                    .map(|cell| cell_mass_hessian(ctx, cell, &inn1.sigma))
                    .collect();
                let mut hess = DMatrix::<f64>::zeros(f_count, f_count);
                for a in 0..f_count {
                    let (ia, ga) = free[a];
                    for bcol in 0..f_count {
                        let (ib, gb) = free[bcol];
                        let entry = if ia == ib {
                            d_cells[ia][(ga, gb)] + d_cells[ia + 1][(ga, gb)]
                        } else if ib == ia + 1 {
                            -d_cells[ia + 1][(ga, gb)]
                        } else if ib + 1 == ia {
                            -d_cells[ia][(ga, gb)]
                        } else {
                            0.0
                        };
                        hess[(a, bcol)] = entry;
                    }
                }
                let direction = hess
                    .clone()
                    .cholesky()
                    .map(|c| c.solve(&(-&residual)))
                    .or_else(|| {
                        let ridge = 1e-10 * (1.0 + hess.diagonal().amax());
                        for a in 0..f_count {
                            hess[(a, a)] += ridge;
                        }
                        hess.clone().cholesky().map(|c| c.solve(&(-&residual)))
                    });
                if let Some(delta) = direction {
                    let slope_dir = residual.dot(&delta);
                    if slope_dir < 0.0 {
                        // Longest move keeping every free prefix inside
                        // its current source interval and the prefixes
                        // ordered (fixed prefixes do not move).
                        let mut t_max = 1.0f64;
                        let mut dmat = DMatrix::<f64>::zeros(free_rows, m);
                        for (a, &(i, g)) in free.iter().enumerate() {
                            dmat[(i, g)] = delta[a];
                        }
                        for (a, &(i, g)) in free.iter().enumerate() {
                            let d = delta[a];
                            if d > 0.0 {
                                t_max = t_max.min((seg_hi[(i, g)] - best[(i, g)]) / d);
                            } else if d < 0.0 {
                                t_max = t_max.min((seg_lo[(i, g)] - best[(i, g)]) / d);
                            }
                        }
                        for g in 0..m {
                            for i in 0..free_rows.saturating_sub(1) {
                                let gap = best[(i + 1, g)] - best[(i, g)];
                                let closing = dmat[(i, g)] - dmat[(i + 1, g)];
                                if closing > 0.0 {
                                    t_max = t_max.min(gap / closing);
                                }
                            }
                        }
                        if t_max > 1e-14 {
                            let mut t = t_max.min(1.0);
                            for _ in 0..25 {
                                let cand = &best + &dmat * t;
                                if let Some(inn2) = eval(&cand) {
                                    let f2 = inn2.value + separable(&cand);
                                    if f2 <= fbest + 1e-4 * t * slope_dir {
                                        best = cand;
                                        fbest = f2;
                                        break;
                                    }
                                }
                                t *= 0.5;
                            }
                        }
                    }
                }
            }
        }

        let progress = fx - fbest;
        b = best;
        if step >= step_before {
            step *= 1.2;
        }
        if progress <= 1e-15 * (1.0 + fx.abs()) && moved <= 1e-13 * (1.0 + b.amax()) {
            stall += 1;
        } else {
            stall = 0;
        }
        if stall >= 3 {
            break;
        }
    }
    (b, rounds)
}

/// One movement step: returns the minimizing density, the optimal
/// admissible pair realizing the cost, and diagnostics. Requires a
/// one-dimensional grid (the monotone-coupling reduction) and a strictly
/// positive source. Non-convergence is reported through
/// [`JkoDiagnostics::certified`], not as an error.
pub fn jko_step(
    mu: &SemiDiscreteDensity,
    cfg: &JkoConfig,
    pot: &PotentialPair,
    graph: &Graph,
) -> Result<(SemiDiscreteDensity, AdmissiblePair, JkoDiagnostics)> {
    let domain = mu.domain();
    let m = mu.num_nodes();
    check_problem_shapes(domain, m, pot, graph)?;
    if domain.dimension() != 1 {
        return Err(Error::InvalidParameter(
            "the movement scheme supports one-dimensional grids only".into(),
        ));
    }
    let n = domain.num_cells();
    if n > MAX_SOLVER_CELLS {
        return Err(Error::InvalidParameter(format!(
            "the movement step accepts at most {MAX_SOLVER_CELLS} cells, got {n}"
        )));
    }
    if cfg.options.plan_weight != PlanTermWeight::One {
        return Err(Error::Config(
            "the movement step requires the single-counting plan-term weight".into(),
        ));
    }
    if mu.values().iter().any(|&f| f <= 0.0) {
        return Err(Error::InvalidField(
            "the movement step requires a strictly positive source density".into(),
        ));
    }
    let tau = cfg.tau;
    let weights = domain.cell_weights();
    let xs: Vec<f64> = (0..n).map(|i| domain.coords(i)[0]).collect();
    let v_vals = pot.v().values();
    let e_w = pot.exp_neg_w();
    let kernel = graph.kernel();
    let edges: Vec<(usize, usize)> = graph.edges().map(|(a, b, _)| (a, b)).collect();
    let components = graph.connected_components();
    let comp_laps: Vec<DMatrix<f64>> = components
        .iter()
        .map(|comp| {
            let k = comp.len();
            let mut lap = DMatrix::<f64>::zeros(k, k);
            for (p, &g) in comp.iter().enumerate() {
                for (q, &gp) in comp.iter().enumerate() {
                    if p == q {
                        continue;
                    }
                    let kv = kernel[(g, gp)];
                    lap[(p, p)] += kv;
                    lap[(p, q)] -= kv;
                }
            }
            lap
        })
        .collect();

    // Source masses per node and the per-node prefix costs.
    let src: Vec<Vec<f64>> = (0..m)
        .map(|g| (0..n).map(|j| mu.values()[(j, g)] * weights[j]).collect())
        .collect();
    let src_totals: Vec<f64> = src.iter().map(|a| a.iter().sum()).collect();
    let qcosts: Vec<QuantileCost> = (0..m)
        .map(|g| QuantileCost::new(&xs, &src[g], tau))
        .collect();

    // Warm-started exchange potentials per cell.
    let y_cache = RefCell::new(DMatrix::<f64>::zeros(n, m));

    // Smooth part at fixed marginals: the exact partial minimum over
    // exchange potentials of the quadratic exchange term plus the entropy
    // of the induced target. `None` marks marginals whose induced target
    // cannot be positive.
    let exchange_entropy = |nu: &DMatrix<f64>| -> Option<Inner> {
        let mut value = 0.0;
        let mut grad = DMatrix::<f64>::zeros(n, m);
        let mut sigma = DMatrix::<f64>::zeros(n, m);
        let mut y_all = y_cache.borrow_mut();
        for i in 0..n {
            let cw = weights[i];
            let e = e_w[i];
            for (ci, comp) in components.iter().enumerate() {
                let k = comp.len();
                if k == 1 {
                    let g = comp[0];
                    let s = nu[(i, g)] / cw;
                    if s <= 0.0 {
                        return None;
                    }
                    sigma[(i, g)] = s;
                    value += cw * (s * s.ln() + v_vals[(i, g)] * s);
                    grad[(i, g)] += s.ln() + 1.0 + v_vals[(i, g)];
                    continue;
                }
                let lap = &comp_laps[ci];
                let dens: Vec<f64> = comp.iter().map(|&g| nu[(i, g)] / cw).collect();
                let comp_sum: f64 = dens.iter().sum();
                if comp_sum <= 0.0 {
                    return None;
                }
                let sigma_of = |y: &DVector<f64>| -> DVector<f64> {
                    let ly = lap * y;
                    DVector::from_fn(k, |c, _| dens[c] - tau * e * ly[c])
                };
                let gval = |y: &DVector<f64>, s: &DVector<f64>| -> f64 {
                    let quad = y.dot(&(lap * y));
                    let mut ent = 0.0;
                    for c in 0..k {
                        let t = s[c];
                        ent += t * t.ln() + v_vals[(i, comp[c])] * t;
                    }
                    0.5 * tau * cw * e * quad + cw * ent
                };
                let mut y = DVector::from_fn(k, |c, _| y_all[(i, comp[c])]);
                let mean = y.sum() / k as f64;
                y.iter_mut().for_each(|t| *t -= mean);
                let mut s = sigma_of(&y);
                if s.iter().any(|&t| t <= 0.0) {
                    // The uniform-split potentials are always feasible.
                    let target =
                        DVector::from_fn(k, |c, _| (dens[c] - comp_sum / k as f64) / (tau * e));
                    y = solve_on_zero_mean(lap, &target)?;
                    s = sigma_of(&y);
                    if s.iter().any(|&t| t <= 0.0) {
                        return None;
                    }
                }
                let mut gy = gval(&y, &s);
                for _ in 0..60 {
                    let phi = DVector::from_fn(k, |c, _| s[c].ln() + v_vals[(i, comp[c])]);
                    let r = lap * (&y - &phi);
                    let scale_r = 1.0 + (lap * &phi).amax();
                    if r.amax() <= 1e-12 * scale_r {
                        break;
                    }
                    // Hessian over tau cw e: lap + tau e lap diag(1/s) lap.
                    let d_inv = DMatrix::from_diagonal(&DVector::from_fn(k, |c, _| 1.0 / s[c]));
                    let hess = lap + (lap * d_inv * lap) * (tau * e);
                    let dir = solve_on_zero_mean(&hess, &(-&r))?;
                    let slope = r.dot(&dir);
                    let mut t_step = 1.0;
                    let mut accepted = false;
                    for _ in 0..60 {
                        let y_new = &y + &dir * t_step;
                        let s_new = sigma_of(&y_new);
                        if s_new.iter().all(|&t| t > 0.0) {
                            let g_new = gval(&y_new, &s_new);
                            if g_new <= gy + 1e-4 * t_step * tau * cw * e * slope {
                                y = y_new;
                                s = s_new;
                                gy = g_new;
                                accepted = true;
                                break;
                            }
                        }
                        t_step *= 0.5;
                    }
                    if !accepted {
                        break;
                    }
                }
                let mean = y.sum() / k as f64;
                y.iter_mut().for_each(|t| *t -= mean);
                let ly = lap * &y;
                for (c, &g) in comp.iter().enumerate() {
                    y_all[(i, g)] = y[c];
                    let t = s[c];
                    sigma[(i, g)] = t;
                    value += 0.5 * tau * cw * e * y[c] * ly[c];
                    value += cw * (t * t.ln() + v_vals[(i, g)] * t);
                    grad[(i, g)] += t.ln() + 1.0 + v_vals[(i, g)];
                }
            }
        }
        let y = y_all.clone();
        Some(Inner {
            value,
            grad,
            sigma,
            y,
        })
    };

    // Marginal masses from free prefixes (column `g` of `b` holds the
    // first `n - 1` prefixes of node `g`).
    let nu_of = |b: &DMatrix<f64>| -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |i, g| {
            let lower = if i == 0 { 0.0 } else { b[(i - 1, g)] };
            let upper = if i + 1 == n { src_totals[g] } else { b[(i, g)] };
            (upper - lower).max(0.0)
        })
    };

    let nu;
    let outer_iterations;
    let outer_converged;
    if n == 1 {
        // A single cell leaves no transport freedom.
        nu = DMatrix::from_fn(1, m, |_, g| src_totals[g]);
        outer_iterations = 0;
        outer_converged = true;
    } else {
        let start = DMatrix::from_fn(n - 1, m, |i, g| qcosts[g].prefixes[i]);
        let prox = |z: &DMatrix<f64>, alpha: f64| -> DMatrix<f64> {
            let mut out = DMatrix::zeros(n - 1, m);
            for g in 0..m {
                let column: Vec<f64> = (0..n - 1).map(|i| z[(i, g)]).collect();
                let solved = qcosts[g].prox(&column, alpha);
                for i in 0..n - 1 {
                    out[(i, g)] = solved[i];
                }
            }
            out
        };
        let eval = |b: &DMatrix<f64>| -> Option<Inner> { exchange_entropy(&nu_of(b)) };
        let smooth = |b: &DMatrix<f64>| -> Option<(f64, DMatrix<f64>)> {
            eval(b).map(|inner| (inner.value, prefix_grad(&inner.grad, n, m)))
        };
        let separable = |b: &DMatrix<f64>| -> f64 {
            (0..m)
                .map(|g| {
                    let column: Vec<f64> = (0..n - 1).map(|i| b[(i, g)]).collect();
                    qcosts[g].plan_value(&column)
                })
                .sum()
        };
        let ctx = StepContext {
            n,
            m,
            tau,
            weights: &weights,
            e_w,
            components: &components,
            comp_laps: &comp_laps,
            qcosts: &qcosts,
        };
        let outcome = accelerated_prox_minimize(start, &prox, &smooth, &separable, &cfg.options);
        let (refined, polish_rounds) =
            polish_prefixes(outcome.x, &ctx, &prox, &eval, &separable);
        // Fixed-point certificate of the proximal-gradient map, which
        // vanishes at the minimizer even when it rests on kinks.
        outer_converged = match smooth(&refined) {
            Some((_, grad_b)) => {
                let fixed = prox(&(&refined - &grad_b), 1.0);
                (&refined - &fixed).amax() <= 1e-7 * (1.0 + grad_b.amax())
            }
            None => false,
        };
        outer_iterations = outcome.iterations + polish_rounds;
        nu = nu_of(&refined);
    }
    let inner = exchange_entropy(&nu).ok_or_else(|| {
        Error::Numerical("the exchange solve failed at the final movement iterate".into())
    })?;

    let sigma = SemiDiscreteDensity::new(SemiDiscreteField::new(domain, inner.sigma.clone())?)?;
    let (sigma, barrier, displacement_bound) = match mu.barrier() {
        Some((lo, hi)) => {
            let report = barrier_check(&sigma, pot, lo, hi)?;
            let bound = 2.0f64.sqrt() * (hi.ln() - lo.ln()) * tau.sqrt() + domain.spacing();
            let sigma = if report.pass {
                sigma.with_barrier(lo, hi)?
            } else {
                sigma
            };
            (sigma, Some(report), Some(bound))
        }
        None => (sigma, None, None),
    };

    // Assemble the optimal pair from the final marginals and potentials.
    let plans: Vec<DMatrix<f64>> = (0..m)
        .map(|g| {
            let total: f64 = nu.column(g).sum();
            let scale = if total > 0.0 { src_totals[g] / total } else { 1.0 };
            let a = DVector::from_fn(n, |j, _| src[g][j]);
            let b = DVector::from_fn(n, |i, _| nu[(i, g)] * scale);
            monotone_plan(&a, &b)
        })
        .collect();
    let mut h = DMatrix::<f64>::zeros(n, edges.len());
    for (e_idx, &(a, b)) in edges.iter().enumerate() {
        for i in 0..n {
            h[(i, e_idx)] = inner.y[(i, a)] - inner.y[(i, b)];
        }
    }
    let pair = AdmissiblePair::new(
        TransportPlanSet::new(domain, plans)?,
        ExchangeField::new(domain, graph, h)?,
    )?;

    let cost = cost_of_pair(&pair, tau, pot, graph, PlanTermWeight::One)?;
    let feasibility = feasibility_residual(&pair, mu, &sigma, tau, pot, graph)?;
    let entropy_sigma = entropy_of_field(&inner.sigma, pot, &weights);
    let entropy_mu = entropy(mu, pot)?;
    let objective = cost + entropy_sigma;
    let entropy_drop = entropy_mu - objective;
    if entropy_drop < -1e-8 * (1.0 + entropy_mu.abs()) {
        return Err(Error::Numerical(format!(
            "one-step inequality violated: objective {objective} exceeds the \
             source entropy {entropy_mu}"
        )));
    }

    // Stationarity residuals and structure diagnostics.
    let phi = DMatrix::from_fn(n, m, |i, g| inner.sigma[(i, g)].ln() + v_vals[(i, g)]);
    let mut exchange_residual = 0.0f64;
    for (e_idx, &(a, b)) in edges.iter().enumerate() {
        for i in 0..n {
            let r = pair.exchange.values()[(i, e_idx)] - (phi[(i, a)] - phi[(i, b)]);
            exchange_residual = exchange_residual.max(r.abs());
        }
    }
    let grad_sigma = spatial_gradient(sigma.field(), 0);
    let gv = pot.grad_v(0);
    let mut transport_residual = 0.0f64;
    let mut max_displacement = 0.0f64;
    for g in 0..m {
        let plan = pair.plans.plan(g);
        for i in 0..n {
            let colmass: f64 = plan.column(i).sum();
            for j in 0..n {
                if plan[(j, i)] > 1e-12 {
                    max_displacement = max_displacement.max((xs[j] - xs[i]).abs());
                }
            }
            if colmass <= 1e-12 {
                continue;
            }
            let bary = (0..n).map(|j| xs[j] * plan[(j, i)]).sum::<f64>() / colmass;
            let r = (bary - xs[i]) / tau * inner.sigma[(i, g)]
                - (grad_sigma[(i, g)] + inner.sigma[(i, g)] * gv[(i, g)]);
            transport_residual = transport_residual.max(r.abs());
        }
    }
    let mut exchange_direction_defect = 0.0f64;
    for comp in components.iter() {
        if comp.len() < 2 {
            continue;
        }
        for i in 0..n {
            for &g in comp {
                let drive: f64 = comp
                    .iter()
                    .map(|&gp| kernel[(g, gp)] * (phi[(i, g)] - phi[(i, gp)]))
                    .sum::<f64>()
                    * e_w[i];
                let change = inner.sigma[(i, g)] - nu[(i, g)] / weights[i];
                exchange_direction_defect = exchange_direction_defect.max(change * drive);
            }
        }
    }

    let certified = outer_converged && feasibility <= cfg.options.feasibility_tolerance;
    let diagnostics = JkoDiagnostics {
        objective,
        cost,
        entropy: entropy_sigma,
        entropy_drop,
        exchange_residual,
        transport_residual,
        exchange_direction_defect,
        max_displacement,
        displacement_bound,
        barrier,
        feasibility,
        iterations: outer_iterations,
        certified,
    };
    Ok((sigma, pair, diagnostics))
}

/// A movement-scheme trajectory with per-step diagnostics.
#[derive(Debug, Clone)]
pub struct JkoRun {
    /// Iterates at the step multiples (the piecewise-constant
    /// interpolation read at those times), with energies and barrier
    /// reports.
    pub trajectory: Trajectory,
    /// Step diagnostics, one entry per step.
    pub diagnostics: Vec<JkoDiagnostics>,
}

/// Iterates [`jko_step`] from `f0`; the entropy never increases along the
/// recorded sequence and barrier certificates are carried forward
/// whenever they keep holding.
pub fn jko_run(
    f0: &SemiDiscreteDensity,
    cfg: &JkoConfig,
    pot: &PotentialPair,
    graph: &Graph,
) -> Result<JkoRun> {
    let initial_barrier = match f0.barrier() {
        Some((lo, hi)) => Some(barrier_check(f0, pot, lo, hi)?),
        None => None,
    };
    let mut trajectory = Trajectory {
        times: vec![0.0],
        densities: vec![f0.clone()],
        energies: vec![entropy(f0, pot)?],
        barriers: vec![initial_barrier],
    };
    let mut diagnostics = Vec::with_capacity(cfg.steps);
    let mut current = f0.clone();
    for step_index in 0..cfg.steps {
        let (next, _pair, diag) = jko_step(&current, cfg, pot, graph)?;
        trajectory.times.push((step_index + 1) as f64 * cfg.tau);
        trajectory.energies.push(diag.entropy);
        trajectory.barriers.push(diag.barrier.clone());
        trajectory.densities.push(next.clone());
        diagnostics.push(diag);
        current = next;
    }
    Ok(JkoRun {
        trajectory,
        diagnostics,
    })
}

/// One row of the scheme-versus-flow error table.
#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    /// Step size of this run.
    pub tau: f64,
    /// Sup over the recorded step multiples of the weighted grid L2
    /// distance to the reference flow.
    pub sup_l2_error: f64,
    /// Error ratio of the previous (coarser) row to this one; absent on
    /// the first row.
    pub ratio: Option<f64>,
}

/// Runs the movement scheme at each step size in `tau_list` up to
/// `t_final` and measures the sup-in-time weighted L2 distance to an
/// explicit-scheme reference computed at a step near `ref_dt` (reduced so
/// it divides each `tau` exactly and respects the stability bound). The
/// mobility is the mass-independent one, matching the scheme's scope.
pub fn compare_to_pde(
    f0: &SemiDiscreteDensity,
    tau_list: &[f64],
    t_final: f64,
    pot: &PotentialPair,
    graph: &Graph,
    ref_dt: f64,
    options: &StaticOptions,
) -> Result<Vec<CompareRow>> {
    if tau_list.is_empty() {
        return Err(Error::Config(
            "the comparison needs at least one step size".into(),
        ));
    }
    if !(t_final.is_finite() && t_final > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "comparison horizon must be positive, got {t_final}"
        )));
    }
    if !(ref_dt.is_finite() && ref_dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "reference step must be positive, got {ref_dt}"
        )));
    }
    let weights = f0.domain().cell_weights();
    let mobility = Mobility::mass_independent(pot);
    let cfl = FlowConfig::explicit_cfl_bound(f0.domain(), pot);
    let cap = ref_dt.min(0.999 * cfl);
    let mut rows: Vec<CompareRow> = Vec::with_capacity(tau_list.len());
    let mut previous: Option<f64> = None;
    for &tau in tau_list {
        let steps_exact = t_final / tau;
        let steps = steps_exact.round() as usize;
        if steps == 0 || (steps_exact - steps as f64).abs() > 1e-9 * steps_exact.max(1.0) {
            return Err(Error::Config(format!(
                "step size {tau} does not divide the horizon {t_final}"
            )));
        }
        let cfg = JkoConfig::with_options(tau, steps, options.clone())?;
        let scheme_run = jko_run(f0, &cfg, pot, graph)?;
        let sub = (tau / cap).ceil().max(1.0) as usize;
        let dt = tau / sub as f64;
        let flow_cfg = FlowConfig::new(
            f0.domain(),
            pot,
            Some(dt),
            t_final,
            Scheme::Explicit,
            sub,
        )?;
        let reference = pde_run(f0, &flow_cfg, pot, graph, &mobility)?;
        let mut sup = 0.0f64;
        for k in 1..=steps {
            let t = k as f64 * tau;
            if (reference.times[k] - t).abs() > 1e-9 * t.max(1.0) {
                return Err(Error::Numerical(format!(
                    "reference recording misaligned: expected time {t}, got {}",
                    reference.times[k]
                )));
            }
            let a = scheme_run.trajectory.densities[k].values();
            let b = reference.densities[k].values();
            let mut acc = 0.0;
            for g in 0..a.ncols() {
                for i in 0..a.nrows() {
                    let d = a[(i, g)] - b[(i, g)];
                    acc += d * d * weights[i];
                }
            }
            sup = sup.max(acc.sqrt());
        }
        rows.push(CompareRow {
            tau,
            sup_l2_error: sup,
            ratio: previous.map(|p| p / sup),
        });
        previous = Some(sup);
    }
    Ok(rows)
}
