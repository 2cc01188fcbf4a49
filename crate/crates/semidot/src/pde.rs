//! Time integration of the entropy gradient flow on the product space.
//!
//! The evolution combines, per graph node, drift-diffusion in the box with
//! mass exchange along graph edges:
//!
//! ```text
//! df/dt = div_x(grad f + f grad V)  -  sum_{g'} [phi(g) - phi(g')] K theta,
//! phi   = log f + V.
//! ```
//!
//! **Spatial part.** The divergence is discretized in flux form through the
//! change of variables `u = f e^{V}`: the face flux along an axis is
//! `F = area * 0.5 (e^{-V_i} + e^{-V_{i+1}}) * (u_{i+1} - u_i) / dx`, zero
//! at boundary faces, and the cell update divides the flux difference by
//! the cell's quadrature weight. This form is second-order consistent with
//! `div_x(grad f + f grad V)`, telescopes to exact mass conservation,
//! satisfies a discrete maximum principle for `u` (which is exactly the
//! barrier quantity `f e^{V}`), and vanishes identically on the equilibrium
//! `f = c e^{-V}` — so the equilibrium is stationary to roundoff rather
//! than to truncation order.
//!
//! **Exchange part.** The single-sided sum above, with mobility
//! `theta(f(x,g), f(x,g'))` evaluated pointwise in `x`, carries the
//! energy-dissipative sign: along the flow the entropy decreases by the
//! weighted Dirichlet energy of `phi`. The same single-sided rate constant
//! is used by the minimizing-movement scheme, which keeps the two
//! time-discretizations consistent with each other.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{
    barrier_check, entropy_of_field, spatial_gradient, spatial_laplacian, BarrierReport,
    GridDomain, SemiDiscreteDensity, SemiDiscreteField,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mobility::Mobility;
use crate::potentials::PotentialPair;

/// Time-stepping scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Forward Euler on the full right-hand side.
    Explicit,
    /// Linear spatial flux treated implicitly (tridiagonal solve per node,
    /// one-dimensional grids only); exchange explicit.
    SemiImplicitDiffusion,
}

/// Per-step energy increase tolerated before the run aborts.
pub const ENERGY_TOL: f64 = 1e-8;
/// Per-step mass drift tolerated before the run aborts.
pub const STEP_MASS_TOL: f64 = 1e-12;

/// Time-integration parameters.
#[derive(Debug, Clone, Copy)]
pub struct FlowConfig {
    /// Time step.
    pub dt: f64,
    /// Horizon; the run takes `ceil(t_final / dt)` steps.
    pub t_final: f64,
    /// Scheme choice.
    pub scheme: Scheme,
    /// Record every this many steps (the initial and final states are
    /// always recorded).
    pub record_every: usize,
}

impl FlowConfig {
    /// Largest admissible explicit step,
    /// `0.25 dx^2 / (1 + max|grad V| dx)`.
    pub fn explicit_cfl_bound(domain: GridDomain, pot: &PotentialPair) -> f64 {
        let dx = domain.spacing();
        0.25 * dx * dx / (1.0 + pot.max_grad_v() * dx)
    }

    /// Default step `0.2 dx^2`, reduced to the CFL bound if necessary.
    pub fn default_dt(domain: GridDomain, pot: &PotentialPair) -> f64 {
        (0.2 * domain.spacing().powi(2)).min(Self::explicit_cfl_bound(domain, pot))
    }

    /// Builds a validated configuration; `dt = None` selects the default
    /// step.
    pub fn new(
        domain: GridDomain,
        pot: &PotentialPair,
        dt: Option<f64>,
        t_final: f64,
        scheme: Scheme,
        record_every: usize,
    ) -> Result<Self> {
        let dt = dt.unwrap_or_else(|| Self::default_dt(domain, pot));
        let cfg = Self {
            dt,
            t_final,
            scheme,
            record_every,
        };
        cfg.validate(domain, pot)?;
        Ok(cfg)
    }

    /// Checks step positivity, the explicit CFL bound, and scheme/grid
    /// compatibility.
    pub fn validate(&self, domain: GridDomain, pot: &PotentialPair) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "time step must be positive, got {}",
                self.dt
            )));
        }
        if !(self.t_final.is_finite() && self.t_final >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be nonnegative, got {}",
                self.t_final
            )));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParameter(
                "record_every must be at least 1".into(),
            ));
        }
        if self.scheme == Scheme::Explicit {
            let bound = Self::explicit_cfl_bound(domain, pot);
            if self.dt > bound * (1.0 + 1e-12) {
                return Err(Error::InvalidParameter(format!(
                    "explicit step {} exceeds the stability bound \
                     0.25 dx^2 / (1 + max|grad V| dx) = {bound}",
                    self.dt
                )));
            }
        }
        if self.scheme == Scheme::SemiImplicitDiffusion && domain.dimension() != 1 {
            return Err(Error::InvalidParameter(
                "the semi-implicit scheme supports one-dimensional grids only".into(),
            ));
        }
        Ok(())
    }
}

/// Recorded evolution: densities, energies, and barrier reports at the
/// recorded times.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Recorded times, starting at 0.
    pub times: Vec<f64>,
    /// Recorded densities (normalized; barrier certificate carried along).
    pub densities: Vec<SemiDiscreteDensity>,
    /// Entropy at each recorded time.
    pub energies: Vec<f64>,
    /// Barrier comparison at each recorded time (present when the initial
    /// density carries a certificate).
    pub barriers: Vec<Option<BarrierReport>>,
}

impl Trajectory {
    /// Density at the latest recorded time.
    pub fn last(&self) -> &SemiDiscreteDensity {
        self.densities.last().expect("trajectory is never empty")
    }
}

fn check_shapes(
    f: &SemiDiscreteField,
    pot: &PotentialPair,
    graph: &Graph,
) -> Result<()> {
    if pot.v().domain() != f.domain() || pot.v().num_nodes() != f.num_nodes() {
        return Err(Error::InvalidField(
            "potential and density shapes do not match".into(),
        ));
    }
    if graph.len() != f.num_nodes() {
        return Err(Error::InvalidField(format!(
            "density has {} nodes but the graph has {}",
            f.num_nodes(),
            graph.len()
        )));
    }
    Ok(())
}

/// Transverse face area for a face along `axis` at cell `c` (product of
/// `dx` times the boundary half-factors over the other axes).
pub(crate) fn face_area(domain: GridDomain, c: usize, axis: usize) -> f64 {
    let mut area = 1.0;
    let idx = domain.multi_index(c);
    let n = domain.points_per_axis();
    for k in 0..domain.dimension() {
        if k == axis {
            continue;
        }
        let mut a = domain.spacing();
        if idx[k] == 0 || idx[k] == n - 1 {
            a *= 0.5;
        }
        area *= a;
    }
    area
}

/// Adds the flux-form spatial operator applied to `vals` into `out`.
pub(crate) fn add_spatial_rhs(
    vals: &DMatrix<f64>,
    pot: &PotentialPair,
    domain: GridDomain,
    out: &mut DMatrix<f64>,
) {
    let dx = domain.spacing();
    let weights = domain.cell_weights();
    let ev = pot.exp_v();
    let env = pot.exp_neg_v();
    for g in 0..vals.ncols() {
        for axis in 0..domain.dimension() {
            for c in 0..vals.nrows() {
                if let Some(nu) = domain.neighbor_up(c, axis) {
                    let area = face_area(domain, c, axis);
                    let w_face = 0.5 * (env[(c, g)] + env[(nu, g)]);
                    let u_c = vals[(c, g)] * ev[(c, g)];
                    let u_nu = vals[(nu, g)] * ev[(nu, g)];
                    let flux = area * w_face * (u_nu - u_c) / dx;
                    out[(c, g)] += flux / weights[c];
                    out[(nu, g)] -= flux / weights[nu];
                }
            }
        }
    }
}

/// Adds the exchange operator applied to `vals` into `out`; requires
/// positive values wherever a node has an incident edge.
pub(crate) fn add_exchange_rhs(
    vals: &DMatrix<f64>,
    pot: &PotentialPair,
    graph: &Graph,
    mobility: &Mobility,
    out: &mut DMatrix<f64>,
) -> Result<()> {
    let m = graph.len();
    let k = graph.kernel();
    let v = pot.v().values();
    let cells = vals.nrows();
    // log f + V, computed only for nodes that exchange mass.
    let mut phi = DMatrix::zeros(cells, m);
    for g in 0..m {
        let active = (0..m).any(|gp| k[(g, gp)] > 0.0);
        if !active {
            continue;
        }
        for i in 0..cells {
            let fv = vals[(i, g)];
            if fv <= 0.0 {
                return Err(Error::InvalidField(format!(
                    "log f is required at cell {i}, node {g}, but f = {fv}"
                )));
            }
            phi[(i, g)] = fv.ln() + v[(i, g)];
        }
    }
    for g in 0..m {
        for gp in 0..m {
            let kv = k[(g, gp)];
            if kv <= 0.0 {
                continue;
            }
            for i in 0..cells {
                let th = mobility.theta_eval(i, g, gp, vals[(i, g)], vals[(i, gp)]);
                out[(i, g)] -= (phi[(i, g)] - phi[(i, gp)]) * kv * th;
            }
        }
    }
    Ok(())
}

/// Right-hand side of the evolution for an arbitrary (not necessarily
/// normalized) nonnegative field.
pub fn rhs_field(
    f: &SemiDiscreteField,
    pot: &PotentialPair,
    graph: &Graph,
    mobility: &Mobility,
) -> Result<SemiDiscreteField> {
    check_shapes(f, pot, graph)?;
    let domain = f.domain();
    let mut out = DMatrix::zeros(f.values().nrows(), f.values().ncols());
    add_spatial_rhs(f.values(), pot, domain, &mut out);
    add_exchange_rhs(f.values(), pot, graph, mobility, &mut out)?;
    SemiDiscreteField::new(domain, out)
}

/// Right-hand side `df/dt` at a density.
pub fn rhs(
    f: &SemiDiscreteDensity,
    pot: &PotentialPair,
    graph: &Graph,
    mobility: &Mobility,
) -> Result<SemiDiscreteField> {
    rhs_field(f.field(), pot, graph, mobility)
}

fn reattach_certificate(
    f_new: SemiDiscreteField,
    template: &SemiDiscreteDensity,
) -> Result<SemiDiscreteDensity> {
    let d = SemiDiscreteDensity::new(f_new)?;
    match template.barrier() {
        Some((lo, hi)) => d.with_barrier(lo, hi),
        None => Ok(d),
    }
}

/// One explicit or semi-implicit step.
pub fn step(
    f: &SemiDiscreteDensity,
    cfg: &FlowConfig,
    pot: &PotentialPair,
    graph: &Graph,
    mobility: &Mobility,
) -> Result<SemiDiscreteDensity> {
    check_shapes(f.field(), pot, graph)?;
    let domain = f.domain();
    cfg.validate(domain, pot)?;
    let vals = f.values();
    let next = match cfg.scheme {
        Scheme::Explicit => {
            let mut out = DMatrix::zeros(vals.nrows(), vals.ncols());
            add_spatial_rhs(vals, pot, domain, &mut out);
            add_exchange_rhs(vals, pot, graph, mobility, &mut out)?;
            let mut next = vals.clone();
            next += out * cfg.dt;
            check_positive_result(&next)?;
            next
        }
        Scheme::SemiImplicitDiffusion => {
            let mut exch = DMatrix::zeros(vals.nrows(), vals.ncols());
            add_exchange_rhs(vals, pot, graph, mobility, &mut exch)?;
            let mut next = DMatrix::zeros(vals.nrows(), vals.ncols());
            for g in 0..vals.ncols() {
                let b = vals.column(g) + exch.column(g) * cfg.dt;
                let col = implicit_spatial_solve(&b.into_owned(), g, cfg.dt, pot, domain)?;
                next.set_column(g, &col);
            }
            check_positive_result(&next)?;
            next
        }
    };
    reattach_certificate(SemiDiscreteField::new(domain, next)?, f)
}

fn check_positive_result(vals: &DMatrix<f64>) -> Result<()> {
    for g in 0..vals.ncols() {
        for i in 0..vals.nrows() {
            let v = vals[(i, g)];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Numerical(format!(
                    "step produced an inadmissible value {v} at cell {i}, node {g}; \
                     reduce the time step"
                )));
            }
        }
    }
    Ok(())
}

/// Solves `(I - dt * A_g) x = b` for the flux-form spatial operator of one
/// node on a one-dimensional grid (Thomas algorithm).
fn implicit_spatial_solve(
    b: &DVector<f64>,
    g: usize,
    dt: f64,
    pot: &PotentialPair,
    domain: GridDomain,
) -> Result<DVector<f64>> {
    let n = domain.points_per_axis();
    let dx = domain.spacing();
    let weights = domain.cell_weights();
    let ev = pot.exp_v();
    let env = pot.exp_neg_v();
    // Face conductances c_{i+1/2} = 0.5 (e^{-V_i} + e^{-V_{i+1}}) / dx.
    let face = |i: usize| 0.5 * (env[(i, g)] + env[(i + 1, g)]) / dx;
    let mut sub = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n];
    for i in 0..n {
        let up = if i + 1 < n { face(i) } else { 0.0 };
        let down = if i > 0 { face(i - 1) } else { 0.0 };
        diag[i] = 1.0 + dt * (up + down) * ev[(i, g)] / weights[i];
        if i + 1 < n {
            sup[i] = -dt * up * ev[(i + 1, g)] / weights[i];
        }
        if i > 0 {
            sub[i] = -dt * down * ev[(i - 1, g)] / weights[i];
        }
    }
    // Forward elimination.
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    d[0] = b[0] / diag[0];
    for i in 1..n {
        let denom = diag[i] - sub[i] * c[i - 1];
        if denom.abs() < 1e-300 {
            return Err(Error::Numerical(
                "singular tridiagonal system in the semi-implicit step".into(),
            ));
        }
        c[i] = sup[i] / denom;
        d[i] = (b[i] - sub[i] * d[i - 1]) / denom;
    }
    let mut x = DVector::zeros(n);
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    Ok(x)
}

/// Integrates the flow over the configured horizon, recording states,
/// energies, and barrier reports.
///
/// Fails if a step increases the entropy by more than [`ENERGY_TOL`] or
/// drifts the mass by more than [`STEP_MASS_TOL`], or when the initial
/// density violates its own barrier certificate.
pub fn run(
    f0: &SemiDiscreteDensity,
    cfg: &FlowConfig,
    pot: &PotentialPair,
    graph: &Graph,
    mobility: &Mobility,
) -> Result<Trajectory> {
    check_shapes(f0.field(), pot, graph)?;
    cfg.validate(f0.domain(), pot)?;
    if let Some((lo, hi)) = f0.barrier() {
        let report = barrier_check(f0, pot, lo, hi)?;
        if !report.pass {
            return Err(Error::AssumptionViolated(format!(
                "initial density violates its barrier certificate at cell \
                 {:?} (ratio range [{}, {}], certificate [{lo}, {hi}])",
                report.min_cell, report.min_ratio, report.max_ratio
            )));
        }
    }
    let n_steps = if cfg.t_final == 0.0 {
        0
    } else {
        (cfg.t_final / cfg.dt - 1e-9).ceil().max(1.0) as usize
    };
    let weights = f0.domain().cell_weights();
    let mut traj = Trajectory {
        times: Vec::new(),
        densities: Vec::new(),
        energies: Vec::new(),
        barriers: Vec::new(),
    };
    let mut record = |t: f64, f: &SemiDiscreteDensity| -> Result<()> {
        traj.times.push(t);
        traj.energies
            .push(entropy_of_field(f.values(), pot, &weights));
        traj.barriers.push(match f.barrier() {
            Some((lo, hi)) => Some(barrier_check(f, pot, lo, hi)?),
            None => None,
        });
        traj.densities.push(f.clone());
        Ok(())
    };
    let mut current = f0.clone();
    let mut energy = entropy_of_field(current.values(), pot, &weights);
    let mut mass = current.mass();
    record(0.0, &current)?;
    for k in 0..n_steps {
        let next = step(&current, cfg, pot, graph, mobility)?;
        let e_next = entropy_of_field(next.values(), pot, &weights);
        if e_next > energy + ENERGY_TOL {
            return Err(Error::Numerical(format!(
                "entropy increased from {energy} to {e_next} at step {}; \
                 the time step is too large for dissipation",
                k + 1
            )));
        }
        let m_next = next.mass();
        if (m_next - mass).abs() > STEP_MASS_TOL {
            return Err(Error::Numerical(format!(
                "mass drifted by {} at step {}",
                m_next - mass,
                k + 1
            )));
        }
        energy = e_next;
        mass = m_next;
        current = next;
        if (k + 1) % cfg.record_every == 0 || k + 1 == n_steps {
            record((k + 1) as f64 * cfg.dt, &current)?;
        }
    }
    Ok(traj)
}

/// Defect of the time-integrated weak identity of the evolution on the
/// recorded window `[r, s]` for a test function `zeta`:
///
/// ```text
/// int zeta dmu(s) - int zeta dmu(r)
///   = int_r^s [ sum (lap zeta - grad zeta . grad V) f
///               - sum_pairs (d zeta)(d(log f + V)) K theta ] dt
/// ```
///
/// evaluated with centered differences and trapezoid time quadrature over
/// the recorded states; `r` and `s` snap to the nearest recorded times.
/// The defect is O(dt + dx^2) plus a boundary-tail term controlled by the
/// decay of `f` at the box boundary.
pub fn weak_form_residual(
    traj: &Trajectory,
    zeta: &SemiDiscreteField,
    r: f64,
    s: f64,
    pot: &PotentialPair,
    graph: &Graph,
    mobility: &Mobility,
) -> Result<f64> {
    if traj.times.len() < 2 {
        return Err(Error::InvalidParameter(
            "the trajectory needs at least two recorded times".into(),
        ));
    }
    if !(r < s) {
        return Err(Error::InvalidParameter(format!(
            "need r < s, got r = {r}, s = {s}"
        )));
    }
    let nearest = |t: f64| -> usize {
        let mut best = 0;
        let mut dist = f64::INFINITY;
        for (k, &tk) in traj.times.iter().enumerate() {
            if (tk - t).abs() < dist {
                dist = (tk - t).abs();
                best = k;
            }
        }
        best
    };
    let ir = nearest(r);
    let is = nearest(s);
    if ir >= is {
        return Err(Error::InvalidParameter(
            "r and s snap to the same recorded time".into(),
        ));
    }
    let domain = zeta.domain();
    check_shapes(zeta, pot, graph)?;
    let weights = domain.cell_weights();
    let lap_zeta = spatial_laplacian(zeta);
    let grads: Vec<DMatrix<f64>> = (0..domain.dimension())
        .map(|axis| spatial_gradient(zeta, axis))
        .collect();
    let v = pot.v().values();
    let kernel = graph.kernel();
    let m = graph.len();
    let integrand = |f: &SemiDiscreteDensity| -> f64 {
        let vals = f.values();
        let mut acc = 0.0;
        for g in 0..m {
            for i in 0..domain.num_cells() {
                let mut adv = 0.0;
                for (axis, gz) in grads.iter().enumerate() {
                    adv += gz[(i, g)] * pot.grad_v(axis)[(i, g)];
                }
                acc += (lap_zeta[(i, g)] - adv) * vals[(i, g)] * weights[i];
            }
        }
        for g in 0..m {
            for gp in (g + 1)..m {
                let kv = kernel[(g, gp)];
                if kv <= 0.0 {
                    continue;
                }
                for i in 0..domain.num_cells() {
                    let fg = vals[(i, g)];
                    let fgp = vals[(i, gp)];
                    if fg <= 0.0 || fgp <= 0.0 {
                        continue;
                    }
                    let dz = zeta.values()[(i, gp)] - zeta.values()[(i, g)];
                    let dphi = (fgp.ln() + v[(i, gp)]) - (fg.ln() + v[(i, g)]);
                    let th = mobility.theta_eval(i, g, gp, fg, fgp);
                    acc -= dz * dphi * kv * th * weights[i];
                }
            }
        }
        acc
    };
    let pair_with_zeta = |f: &SemiDiscreteDensity| -> f64 {
        let vals = f.values();
        let mut acc = 0.0;
        for g in 0..m {
            for i in 0..domain.num_cells() {
                acc += zeta.values()[(i, g)] * vals[(i, g)] * weights[i];
            }
        }
        acc
    };
    let lhs = pair_with_zeta(&traj.densities[is]) - pair_with_zeta(&traj.densities[ir]);
    let mut rhs_time = 0.0;
    let mut prev = integrand(&traj.densities[ir]);
    for k in ir..is {
        let next = integrand(&traj.densities[k + 1]);
        rhs_time += 0.5 * (prev + next) * (traj.times[k + 1] - traj.times[k]);
        prev = next;
    }
    Ok((lhs - rhs_time).abs())
}
