//! Dynamic-transport machinery: the discrete continuity equation, the
//! kinetic action of density paths, minimal single-potential selection, an
//! approximate dynamic distance, and geodesic / damped second-order
//! integrators.
//!
//! # Conventions
//!
//! A velocity on the product space is described by a pair of potentials: a
//! spatial potential `phi` whose gradient moves mass inside each node's copy
//! of the box, and a graph potential `psi` whose node differences drive mass
//! exchange along edges. A pair of densities `(f_a, f_b)` and a potential
//! pair satisfy the discrete continuity equation when
//!
//! ```text
//! (f_b - f_a)/dt + div_x(fbar grad_x phi) + div_g(theta(fbar) grad_g psi) = 0,
//! ```
//!
//! with `fbar` the midpoint density. The spatial divergence is in
//! conservative flux form (arithmetic face averages of `fbar`, zero flux
//! through the box boundary), and the graph divergence is the single-sided
//! exchange sum `sum_{g'} (psi(g') - psi(g)) K(g,g') theta(...)` — the same
//! operator that drives [`crate::pde`], so the entropy gradient flow
//! satisfies the continuity equation with `phi = psi = -(log f + V)`.
//!
//! The kinetic (quadratic) form is chosen dual to those two operators: the
//! spatial part integrates `|grad_x phi|^2 fbar` with face-based differences
//! and the graph part sums `(grad_g psi)^2 K theta` over *unordered* edges.
//! With this pairing, summation by parts is exact,
//! `Q(phi, psi) = -<phi, div_x(..)> - <psi, div_g(..)>`, which is what makes
//! the least-kinetic-norm potential for a prescribed density rate a *single*
//! potential `phi = psi` computed from one symmetric positive semi-definite
//! solve ([`minimal_selection`]), and what makes the Hamilton–Jacobi-type
//! updates of [`geodesic_step`] the exact Hamiltonian partner of the
//! continuity update (the graph Hamiltonian term carries the matching
//! one-half prefactor; it vanishes identically for the mass-independent
//! mobility, whose value does not depend on the masses).
//!
//! [`dynamic_w2`] minimizes the accumulated action over paths with fixed
//! endpoints. Intermediate densities are parameterized positively (softmax
//! per exchange component, which fixes the component masses), per-interval
//! potentials come from [`minimal_selection`] applied to the density
//! increments — so every iterate is a feasible path — and the outer descent
//! uses backtracking gradient steps. The value returned is therefore always
//! an *upper* bound on the squared distance; `certified` reports whether the
//! outer iteration converged and the recomputed continuity residuals meet
//! the requested tolerance.

use nalgebra::{DMatrix, DVector};

use crate::domain::{
    entropy, GridDomain, SemiDiscreteDensity, SemiDiscreteField,
};
use crate::graph::Graph;
use crate::mobility::Mobility;
use crate::pde::face_area;
use crate::potentials::PotentialPair;
use crate::{Error, Result};

/// Relative residual (against the requested source) below which a
/// [`minimal_selection`] solve is accepted.
pub const MINIMAL_SELECTION_RTOL: f64 = 1e-8;

/// A spatial potential and a graph potential describing one velocity field.
#[derive(Debug, Clone)]
pub struct VelocityPotentials {
    phi: SemiDiscreteField,
    psi: SemiDiscreteField,
    single: bool,
}

impl VelocityPotentials {
    /// A pair of potentials on the same grid and node set.
    pub fn new(phi: SemiDiscreteField, psi: SemiDiscreteField) -> Result<Self> {
        if phi.domain() != psi.domain() || phi.num_nodes() != psi.num_nodes() {
            return Err(Error::InvalidField(
                "spatial and graph potentials must share their grid and node set".into(),
            ));
        }
        Ok(Self {
            phi,
            psi,
            single: false,
        })
    }

    /// A single potential used for both the spatial and the graph velocity.
    pub fn single(phi: SemiDiscreteField) -> Self {
        let psi = phi.clone();
        Self {
            phi,
            psi,
            single: true,
        }
    }

    /// The spatial potential.
    pub fn phi(&self) -> &SemiDiscreteField {
        &self.phi
    }

    /// The graph potential.
    pub fn psi(&self) -> &SemiDiscreteField {
        &self.psi
    }

    /// Whether this pair was built from a single potential.
    pub fn is_single(&self) -> bool {
        self.single
    }

    /// The grid both potentials live on.
    pub fn domain(&self) -> GridDomain {
        self.phi.domain()
    }

    /// Number of graph nodes.
    pub fn num_nodes(&self) -> usize {
        self.phi.num_nodes()
    }

    /// The pair with both potentials negated (the reversed-time velocity).
    pub fn negated(&self) -> Self {
        let mut phi = self.phi.clone();
        phi.values_mut().iter_mut().for_each(|v| *v = -*v);
        if self.single {
            Self::single(phi)
        } else {
            let mut psi = self.psi.clone();
            psi.values_mut().iter_mut().for_each(|v| *v = -*v);
            Self {
                phi,
                psi,
                single: false,
            }
        }
    }
}

fn check_operator_shapes(
    fbar: &SemiDiscreteField,
    pots: &VelocityPotentials,
    graph: &Graph,
) -> Result<()> {
    if pots.domain() != fbar.domain() || pots.num_nodes() != fbar.num_nodes() {
        return Err(Error::InvalidField(
            "potentials and density must share their grid and node set".into(),
        ));
    }
    if graph.len() != fbar.num_nodes() {
        return Err(Error::InvalidField(format!(
            "density has {} nodes but the graph has {}",
            fbar.num_nodes(),
            graph.len()
        )));
    }
    Ok(())
}

/// Adds `div_x(fbar grad_x phi)` (conservative flux form, arithmetic face
/// averages, zero boundary flux) into `out`.
fn add_spatial_divergence(
    fbar: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    domain: GridDomain,
    out: &mut DMatrix<f64>,
) {
    let dx = domain.spacing();
    let weights = domain.cell_weights();
    for g in 0..fbar.ncols() {
        for axis in 0..domain.dimension() {
            for c in 0..fbar.nrows() {
                if let Some(nu) = domain.neighbor_up(c, axis) {
                    let area = face_area(domain, c, axis);
                    let f_face = 0.5 * (fbar[(c, g)] + fbar[(nu, g)]);
                    let flux = area * f_face * (phi[(nu, g)] - phi[(c, g)]) / dx;
                    out[(c, g)] += flux / weights[c];
                    out[(nu, g)] -= flux / weights[nu];
                }
            }
        }
    }
}

/// Adds `div_g(theta(fbar) grad_g psi)` (single-sided exchange sum) into
/// `out`.
fn add_graph_divergence(
    fbar: &DMatrix<f64>,
    psi: &DMatrix<f64>,
    graph: &Graph,
    mobility: &Mobility,
    out: &mut DMatrix<f64>,
) {
    let kernel = graph.kernel();
    let m = graph.len();
    for g in 0..m {
        for gp in 0..m {
            let kv = kernel[(g, gp)];
            if kv <= 0.0 {
                continue;
            }
            for c in 0..fbar.nrows() {
                let th = mobility.theta_eval(c, g, gp, fbar[(c, g)], fbar[(c, gp)]);
                out[(c, g)] += (psi[(c, gp)] - psi[(c, g)]) * kv * th;
            }
        }
    }
}

/// The continuity operator
/// `div_x(fbar grad_x phi) + div_g(theta(fbar) grad_g psi)` applied to a
/// potential pair at the density `fbar`.
///
/// The entropy gradient flow satisfies
/// `df/dt + continuity_operator(f, (-(log f + V), -(log f + V))) ~ 0`.
pub fn continuity_operator(
    fbar: &SemiDiscreteField,
    pots: &VelocityPotentials,
    graph: &Graph,
    mobility: &Mobility,
) -> Result<SemiDiscreteField> {
    check_operator_shapes(fbar, pots, graph)?;
    if fbar.values().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidField(
            "continuity operator needs a nonnegative density".into(),
        ));
    }
    let mut out = DMatrix::zeros(fbar.values().nrows(), fbar.values().ncols());
    add_spatial_divergence(fbar.values(), pots.phi().values(), fbar.domain(), &mut out);
    add_graph_divergence(fbar.values(), pots.psi().values(), graph, mobility, &mut out);
    SemiDiscreteField::new(fbar.domain(), out)
}

/// Sup-norm defect of the discrete continuity equation for one interval:
/// `(f_b - f_a)/dt + div_x(fbar grad_x phi) + div_g(theta(fbar) grad_g psi)`
/// with `fbar` the midpoint density.
pub fn continuity_residual(
    f_a: &SemiDiscreteDensity,
    f_b: &SemiDiscreteDensity,
    pots: &VelocityPotentials,
    dt: f64,
    graph: &Graph,
    mobility: &Mobility,
) -> Result<f64> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "continuity interval length must be positive and finite, got {dt}"
        )));
    }
    if f_a.domain() != f_b.domain() || f_a.num_nodes() != f_b.num_nodes() {
        return Err(Error::InvalidField(
            "interval endpoints must share their grid and node set".into(),
        ));
    }
    let fbar_vals = 0.5 * (f_a.values() + f_b.values());
    let fbar = SemiDiscreteField::new(f_a.domain(), fbar_vals)?;
    let div = continuity_operator(&fbar, pots, graph, mobility)?;
    let mut worst = 0.0f64;
    for g in 0..f_a.num_nodes() {
        for c in 0..f_a.domain().num_cells() {
            let rate = (f_b.values()[(c, g)] - f_a.values()[(c, g)]) / dt;
            worst = worst.max((rate + div.values()[(c, g)]).abs());
        }
    }
    Ok(worst)
}

/// The kinetic quadratic form of a potential pair at a density: the spatial
/// Dirichlet energy of `phi` weighted by `fbar` (face-based differences)
/// plus the graph Dirichlet energy of `psi` weighted by `K theta(fbar)`
/// over unordered edges.
///
/// This form is exactly dual to [`continuity_operator`]:
/// `kinetic_norm = -<phi, div_x part> - <psi, div_g part>` under the grid
/// quadrature.
pub fn kinetic_norm(
    fbar: &SemiDiscreteField,
    pots: &VelocityPotentials,
    graph: &Graph,
    mobility: &Mobility,
) -> Result<f64> {
    check_operator_shapes(fbar, pots, graph)?;
    let domain = fbar.domain();
    let dx = domain.spacing();
    let f = fbar.values();
    let phi = pots.phi().values();
    let psi = pots.psi().values();
    let mut acc = 0.0;
    for g in 0..f.ncols() {
        for axis in 0..domain.dimension() {
            for c in 0..f.nrows() {
                if let Some(nu) = domain.neighbor_up(c, axis) {
                    let area = face_area(domain, c, axis);
                    let f_face = 0.5 * (f[(c, g)] + f[(nu, g)]);
                    let dphi = (phi[(nu, g)] - phi[(c, g)]) / dx;
                    acc += f_face * dphi * dphi * area * dx;
                }
            }
        }
    }
    let weights = domain.cell_weights();
    let kernel = graph.kernel();
    let m = graph.len();
    for g in 0..m {
        for gp in (g + 1)..m {
            let kv = kernel[(g, gp)];
            if kv <= 0.0 {
                continue;
            }
            for c in 0..f.nrows() {
                let th = mobility.theta_eval(c, g, gp, f[(c, g)], f[(c, gp)]);
                let dpsi = psi[(c, gp)] - psi[(c, g)];
                acc += dpsi * dpsi * kv * th * weights[c];
            }
        }
    }
    Ok(acc)
}

/// A time-discrete density path with per-interval velocity potentials and
/// recorded continuity residuals.
#[derive(Debug, Clone)]
pub struct DiscretePath {
    times: Vec<f64>,
    densities: Vec<SemiDiscreteDensity>,
    potentials: Vec<VelocityPotentials>,
    residuals: Vec<f64>,
}

impl DiscretePath {
    /// Validates shapes and strictly increasing times, and records the
    /// continuity residual of every interval.
    pub fn new(
        times: Vec<f64>,
        densities: Vec<SemiDiscreteDensity>,
        potentials: Vec<VelocityPotentials>,
        graph: &Graph,
        mobility: &Mobility,
    ) -> Result<Self> {
        if times.is_empty() || times.len() != densities.len() {
            return Err(Error::InvalidField(format!(
                "a path needs one density per time, got {} times and {} densities",
                times.len(),
                densities.len()
            )));
        }
        if potentials.len() + 1 != times.len() {
            return Err(Error::InvalidField(format!(
                "a path with {} times needs {} potential pairs, got {}",
                times.len(),
                times.len() - 1,
                potentials.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidField("path times must be finite".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidField(
                "path times must be strictly increasing".into(),
            ));
        }
        let domain = densities[0].domain();
        let nodes = densities[0].num_nodes();
        if densities
            .iter()
            .any(|d| d.domain() != domain || d.num_nodes() != nodes)
        {
            return Err(Error::InvalidField(
                "all path densities must share their grid and node set".into(),
            ));
        }
        let mut residuals = Vec::with_capacity(potentials.len());
        for (k, pots) in potentials.iter().enumerate() {
            let dt = times[k + 1] - times[k];
            residuals.push(continuity_residual(
                &densities[k],
                &densities[k + 1],
                pots,
                dt,
                graph,
                mobility,
            )?);
        }
        Ok(Self {
            times,
            densities,
            potentials,
            residuals,
        })
    }

    /// Recorded times.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Densities, one per time.
    pub fn densities(&self) -> &[SemiDiscreteDensity] {
        &self.densities
    }

    /// Velocity potentials, one per interval.
    pub fn potentials(&self) -> &[VelocityPotentials] {
        &self.potentials
    }

    /// Continuity residuals, one per interval.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    /// Number of intervals.
    pub fn num_intervals(&self) -> usize {
        self.potentials.len()
    }

    /// Largest recorded continuity residual.
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }

    /// The time-reversed path: densities in reverse order, potentials
    /// negated. Continuity residuals are unchanged interval by interval.
    pub fn reversed(&self) -> Self {
        let first = *self.times.first().expect("paths are never empty");
        let last = *self.times.last().expect("paths are never empty");
        let n = self.times.len();
        let times = (0..n).map(|k| first + last - self.times[n - 1 - k]).collect();
        let densities = self.densities.iter().rev().cloned().collect();
        let potentials = self
            .potentials
            .iter()
            .rev()
            .map(VelocityPotentials::negated)
            .collect();
        let residuals = self.residuals.iter().rev().cloned().collect();
        Self {
            times,
            densities,
            potentials,
            residuals,
        }
    }
}

/// Accumulated kinetic action of a path:
/// `sum_k dt_k * kinetic_norm(midpoint_k, potentials_k)`.
///
/// Invariant under time reversal with negated potentials.
pub fn kinetic_action(path: &DiscretePath, graph: &Graph, mobility: &Mobility) -> Result<f64> {
    let mut action = 0.0;
    for k in 0..path.num_intervals() {
        let dt = path.times[k + 1] - path.times[k];
        let fbar_vals = 0.5 * (path.densities[k].values() + path.densities[k + 1].values());
        let fbar = SemiDiscreteField::new(path.densities[k].domain(), fbar_vals)?;
        action += dt * kinetic_norm(&fbar, &path.potentials[k], graph, mobility)?;
    }
    Ok(action)
}

/// Index of the unknown at cell `c`, node `g` in the stacked system.
fn stack_index(cells: usize, c: usize, g: usize) -> usize {
    g * cells + c
}

/// Assembles the weighted stiffness matrix of the continuity operator at a
/// fixed density: `B[(c,g),(c',g')] = -w_c * (operator e_{(c',g')})(c, g)`,
/// which is symmetric positive semi-definite with the per-exchange-component
/// constants as its kernel.
fn assemble_kinetic_matrix(
    f: &DMatrix<f64>,
    domain: GridDomain,
    graph: &Graph,
    mobility: &Mobility,
) -> DMatrix<f64> {
    let cells = domain.num_cells();
    let m = graph.len();
    let n = cells * m;
    let dx = domain.spacing();
    let weights = domain.cell_weights();
    let kernel = graph.kernel();
    let mut b = DMatrix::zeros(n, n);
    for g in 0..m {
        for axis in 0..domain.dimension() {
            for c in 0..cells {
                if let Some(nu) = domain.neighbor_up(c, axis) {
                    let t = face_area(domain, c, axis) * 0.5 * (f[(c, g)] + f[(nu, g)]) / dx;
                    let ii = stack_index(cells, c, g);
                    let jj = stack_index(cells, nu, g);
                    b[(ii, ii)] += t;
                    b[(jj, jj)] += t;
                    b[(ii, jj)] -= t;
                    b[(jj, ii)] -= t;
                }
            }
        }
    }
    for g in 0..m {
        for gp in (g + 1)..m {
            let kv = kernel[(g, gp)];
            if kv <= 0.0 {
                continue;
            }
            for c in 0..cells {
                let th = mobility.theta_eval(c, g, gp, f[(c, g)], f[(c, gp)]);
                let coef = weights[c] * kv * th;
                let ii = stack_index(cells, c, g);
                let jj = stack_index(cells, c, gp);
                b[(ii, ii)] += coef;
                b[(jj, jj)] += coef;
                b[(ii, jj)] -= coef;
                b[(jj, ii)] -= coef;
            }
        }
    }
    b
}

/// Least-kinetic-norm single potential generating a prescribed density
/// rate: returns `phi` with
/// `div_x(f grad_x phi) + div_g(theta(f) grad_g phi) = source`,
/// normalized to zero quadrature mean on every exchange component.
///
/// The minimizing potential pair for this constraint has equal spatial and
/// graph components, so one symmetric positive semi-definite solve on the
/// zero-mean subspace suffices; the result is verified by applying the
/// operator and must reach a relative residual of
/// [`MINIMAL_SELECTION_RTOL`].
///
/// Requires a strictly positive density and a source with zero quadrature
/// sum on every exchange component (no other rate is attainable).
pub fn minimal_selection(
    f: &SemiDiscreteDensity,
    source: &SemiDiscreteField,
    graph: &Graph,
    mobility: &Mobility,
) -> Result<SemiDiscreteField> {
    let domain = f.domain();
    if source.domain() != domain || source.num_nodes() != f.num_nodes() {
        return Err(Error::InvalidField(
            "source and density must share their grid and node set".into(),
        ));
    }
    if graph.len() != f.num_nodes() {
        return Err(Error::InvalidField(format!(
            "density has {} nodes but the graph has {}",
            f.num_nodes(),
            graph.len()
        )));
    }
    let cells = domain.num_cells();
    let m = graph.len();
    for g in 0..m {
        for c in 0..cells {
            let v = f.values()[(c, g)];
            if v <= 0.0 {
                return Err(Error::InvalidField(format!(
                    "minimal selection needs a density bounded away from zero; \
                     cell {c}, node {g} carries {v}"
                )));
            }
        }
    }
    let weights = domain.cell_weights();
    let components = graph.connected_components();
    let svals = source.values();
    let l1: f64 = (0..m)
        .map(|g| (0..cells).map(|c| weights[c] * svals[(c, g)].abs()).sum::<f64>())
        .sum();
    for comp in &components {
        let total: f64 = comp
            .iter()
            .map(|&g| (0..cells).map(|c| weights[c] * svals[(c, g)]).sum::<f64>())
            .sum();
        if total.abs() > 1e-9 * (1.0 + l1) {
            let names: Vec<&str> = comp.iter().map(|&g| graph.names()[g].as_str()).collect();
            return Err(Error::Infeasible(format!(
                "source must integrate to zero on every exchange component; \
                 component {{{}}} carries rate {total}",
                names.join(", ")
            )));
        }
    }
    let n = cells * m;
    let mut b = assemble_kinetic_matrix(f.values(), domain, graph, mobility);
    let alpha = (0..n).map(|i| b[(i, i)]).fold(0.0, f64::max).max(1.0);
    for comp in &components {
        let mut u = DVector::zeros(n);
        for &g in comp {
            for c in 0..cells {
                u[stack_index(cells, c, g)] = weights[c];
            }
        }
        let nrm = u.norm();
        u /= nrm;
        b += alpha * &u * u.transpose();
    }
    let mut rhs = DVector::zeros(n);
    for g in 0..m {
        for c in 0..cells {
            rhs[stack_index(cells, c, g)] = -weights[c] * svals[(c, g)];
        }
    }
    let chol = match b.clone().cholesky() {
        Some(c) => c,
        None => {
            let ridge = 1e-12 * alpha;
            for i in 0..n {
                b[(i, i)] += ridge;
            }
            b.cholesky().ok_or_else(|| {
                Error::Numerical(
                    "minimal selection stiffness matrix is not positive definite \
                     (density too close to zero?)"
                        .into(),
                )
            })?
        }
    };
    let sol = chol.solve(&rhs);
    let mut phi = DMatrix::zeros(cells, m);
    for g in 0..m {
        for c in 0..cells {
            phi[(c, g)] = sol[stack_index(cells, c, g)];
        }
    }
    for comp in &components {
        let mut mass = 0.0;
        let mut mean = 0.0;
        for &g in comp {
            for c in 0..cells {
                mass += weights[c];
                mean += weights[c] * phi[(c, g)];
            }
        }
        let mean = mean / mass;
        for &g in comp {
            for c in 0..cells {
                phi[(c, g)] -= mean;
            }
        }
    }
    let phi = SemiDiscreteField::new(domain, phi)?;
    let pots = VelocityPotentials::single(phi);
    let applied = continuity_operator(f.field(), &pots, graph, mobility)?;
    let scale = 1.0 + source.max_abs();
    let mut worst = 0.0f64;
    for g in 0..m {
        for c in 0..cells {
            worst = worst.max((applied.values()[(c, g)] - svals[(c, g)]).abs());
        }
    }
    if worst > MINIMAL_SELECTION_RTOL * scale {
        return Err(Error::Numerical(format!(
            "minimal selection residual {worst:.3e} exceeds {MINIMAL_SELECTION_RTOL:.1e} \
             relative to the source scale {scale:.3e}"
        )));
    }
    Ok(pots.phi)
}

/// One four-point separability defect:
/// `r(c,g) - r(c',g) - r(c,g') + r(c',g')`, which vanishes for every field
/// of the form `r(c,g) = a(c) + b(g)`.
#[derive(Debug, Clone, Copy)]
pub struct FourPointWitness {
    /// Cell pair `(c, c')`.
    pub cells: (usize, usize),
    /// Node pair `(g, g')`.
    pub nodes: (usize, usize),
    /// The defect value (not normalized).
    pub defect: f64,
}

/// Result of testing whether `phi - psi` splits into a spatial part plus a
/// node part.
#[derive(Debug, Clone)]
pub struct DecompositionReport {
    /// Weighted least-squares relative residual of the additive fit.
    pub relative_residual: f64,
    /// Fitted spatial part, one value per cell (zero-mean convention).
    pub spatial_part: Vec<f64>,
    /// Fitted node part, one value per node (carries the grand mean).
    pub node_part: Vec<f64>,
    /// Worst four-point defect found, normalized by the field scale.
    pub worst_defect: f64,
    /// A witness achieving the worst defect, if any tetrad exists.
    pub witness: Option<FourPointWitness>,
    /// Whether both the fit residual and the worst defect are within `tol`.
    pub separable: bool,
}

/// Tests whether `phi - psi` is of the form `a(x) + b(g)`.
///
/// Fits the additive model by weighted least squares (closed form for the
/// complete grid-times-nodes layout) and, independently, scans four-point
/// tetrads `(c, c') x (g, g')` whose alternating sum must vanish for every
/// additive field; the worst tetrad is reported as a witness. Tetrads are
/// enumerated exhaustively on small layouts and sampled deterministically on
/// large ones.
pub fn decomposition_check(pots: &VelocityPotentials, tol: f64) -> Result<DecompositionReport> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "separability tolerance must be positive, got {tol}"
        )));
    }
    let domain = pots.domain();
    let cells = domain.num_cells();
    let m = pots.num_nodes();
    let phi = pots.phi().values();
    let psi = pots.psi().values();
    let r = phi - psi;
    let weights = domain.cell_weights();
    let total_w: f64 = weights.iter().sum();
    let mut grand = 0.0;
    for g in 0..m {
        for c in 0..cells {
            grand += weights[c] * r[(c, g)];
        }
    }
    grand /= total_w * m as f64;
    let mut spatial = vec![0.0; cells];
    for (c, s) in spatial.iter_mut().enumerate() {
        *s = (0..m).map(|g| r[(c, g)]).sum::<f64>() / m as f64 - grand;
    }
    let mut node = vec![0.0; m];
    for (g, b) in node.iter_mut().enumerate() {
        *b = (0..cells).map(|c| weights[c] * r[(c, g)]).sum::<f64>() / total_w;
    }
    let mut res_sq = 0.0;
    let mut r_sq = 0.0;
    for g in 0..m {
        for c in 0..cells {
            let fit = spatial[c] + node[g];
            let d = r[(c, g)] - fit;
            res_sq += weights[c] * d * d;
            r_sq += weights[c] * r[(c, g)] * r[(c, g)];
        }
    }
    let relative_residual = res_sq.sqrt() / (r_sq.sqrt() + f64::EPSILON);
    let scale = 1.0 + r.amax();
    let mut worst = 0.0f64;
    let mut witness = None;
    let mut consider = |c: usize, cp: usize, g: usize, gp: usize| {
        let defect = r[(c, g)] - r[(cp, g)] - r[(c, gp)] + r[(cp, gp)];
        if defect.abs() > worst {
            worst = defect.abs();
            witness = Some(FourPointWitness {
                cells: (c, cp),
                nodes: (g, gp),
                defect,
            });
        }
    };
    if m >= 2 && cells >= 2 {
        if cells <= 128 && m <= 8 {
            for c in 0..cells {
                for cp in (c + 1)..cells {
                    for g in 0..m {
                        for gp in (g + 1)..m {
                            consider(c, cp, g, gp);
                        }
                    }
                }
            }
        } else {
            let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
            let mut next = || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                state
            };
            for _ in 0..4096 {
                let c = (next() % cells as u64) as usize;
                let cp = (next() % cells as u64) as usize;
                let g = (next() % m as u64) as usize;
                let gp = (next() % m as u64) as usize;
                if c != cp && g != gp {
                    consider(c, cp, g, gp);
                }
            }
        }
    }
    let worst_defect = worst / scale;
    Ok(DecompositionReport {
        separable: relative_residual <= tol && worst_defect <= tol,
        relative_residual,
        spatial_part: spatial,
        node_part: node,
        worst_defect,
        witness,
    })
}

/// Options for [`dynamic_w2`].
#[derive(Debug, Clone)]
pub struct DynamicTransportOptions {
    /// Number of time intervals of the path (default 8).
    pub t_steps: usize,
    /// Outer descent iteration cap (default 2000).
    pub max_iterations: usize,
    /// Relative objective-improvement stall threshold (default 1e-9).
    pub objective_tolerance: f64,
    /// Continuity-residual certification threshold, relative to the source
    /// scale (default 1e-8).
    pub residual_tolerance: f64,
}

impl Default for DynamicTransportOptions {
    fn default() -> Self {
        Self {
            t_steps: 8,
            max_iterations: 2000,
            objective_tolerance: 1e-9,
            residual_tolerance: 1e-8,
        }
    }
}

impl DynamicTransportOptions {
    fn validate(&self) -> Result<()> {
        if self.t_steps == 0 {
            return Err(Error::Config("t_steps must be at least 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.objective_tolerance.is_finite() && self.objective_tolerance > 0.0) {
            return Err(Error::Config(format!(
                "objective_tolerance must be positive, got {}",
                self.objective_tolerance
            )));
        }
        if !(self.residual_tolerance.is_finite() && self.residual_tolerance > 0.0) {
            return Err(Error::Config(format!(
                "residual_tolerance must be positive, got {}",
                self.residual_tolerance
            )));
        }
        Ok(())
    }
}

/// Result of [`dynamic_w2`]: an upper bound on the squared dynamic distance
/// together with the realizing path.
#[derive(Debug, Clone)]
pub struct DynamicW2 {
    /// Accumulated kinetic action of the returned path (upper bound on the
    /// squared distance).
    pub squared: f64,
    /// Square root of the action.
    pub distance: f64,
    /// The realizing path (unit time horizon, uniform intervals).
    pub path: DiscretePath,
    /// Outer descent iterations performed.
    pub iterations: usize,
    /// Whether the outer descent reached its stall tolerance.
    pub converged: bool,
    /// Whether the bound is certified: outer convergence plus recomputed
    /// continuity residuals within tolerance.
    pub certified: bool,
    /// Largest recomputed continuity residual along the path.
    pub max_residual: f64,
}

struct PathProblem<'a> {
    domain: GridDomain,
    graph: &'a Graph,
    mobility: &'a Mobility,
    weights: DVector<f64>,
    components: Vec<Vec<usize>>,
    comp_masses: Vec<f64>,
    dt: f64,
    f0: DMatrix<f64>,
    f1: DMatrix<f64>,
}

struct PathEvaluation {
    objective: f64,
    interiors: Vec<DMatrix<f64>>,
    midpoints: Vec<DMatrix<f64>>,
    sources: Vec<DMatrix<f64>>,
    potentials: Vec<DMatrix<f64>>,
}

impl PathProblem<'_> {
    /// Positive density with the prescribed per-component masses, from free
    /// log-coordinates (softmax per exchange component).
    fn density_from(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let cells = self.domain.num_cells();
        let mut f = DMatrix::zeros(cells, self.graph.len());
        for (comp, &mass) in self.components.iter().zip(&self.comp_masses) {
            let mut top = f64::NEG_INFINITY;
            for &g in comp {
                for c in 0..cells {
                    top = top.max(u[(c, g)]);
                }
            }
            let mut z = 0.0;
            for &g in comp {
                for c in 0..cells {
                    z += self.weights[c] * (u[(c, g)] - top).exp();
                }
            }
            for &g in comp {
                for c in 0..cells {
                    f[(c, g)] = mass * (u[(c, g)] - top).exp() / z;
                }
            }
        }
        f
    }

    fn evaluate(&self, us: &[DMatrix<f64>]) -> Result<PathEvaluation> {
        let t = us.len() + 1;
        let interiors: Vec<DMatrix<f64>> = us.iter().map(|u| self.density_from(u)).collect();
        let frame = |k: usize| -> &DMatrix<f64> {
            if k == 0 {
                &self.f0
            } else if k == t {
                &self.f1
            } else {
                &interiors[k - 1]
            }
        };
        let mut objective = 0.0;
        let mut midpoints = Vec::with_capacity(t);
        let mut sources = Vec::with_capacity(t);
        let mut potentials = Vec::with_capacity(t);
        for k in 0..t {
            let a = frame(k);
            let b = frame(k + 1);
            let source = (b - a) / self.dt;
            let mid = 0.5 * (a + b);
            let mid_density =
                SemiDiscreteDensity::new(SemiDiscreteField::new(self.domain, mid.clone())?)?;
            let neg = SemiDiscreteField::new(self.domain, -&source)?;
            let phi = minimal_selection(&mid_density, &neg, self.graph, self.mobility)?;
            let mut q = 0.0;
            for g in 0..source.ncols() {
                for c in 0..source.nrows() {
                    q += self.weights[c] * phi.values()[(c, g)] * source[(c, g)];
                }
            }
            objective += self.dt * q;
            midpoints.push(mid);
            sources.push(source);
            potentials.push(phi.values().clone());
        }
        Ok(PathEvaluation {
            objective,
            interiors,
            midpoints,
            sources,
            potentials,
        })
    }

    /// Sensitivity of `dt * Q_k` to the midpoint-density coefficients of
    /// interval `k` (mobility dependence of the kinetic matrix).
    fn mobility_sensitivity(&self, eval: &PathEvaluation, k: usize) -> Result<DMatrix<f64>> {
        let cells = self.domain.num_cells();
        let m = self.graph.len();
        let dx = self.domain.spacing();
        let phi = &eval.potentials[k];
        let fbar = &eval.midpoints[k];
        let kernel = self.graph.kernel();
        let mut h = DMatrix::zeros(cells, m);
        for g in 0..m {
            for axis in 0..self.domain.dimension() {
                for c in 0..cells {
                    if let Some(nu) = self.domain.neighbor_up(c, axis) {
                        let area = face_area(self.domain, c, axis);
                        let d = (phi[(nu, g)] - phi[(c, g)]) / dx;
                        let contrib = 0.5 * d * d * area * dx;
                        h[(c, g)] += contrib;
                        h[(nu, g)] += contrib;
                    }
                }
            }
        }
        for g in 0..m {
            for gp in 0..m {
                if gp == g {
                    continue;
                }
                let kv = kernel[(g, gp)];
                if kv <= 0.0 {
                    continue;
                }
                for c in 0..cells {
                    let d = phi[(c, gp)] - phi[(c, g)];
                    let dth =
                        self.mobility
                            .dtheta1(c, g, gp, fbar[(c, g)], fbar[(c, gp)])?;
                    h[(c, g)] += self.weights[c] * d * d * kv * dth;
                }
            }
        }
        Ok(h)
    }

    /// Gradient of the objective with respect to the log-coordinates of
    /// every interior frame.
    fn gradient(&self, us: &[DMatrix<f64>], eval: &PathEvaluation) -> Result<Vec<DMatrix<f64>>> {
        let cells = self.domain.num_cells();
        let m = self.graph.len();
        let mut sensitivities = Vec::with_capacity(eval.potentials.len());
        for k in 0..eval.potentials.len() {
            sensitivities.push(self.mobility_sensitivity(eval, k)?);
        }
        let mut grads = Vec::with_capacity(us.len());
        for j in 0..us.len() {
            let k = j + 1;
            let phi_prev = &eval.potentials[k - 1];
            let phi_next = &eval.potentials[k];
            let mut gf = DMatrix::zeros(cells, m);
            for g in 0..m {
                for c in 0..cells {
                    gf[(c, g)] = 2.0 * self.weights[c] * (phi_prev[(c, g)] - phi_next[(c, g)])
                        - 0.5
                            * self.dt
                            * (sensitivities[k - 1][(c, g)] + sensitivities[k][(c, g)]);
                }
            }
            let f = &eval.interiors[j];
            let mut gu = DMatrix::zeros(cells, m);
            for (comp, &mass) in self.components.iter().zip(&self.comp_masses) {
                let mut coupled = 0.0;
                for &g in comp {
                    for c in 0..cells {
                        coupled += gf[(c, g)] * f[(c, g)];
                    }
                }
                for &g in comp {
                    for c in 0..cells {
                        gu[(c, g)] = f[(c, g)] * gf[(c, g)]
                            - self.weights[c] * f[(c, g)] * coupled / mass;
                    }
                }
            }
            grads.push(gu);
        }
        Ok(grads)
    }
}

/// Approximate dynamic distance between two positive densities: minimizes
/// the kinetic action over paths with the given endpoints and returns a
/// certified upper bound on the squared distance together with the path.
///
/// Intermediate densities are parameterized positively with fixed
/// per-component masses, per-interval potentials come from
/// [`minimal_selection`] against the density increments (every iterate is a
/// feasible path), and the outer minimization runs backtracking gradient
/// descent. On stall or iteration cap the best path found is returned;
/// `converged`/`certified` report the solve quality, the value is an upper
/// bound either way.
pub fn dynamic_w2(
    mu0: &SemiDiscreteDensity,
    mu1: &SemiDiscreteDensity,
    graph: &Graph,
    mobility: &Mobility,
    options: &DynamicTransportOptions,
) -> Result<DynamicW2> {
    options.validate()?;
    let domain = mu0.domain();
    if mu1.domain() != domain || mu1.num_nodes() != mu0.num_nodes() {
        return Err(Error::InvalidField(
            "endpoint densities must share their grid and node set".into(),
        ));
    }
    if graph.len() != mu0.num_nodes() {
        return Err(Error::InvalidField(format!(
            "densities have {} nodes but the graph has {}",
            mu0.num_nodes(),
            graph.len()
        )));
    }
    for (name, d) in [("first", mu0), ("second", mu1)] {
        if d.values().iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidField(format!(
                "the {name} endpoint must be bounded away from zero"
            )));
        }
    }
    let cells = domain.num_cells();
    let weights = domain.cell_weights();
    let components = graph.connected_components();
    let mut comp_masses = Vec::with_capacity(components.len());
    for comp in &components {
        let mass = |d: &SemiDiscreteDensity| -> f64 {
            comp.iter()
                .map(|&g| (0..cells).map(|c| weights[c] * d.values()[(c, g)]).sum::<f64>())
                .sum()
        };
        let a = mass(mu0);
        let b = mass(mu1);
        if (a - b).abs() > 1e-8 * (1.0 + a.abs().max(b.abs())) {
            let names: Vec<&str> = comp.iter().map(|&g| graph.names()[g].as_str()).collect();
            return Err(Error::Infeasible(format!(
                "exchange component {{{}}} carries mass {a} at the first endpoint \
                 but {b} at the second; no finite-action path connects them",
                names.join(", ")
            )));
        }
        comp_masses.push(0.5 * (a + b));
    }
    let t = options.t_steps;
    let problem = PathProblem {
        domain,
        graph,
        mobility,
        weights: weights.clone(),
        components,
        comp_masses,
        dt: 1.0 / t as f64,
        f0: mu0.values().clone(),
        f1: mu1.values().clone(),
    };
    // Linear interpolation of the endpoints: positive, correct component
    // masses, exactly representable in log coordinates.
    let mut us: Vec<DMatrix<f64>> = (1..t)
        .map(|k| {
            let lam = k as f64 / t as f64;
            DMatrix::from_fn(cells, graph.len(), |c, g| {
                ((1.0 - lam) * mu0.values()[(c, g)] + lam * mu1.values()[(c, g)]).ln()
            })
        })
        .collect();
    let mut eval = problem.evaluate(&us)?;
    let mut iterations = 0usize;
    let mut converged = us.is_empty();
    let mut step = 1.0;
    let mut stalls = 0usize;
    while !us.is_empty() && iterations < options.max_iterations {
        iterations += 1;
        let grads = problem.gradient(&us, &eval)?;
        let gnorm_sq: f64 = grads.iter().map(|g| g.norm_squared()).sum();
        if gnorm_sq.sqrt() <= 1e-12 * (1.0 + eval.objective.abs()) {
            converged = true;
            break;
        }
        let mut accepted = None;
        let mut tstep = step;
        for _ in 0..40 {
            let trial: Vec<DMatrix<f64>> = us
                .iter()
                .zip(&grads)
                .map(|(u, g)| u - tstep * g)
                .collect();
            match problem.evaluate(&trial) {
                Ok(cand) if cand.objective <= eval.objective - 1e-4 * tstep * gnorm_sq => {
                    accepted = Some((trial, cand, tstep));
                    break;
                }
                _ => tstep *= 0.5,
            }
        }
        match accepted {
            Some((trial, cand, used)) => {
                let drop = eval.objective - cand.objective;
                us = trial;
                eval = cand;
                step = (used * 1.5).min(1e3);
                if drop <= options.objective_tolerance * (1.0 + eval.objective.abs()) {
                    stalls += 1;
                    if stalls >= 3 {
                        converged = true;
                        break;
                    }
                } else {
                    stalls = 0;
                }
            }
            None => {
                converged = true;
                break;
            }
        }
    }
    let times: Vec<f64> = (0..=t).map(|k| k as f64 * problem.dt).collect();
    let mut densities = Vec::with_capacity(t + 1);
    densities.push(mu0.clone());
    for f in &eval.interiors {
        densities.push(SemiDiscreteDensity::new(SemiDiscreteField::new(
            domain,
            f.clone(),
        )?)?);
    }
    densities.push(mu1.clone());
    let potentials: Vec<VelocityPotentials> = eval
        .potentials
        .iter()
        .map(|p| Ok(VelocityPotentials::single(SemiDiscreteField::new(domain, p.clone())?)))
        .collect::<Result<_>>()?;
    let path = DiscretePath::new(times, densities, potentials, graph, mobility)?;
    let squared = kinetic_action(&path, graph, mobility)?;
    let max_residual = path.max_residual();
    let source_scale = eval
        .sources
        .iter()
        .map(|s| s.amax())
        .fold(0.0, f64::max);
    let certified = converged && max_residual <= options.residual_tolerance * (1.0 + source_scale);
    Ok(DynamicW2 {
        squared,
        distance: squared.max(0.0).sqrt(),
        path,
        iterations,
        converged,
        certified,
        max_residual,
    })
}

/// State of the geodesic / damped second-order dynamics: a density and a
/// single potential.
#[derive(Debug, Clone)]
pub struct HamiltonianState {
    /// Current density.
    pub density: SemiDiscreteDensity,
    /// Current potential (drives both the spatial and the graph velocity).
    pub potential: SemiDiscreteField,
}

impl HamiltonianState {
    /// Validates that the density and the potential share their layout.
    pub fn new(density: SemiDiscreteDensity, potential: SemiDiscreteField) -> Result<Self> {
        if potential.domain() != density.domain() || potential.num_nodes() != density.num_nodes()
        {
            return Err(Error::InvalidField(
                "density and potential must share their grid and node set".into(),
            ));
        }
        Ok(Self { density, potential })
    }
}

fn check_hamiltonian_inputs(state: &HamiltonianState, dt: f64, graph: &Graph) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "step size must be positive and finite, got {dt}"
        )));
    }
    if graph.len() != state.density.num_nodes() {
        return Err(Error::InvalidField(format!(
            "state has {} nodes but the graph has {}",
            state.density.num_nodes(),
            graph.len()
        )));
    }
    for g in 0..state.density.num_nodes() {
        for c in 0..state.density.domain().num_cells() {
            let v = state.density.values()[(c, g)];
            if v <= 0.0 {
                return Err(Error::InvalidField(format!(
                    "the dynamics needs a density bounded away from zero; \
                     cell {c}, node {g} carries {v}"
                )));
            }
        }
    }
    Ok(())
}

/// `1/2 |grad_x phi|^2 + 1/2 sum_{g'} (grad_g phi)^2 K d_1 theta`, the
/// Hamilton–Jacobi rate of the potential, discretized as the exact density
/// variation of the kinetic form so the continuous-time coupled system
/// conserves the discrete energy (the graph term vanishes for the
/// mass-independent mobility).
fn hamiltonian_rate(
    f: &DMatrix<f64>,
    phi: &SemiDiscreteField,
    graph: &Graph,
    mobility: &Mobility,
) -> Result<DMatrix<f64>> {
    let domain = phi.domain();
    let cells = domain.num_cells();
    let m = phi.num_nodes();
    let dx = domain.spacing();
    let weights = domain.cell_weights();
    let pv = phi.values();
    let mut rate = DMatrix::zeros(cells, m);
    // Exact variation of the face-based kinetic form with respect to the
    // density: each face deposits a quarter of its slope-squared energy on
    // both endpoint cells. (On affine data this reduces to |grad phi|^2/2
    // at every cell, boundaries included.)
    for g in 0..m {
        for axis in 0..domain.dimension() {
            for c in 0..cells {
                if let Some(nu) = domain.neighbor_up(c, axis) {
                    let slope = (pv[(nu, g)] - pv[(c, g)]) / dx;
                    let quarter = 0.25 * slope * slope * face_area(domain, c, axis) * dx;
                    rate[(c, g)] += quarter / weights[c];
                    rate[(nu, g)] += quarter / weights[nu];
                }
            }
        }
    }
    if !mobility.is_mass_independent() {
        let kernel = graph.kernel();
        let pv = phi.values();
        for g in 0..m {
            for gp in 0..m {
                if gp == g {
                    continue;
                }
                let kv = kernel[(g, gp)];
                if kv <= 0.0 {
                    continue;
                }
                for c in 0..cells {
                    let d = pv[(c, gp)] - pv[(c, g)];
                    let dth = mobility.dtheta1(c, g, gp, f[(c, g)], f[(c, gp)])?;
                    rate[(c, g)] += 0.5 * d * d * kv * dth;
                }
            }
        }
    }
    Ok(rate)
}

/// Shared forward-Euler update of the coupled system; `forcing`, when
/// present, is added to the potential rate.
fn hamiltonian_step(
    state: &HamiltonianState,
    dt: f64,
    graph: &Graph,
    mobility: &Mobility,
    forcing: Option<&DMatrix<f64>>,
) -> Result<HamiltonianState> {
    let domain = state.density.domain();
    let pots = VelocityPotentials::single(state.potential.clone());
    let div = continuity_operator(state.density.field(), &pots, graph, mobility)?;
    let f_new = state.density.values() - dt * div.values();
    for g in 0..state.density.num_nodes() {
        for c in 0..domain.num_cells() {
            let v = f_new[(c, g)];
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Numerical(format!(
                    "step produced a nonpositive density: cell {c}, node {g} \
                     reaches {v}; reduce the step size"
                )));
            }
        }
    }
    let rate = hamiltonian_rate(state.density.values(), &state.potential, graph, mobility)?;
    let mut phi_new = state.potential.values() - dt * rate;
    if let Some(extra) = forcing {
        phi_new -= dt * extra;
    }
    let density = SemiDiscreteDensity::new(SemiDiscreteField::new(domain, f_new)?)?;
    let potential = SemiDiscreteField::new(domain, phi_new)?;
    Ok(HamiltonianState { density, potential })
}

/// One forward-Euler step of the geodesic system: the density follows the
/// flux-form continuity equation with velocity potential `phi`, and `phi`
/// follows the matching Hamilton–Jacobi-type update.
///
/// Aborts with a diagnostic if the density update loses positivity.
pub fn geodesic_step(
    state: &HamiltonianState,
    dt: f64,
    graph: &Graph,
    mobility: &Mobility,
) -> Result<HamiltonianState> {
    check_hamiltonian_inputs(state, dt, graph)?;
    hamiltonian_step(state, dt, graph, mobility, None)
}

/// One forward-Euler step of the damped second-order system: the geodesic
/// update plus the forcing `-(gamma phi + log f + V)` on the potential,
/// with `log f + V` taken in its zero-quadrature-mean representative so
/// that the equilibrium density with `phi = 0` is exactly stationary.
pub fn second_order_step(
    state: &HamiltonianState,
    dt: f64,
    gamma: f64,
    pot: &PotentialPair,
    graph: &Graph,
    mobility: &Mobility,
) -> Result<HamiltonianState> {
    check_hamiltonian_inputs(state, dt, graph)?;
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "damping must be nonnegative and finite, got {gamma}"
        )));
    }
    let domain = state.density.domain();
    if pot.v().domain() != domain || pot.v().num_nodes() != state.density.num_nodes() {
        return Err(Error::InvalidField(
            "potential pair and state must share their grid and node set".into(),
        ));
    }
    let cells = domain.num_cells();
    let m = state.density.num_nodes();
    let weights = domain.cell_weights();
    let total_w: f64 = weights.iter().sum::<f64>() * m as f64;
    let mut drive = DMatrix::zeros(cells, m);
    let mut mean = 0.0;
    for g in 0..m {
        for c in 0..cells {
            let v = state.density.values()[(c, g)].ln() + pot.v().values()[(c, g)];
            drive[(c, g)] = v;
            mean += weights[c] * v;
        }
    }
    mean /= total_w;
    for g in 0..m {
        for c in 0..cells {
            drive[(c, g)] += gamma * state.potential.values()[(c, g)] - mean;
        }
    }
    hamiltonian_step(state, dt, graph, mobility, Some(&drive))
}

/// Recorded history of a geodesic or damped second-order run.
#[derive(Debug, Clone)]
pub struct HamiltonianTrajectory {
    /// Recorded times.
    pub times: Vec<f64>,
    /// Density at each recorded time.
    pub densities: Vec<SemiDiscreteDensity>,
    /// Potential at each recorded time.
    pub potentials: Vec<SemiDiscreteField>,
    /// Kinetic energy `1/2 <phi, phi>_f` at each recorded time.
    pub kinetic_energies: Vec<f64>,
    /// Relative entropy at each recorded time (filled by the damped run,
    /// which carries the confining potential; empty for geodesic runs).
    pub entropies: Vec<f64>,
}

impl HamiltonianTrajectory {
    /// Latest recorded state.
    pub fn last(&self) -> HamiltonianState {
        HamiltonianState {
            density: self
                .densities
                .last()
                .expect("trajectories are never empty")
                .clone(),
            potential: self
                .potentials
                .last()
                .expect("trajectories are never empty")
                .clone(),
        }
    }

    /// Lyapunov value kinetic + entropy at a recorded index (damped runs).
    pub fn lyapunov(&self, k: usize) -> Option<f64> {
        let e = self.entropies.get(k)?;
        let q = self.kinetic_energies.get(k)?;
        Some(e + q)
    }
}

fn record_state(
    traj: &mut HamiltonianTrajectory,
    time: f64,
    state: &HamiltonianState,
    graph: &Graph,
    mobility: &Mobility,
    pot: Option<&PotentialPair>,
) -> Result<()> {
    traj.times.push(time);
    traj.densities.push(state.density.clone());
    traj.potentials.push(state.potential.clone());
    let pots = VelocityPotentials::single(state.potential.clone());
    let q = kinetic_norm(state.density.field(), &pots, graph, mobility)?;
    traj.kinetic_energies.push(0.5 * q);
    if let Some(pot) = pot {
        traj.entropies.push(entropy(&state.density, pot)?);
    }
    Ok(())
}

fn run_hamiltonian(
    state0: &HamiltonianState,
    dt: f64,
    steps: usize,
    record_every: usize,
    graph: &Graph,
    mobility: &Mobility,
    damped: Option<(f64, &PotentialPair)>,
) -> Result<HamiltonianTrajectory> {
    if record_every == 0 {
        return Err(Error::InvalidParameter(
            "record_every must be at least 1".into(),
        ));
    }
    let mut traj = HamiltonianTrajectory {
        times: Vec::new(),
        densities: Vec::new(),
        potentials: Vec::new(),
        kinetic_energies: Vec::new(),
        entropies: Vec::new(),
    };
    let pot = damped.map(|(_, p)| p);
    record_state(&mut traj, 0.0, state0, graph, mobility, pot)?;
    let mut state = state0.clone();
    for k in 1..=steps {
        state = match damped {
            Some((gamma, pot)) => second_order_step(&state, dt, gamma, pot, graph, mobility)?,
            None => geodesic_step(&state, dt, graph, mobility)?,
        };
        if k % record_every == 0 || k == steps {
            record_state(&mut traj, k as f64 * dt, &state, graph, mobility, pot)?;
        }
    }
    Ok(traj)
}

/// Runs [`geodesic_step`] `steps` times, recording every `record_every`
/// steps (plus the initial and final states).
pub fn geodesic_run(
    state0: &HamiltonianState,
    dt: f64,
    steps: usize,
    record_every: usize,
    graph: &Graph,
    mobility: &Mobility,
) -> Result<HamiltonianTrajectory> {
    run_hamiltonian(state0, dt, steps, record_every, graph, mobility, None)
}

/// Runs [`second_order_step`] `steps` times, recording every
/// `record_every` steps (plus the initial and final states); entropies are
/// recorded alongside the kinetic energies, so [`HamiltonianTrajectory::lyapunov`]
/// is available.
#[allow(clippy::too_many_arguments)]
pub fn second_order_run(
    state0: &HamiltonianState,
    dt: f64,
    steps: usize,
    record_every: usize,
    gamma: f64,
    pot: &PotentialPair,
    graph: &Graph,
    mobility: &Mobility,
) -> Result<HamiltonianTrajectory> {
    run_hamiltonian(
        state0,
        dt,
        steps,
        record_every,
        graph,
        mobility,
        Some((gamma, pot)),
    )
}
