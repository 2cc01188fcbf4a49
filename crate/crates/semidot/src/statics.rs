//! Static transport cost between semi-discrete densities.
//!
//! A coupling between densities `mu` and `sigma` on the box-graph state
//! space consists of
//!
//! * one transport plan per node: a nonnegative matrix of masses whose
//!   row sums reproduce `mu` restricted to that node, and
//! * one antisymmetric exchange intensity per graph edge and cell.
//!
//! The pair is admissible for `(mu, sigma, tau)` when the plan column
//! sums, corrected by `tau` times the edge divergence of the exchange
//! intensity weighted by `K e^{-W}`, reproduce `sigma`. The cost adds a
//! quadratic-distance plan term at weight `1/(2 tau)` and a quadratic
//! exchange term at weight `tau/2` per unordered edge.
//!
//! [`solve_static_cost`] minimizes the cost by reducing to the per-node
//! intermediate marginals (the plan column masses): given those marginals,
//! the optimal one-dimensional plan is the monotone coupling, whose
//! marginal derivative is the dual potential read off the coupling walk,
//! and the optimal exchange intensity is an exact per-cell graph-Poisson
//! solve. The reduced convex objective is minimized by an accelerated
//! projected-gradient loop over the transportation polytope (cell sums
//! pinned per connected component, node totals pinned to the sources),
//! with the projection computed by alternating affine and cone steps.
//! [`verify_optimality`] checks necessary optimality conditions: exchange
//! intensities are discrete gradients (zero cycle sums, small
//! graph-Poisson fit residual) and plan supports are two-point cyclically
//! monotone.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{GridDomain, SemiDiscreteDensity, SemiDiscreteField};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::potentials::PotentialPair;

/// Largest cell count accepted by the dense solver. Plans are dense
/// `cells x cells` matrices, so the solver targets desk scale; evaluation
/// routines have no such limit.
pub const MAX_SOLVER_CELLS: usize = 256;

/// Mass-balance tolerance for admissibility per connected component.
pub const COMPONENT_MASS_TOL: f64 = 1e-8;

/// One transport plan per node. `plans[g][(j, i)]` is the mass moved from
/// cell `j` to cell `i` while staying on node `g`; entries are masses, not
/// densities.
#[derive(Debug, Clone)]
pub struct TransportPlanSet {
    domain: GridDomain,
    plans: Vec<DMatrix<f64>>,
}

impl TransportPlanSet {
    /// Validates shapes and nonnegativity.
    pub fn new(domain: GridDomain, plans: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = domain.num_cells();
        if plans.is_empty() {
            return Err(Error::InvalidField("a plan set needs at least one node".into()));
        }
        for (g, p) in plans.iter().enumerate() {
            if p.nrows() != n || p.ncols() != n {
                return Err(Error::InvalidField(format!(
                    "plan {g} is {}x{}, expected {n}x{n}",
                    p.nrows(),
                    p.ncols()
                )));
            }
            if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::InvalidField(format!(
                    "plan {g} has a negative or non-finite entry {v}"
                )));
            }
        }
        Ok(Self { domain, plans })
    }

    /// Diagonal plans that keep every cell of `mu` in place.
    pub fn identity(mu: &SemiDiscreteDensity) -> Self {
        let domain = mu.domain();
        let weights = domain.cell_weights();
        let n = domain.num_cells();
        let plans = (0..mu.num_nodes())
            .map(|g| {
                DMatrix::from_fn(n, n, |j, i| {
                    if j == i {
                        mu.values()[(j, g)] * weights[j]
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        Self { domain, plans }
    }

    pub fn domain(&self) -> GridDomain {
        self.domain
    }

    pub fn num_nodes(&self) -> usize {
        self.plans.len()
    }

    pub fn plan(&self, g: usize) -> &DMatrix<f64> {
        &self.plans[g]
    }

    pub fn plan_mut(&mut self, g: usize) -> &mut DMatrix<f64> {
        &mut self.plans[g]
    }

    /// Row masses of plan `g`: total mass leaving each source cell.
    pub fn row_masses(&self, g: usize) -> DVector<f64> {
        let p = &self.plans[g];
        DVector::from_fn(p.nrows(), |j, _| p.row(j).sum())
    }

    /// Column masses of plan `g`: total mass arriving at each target cell.
    pub fn column_masses(&self, g: usize) -> DVector<f64> {
        let p = &self.plans[g];
        DVector::from_fn(p.ncols(), |i, _| p.column(i).sum())
    }

    /// Density field recovered from the row masses.
    pub fn source_density(&self) -> Result<SemiDiscreteField> {
        let weights = self.domain.cell_weights();
        let n = self.domain.num_cells();
        let vals = DMatrix::from_fn(n, self.plans.len(), |j, g| {
            self.plans[g].row(j).sum() / weights[j]
        });
        SemiDiscreteField::new(self.domain, vals)
    }

    /// Density field recovered from the column masses (before the exchange
    /// correction).
    pub fn column_density(&self) -> Result<SemiDiscreteField> {
        let weights = self.domain.cell_weights();
        let n = self.domain.num_cells();
        let vals = DMatrix::from_fn(n, self.plans.len(), |i, g| {
            self.plans[g].column(i).sum() / weights[i]
        });
        SemiDiscreteField::new(self.domain, vals)
    }

    /// Mean target coordinate along `axis` of the mass leaving cell `j` on
    /// node `g`; falls back to the source coordinate when the row carries
    /// no mass.
    pub fn column_barycenter(&self, g: usize, j: usize, axis: usize) -> f64 {
        let p = &self.plans[g];
        let total: f64 = p.row(j).sum();
        if total <= 0.0 {
            return self.domain.coords(j)[axis];
        }
        let mut acc = 0.0;
        for i in 0..p.ncols() {
            acc += p[(j, i)] * self.domain.coords(i)[axis];
        }
        acc / total
    }
}

/// Antisymmetric exchange intensities: one value per cell and unordered
/// edge `(g, g')` with `g < g'`; the reverse orientation carries the
/// negated value. Positive values move mass from the lower-indexed node to
/// the higher-indexed one.
#[derive(Debug, Clone)]
pub struct ExchangeField {
    domain: GridDomain,
    edges: Vec<(usize, usize)>,
    values: DMatrix<f64>,
}

impl ExchangeField {
    /// Zero intensities on the positive-weight edges of `graph`.
    pub fn zeros(domain: GridDomain, graph: &Graph) -> Self {
        let edges: Vec<(usize, usize)> = graph.edges().map(|(a, b, _)| (a, b)).collect();
        let values = DMatrix::zeros(domain.num_cells(), edges.len());
        Self {
            domain,
            edges,
            values,
        }
    }

    /// Builds from per-edge values laid out as `cells x edges` in the
    /// order of [`Graph::edges`].
    pub fn new(domain: GridDomain, graph: &Graph, values: DMatrix<f64>) -> Result<Self> {
        let edges: Vec<(usize, usize)> = graph.edges().map(|(a, b, _)| (a, b)).collect();
        if values.nrows() != domain.num_cells() || values.ncols() != edges.len() {
            return Err(Error::InvalidField(format!(
                "exchange values are {}x{}, expected {}x{}",
                values.nrows(),
                values.ncols(),
                domain.num_cells(),
                edges.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidField(format!(
                "exchange value {v} is not finite"
            )));
        }
        Ok(Self {
            domain,
            edges,
            values,
        })
    }

    pub fn domain(&self) -> GridDomain {
        self.domain
    }

    /// Unordered edges `(g, g')` with `g < g'`, in storage order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.values
    }

    /// Storage index and orientation sign of the ordered pair `(g, gp)`.
    pub fn edge_index(&self, g: usize, gp: usize) -> Option<(usize, f64)> {
        self.edges.iter().position(|&(a, b)| (a, b) == (g.min(gp), g.max(gp))).map(|e| {
            if g < gp {
                (e, 1.0)
            } else {
                (e, -1.0)
            }
        })
    }

    /// Dense antisymmetric `m x m` matrix of intensities at cell `i`.
    pub fn matrix_at(&self, i: usize, num_nodes: usize) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(num_nodes, num_nodes);
        for (e, &(a, b)) in self.edges.iter().enumerate() {
            h[(a, b)] = self.values[(i, e)];
            h[(b, a)] = -self.values[(i, e)];
        }
        h
    }
}

/// A plan set together with an exchange field on the same domain.
#[derive(Debug, Clone)]
pub struct AdmissiblePair {
    pub plans: TransportPlanSet,
    pub exchange: ExchangeField,
}

impl AdmissiblePair {
    pub fn new(plans: TransportPlanSet, exchange: ExchangeField) -> Result<Self> {
        if plans.domain() != exchange.domain() {
            return Err(Error::InvalidField(
                "plan set and exchange field live on different domains".into(),
            ));
        }
        Ok(Self { plans, exchange })
    }

    /// The density this pair transports `mu` onto: plan column masses per
    /// cell weight minus `tau` times the weighted edge divergence of the
    /// exchange intensities.
    pub fn induced_target(
        &self,
        tau: f64,
        pot: &PotentialPair,
        graph: &Graph,
    ) -> Result<SemiDiscreteField> {
        let domain = self.plans.domain();
        let m = self.plans.num_nodes();
        let weights = domain.cell_weights();
        let div = exchange_divergence(&self.exchange, pot, graph)?;
        let vals = DMatrix::from_fn(domain.num_cells(), m, |i, g| {
            self.plans.plan(g).column(i).sum() / weights[i] - tau * div[(i, g)]
        });
        SemiDiscreteField::new(domain, vals)
    }
}

/// Weighted edge divergence of an exchange field: at `(i, g)` the sum of
/// `K(g, g') e^{-W(x_i)}` times the intensity oriented out of `g`.
pub fn exchange_divergence(
    exchange: &ExchangeField,
    pot: &PotentialPair,
    graph: &Graph,
) -> Result<DMatrix<f64>> {
    let domain = exchange.domain();
    let n = domain.num_cells();
    let m = graph.len();
    if pot.v().domain() != domain {
        return Err(Error::InvalidField(
            "potentials and exchange field live on different domains".into(),
        ));
    }
    let kernel = graph.kernel();
    let mut out = DMatrix::zeros(n, m);
    for (e, &(a, b)) in exchange.edges().iter().enumerate() {
        let k = kernel[(a, b)];
        for i in 0..n {
            let flow = exchange.values()[(i, e)] * k * pot.exp_neg_w()[i];
            out[(i, a)] += flow;
            out[(i, b)] -= flow;
        }
    }
    Ok(out)
}

/// Weight applied to the plan term of the cost: either one, or one copy
/// per node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlanTermWeight {
    #[default]
    One,
    PerNode,
}

impl PlanTermWeight {
    pub fn factor(self, num_nodes: usize) -> f64 {
        match self {
            PlanTermWeight::One => 1.0,
            PlanTermWeight::PerNode => num_nodes as f64,
        }
    }
}

/// Squared Euclidean distances between cell centers.
pub fn squared_distances(domain: GridDomain) -> DMatrix<f64> {
    let n = domain.num_cells();
    DMatrix::from_fn(n, n, |j, i| {
        let xj = domain.coords(j);
        let xi = domain.coords(i);
        xj.iter()
            .zip(xi.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    })
}

pub(crate) fn check_problem_shapes(
    domain: GridDomain,
    num_nodes: usize,
    pot: &PotentialPair,
    graph: &Graph,
) -> Result<()> {
    if pot.v().domain() != domain {
        return Err(Error::InvalidField(
            "potentials live on a different domain".into(),
        ));
    }
    if pot.v().num_nodes() != num_nodes || graph.len() != num_nodes {
        return Err(Error::InvalidField(format!(
            "node counts disagree: {} fields, {} potentials, {} graph nodes",
            num_nodes,
            pot.v().num_nodes(),
            graph.len()
        )));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "time scale tau must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

/// Cost of a pair: `weight/(2 tau)` times the distance-weighted plan mass
/// plus `tau/2` times the `K e^{-W}`-weighted square of the exchange
/// intensities, summed over unordered edges and integrated over cells.
pub fn cost_of_pair(
    pair: &AdmissiblePair,
    tau: f64,
    pot: &PotentialPair,
    graph: &Graph,
    plan_weight: PlanTermWeight,
) -> Result<f64> {
    check_tau(tau)?;
    let domain = pair.plans.domain();
    let m = pair.plans.num_nodes();
    check_problem_shapes(domain, m, pot, graph)?;
    let d2 = squared_distances(domain);
    let mut plan_term = 0.0;
    for g in 0..m {
        plan_term += pair.plans.plan(g).dot(&d2);
    }
    plan_term *= plan_weight.factor(m) / (2.0 * tau);
    let weights = domain.cell_weights();
    let kernel = graph.kernel();
    let mut exch_term = 0.0;
    for (e, &(a, b)) in pair.exchange.edges().iter().enumerate() {
        let k = kernel[(a, b)];
        for i in 0..domain.num_cells() {
            let h = pair.exchange.values()[(i, e)];
            exch_term += h * h * k * pot.exp_neg_w()[i] * weights[i];
        }
    }
    exch_term *= 0.5 * tau;
    Ok(plan_term + exch_term)
}

/// Sup-norm admissibility defect of a pair for `(mu, sigma, tau)`, in
/// density units: the worst row-marginal deviation from `mu` and induced
/// target deviation from `sigma`.
pub fn feasibility_residual(
    pair: &AdmissiblePair,
    mu: &SemiDiscreteDensity,
    sigma: &SemiDiscreteDensity,
    tau: f64,
    pot: &PotentialPair,
    graph: &Graph,
) -> Result<f64> {
    check_tau(tau)?;
    let domain = pair.plans.domain();
    let m = pair.plans.num_nodes();
    check_problem_shapes(domain, m, pot, graph)?;
    if mu.domain() != domain || sigma.domain() != domain {
        return Err(Error::InvalidField(
            "densities live on a different domain".into(),
        ));
    }
    if mu.num_nodes() != m || sigma.num_nodes() != m {
        return Err(Error::InvalidField("density node counts disagree".into()));
    }
    let weights = domain.cell_weights();
    let mut worst = 0.0f64;
    for g in 0..m {
        for j in 0..domain.num_cells() {
            let row = pair.plans.plan(g).row(j).sum() / weights[j];
            worst = worst.max((row - mu.values()[(j, g)]).abs());
        }
    }
    let induced = pair.induced_target(tau, pot, graph)?;
    for g in 0..m {
        for i in 0..domain.num_cells() {
            worst = worst.max((induced.values()[(i, g)] - sigma.values()[(i, g)]).abs());
        }
    }
    Ok(worst)
}

/// Checks that `mu` and `sigma` agree in mass on every connected component
/// of the graph; only exchange along positive-weight edges can move mass
/// between nodes.
pub fn check_component_balance(
    mu: &SemiDiscreteDensity,
    sigma: &SemiDiscreteDensity,
    graph: &Graph,
) -> Result<()> {
    let mu_masses = mu.node_masses();
    let sigma_masses = sigma.node_masses();
    for comp in graph.connected_components() {
        let a: f64 = comp.iter().map(|&g| mu_masses[g]).sum();
        let b: f64 = comp.iter().map(|&g| sigma_masses[g]).sum();
        if (a - b).abs() > COMPONENT_MASS_TOL * (1.0 + a.abs().max(b.abs())) {
            let names: Vec<&str> = comp.iter().map(|&g| graph.names()[g].as_str()).collect();
            return Err(Error::Infeasible(format!(
                "component {{{}}} carries mass {a} in the source but {b} in the target",
                names.join(", ")
            )));
        }
    }
    Ok(())
}

/// Options for [`solve_static_cost`].
#[derive(Debug, Clone)]
pub struct StaticOptions {
    /// Weight of the plan term in the cost.
    pub plan_weight: PlanTermWeight,
    /// Total budget of plan-block gradient steps.
    pub max_iterations: usize,
    /// Relative objective stall declaring convergence.
    pub objective_tolerance: f64,
    /// Sup-norm admissibility defect (density units) required for
    /// convergence.
    pub feasibility_tolerance: f64,
}

impl Default for StaticOptions {
    fn default() -> Self {
        Self {
            plan_weight: PlanTermWeight::One,
            max_iterations: 50_000,
            objective_tolerance: 1e-10,
            feasibility_tolerance: 1e-9,
        }
    }
}

/// Result of [`solve_static_cost`].
#[derive(Debug, Clone)]
pub struct StaticSolution {
    pub pair: AdmissiblePair,
    /// Cost of the returned pair.
    pub cost: f64,
    /// Plan-block gradient steps consumed.
    pub iterations: usize,
    /// Whether both the feasibility and objective-stall criteria were met.
    pub converged: bool,
    /// Final admissibility defect in density units.
    pub feasibility: f64,
}

/// Monotone (northwest-corner) coupling between two nonnegative mass
/// vectors of equal total, walked in flat cell order.
pub(crate) fn monotone_plan(source: &DVector<f64>, target: &DVector<f64>) -> DMatrix<f64> {
    let n = source.len();
    let mut plan = DMatrix::zeros(n, n);
    let mut j = 0;
    let mut i = 0;
    let mut remaining_src = source[0];
    let mut remaining_tgt = target[0];
    while j < n && i < n {
        let m = remaining_src.min(remaining_tgt);
        if m > 0.0 {
            plan[(j, i)] += m;
        }
        remaining_src -= m;
        remaining_tgt -= m;
        if remaining_src <= remaining_tgt {
            j += 1;
            if j < n {
                remaining_src = source[j];
            }
        } else {
            i += 1;
            if i < n {
                remaining_tgt = target[i];
            }
        }
    }
    plan
}

/// Monotone-coupling value together with its target-side dual potential.
pub(crate) struct MonotoneDuals {
    pub(crate) cost: f64,
    /// One potential value per target cell: the derivative of the coupling
    /// cost with respect to the target mass (up to a shared constant).
    pub(crate) psi: Vec<f64>,
}

/// Walks the monotone coupling between mass vectors `a` and `b` of equal
/// total and propagates Kantorovich potentials along the staircase. For
/// costs satisfying the Monge condition (squared distance on a line does)
/// the resulting potentials are dual feasible, so `psi` is a subgradient
/// of the coupling cost in the target masses.
pub(crate) fn monotone_walk_duals(a: &[f64], b: &[f64], cost: impl Fn(usize, usize) -> f64) -> MonotoneDuals {
    let n = a.len();
    let mut total = 0.0;
    let mut phi = vec![0.0f64; n];
    let mut psi = vec![0.0f64; n];
    let mut j = 0;
    let mut i = 0;
    let mut ra = a[0];
    let mut rb = b[0];
    phi[0] = cost(0, 0);
    // psi[0] = 0 fixes the dual constant.
    loop {
        let mass = ra.min(rb).max(0.0);
        total += mass * cost(j, i);
        ra -= mass;
        rb -= mass;
        if ra <= rb {
            j += 1;
            if j >= n {
                break;
            }
            ra = a[j];
            phi[j] = cost(j, i) - psi[i];
        } else {
            i += 1;
            if i >= n {
                break;
            }
            rb = b[i];
            psi[i] = cost(j, i) - phi[j];
        }
    }
    MonotoneDuals { cost: total, psi }
}

/// Euclidean projection onto a transportation polytope: entries
/// nonnegative, row sums and column sums pinned. Rows and columns are
/// affine sets, so a Boyle-Dykstra cycle with a memory term on the cone
/// converges to the exact projection.
fn project_transportation(
    block: &mut DMatrix<f64>,
    row_targets: &[f64],
    col_targets: &[f64],
) {
    let (rows, cols) = block.shape();
    if cols == 1 {
        for r in 0..rows {
            block[(r, 0)] = row_targets[r].max(0.0);
        }
        return;
    }
    let mut memory = DMatrix::<f64>::zeros(rows, cols);
    let scale = 1.0
        + row_targets.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        + block.abs().max();
    for _ in 0..2000 {
        let before = block.clone();
        for r in 0..rows {
            let excess = (block.row(r).sum() - row_targets[r]) / cols as f64;
            for c in 0..cols {
                block[(r, c)] -= excess;
            }
        }
        for c in 0..cols {
            let excess = (block.column(c).sum() - col_targets[c]) / rows as f64;
            for r in 0..rows {
                block[(r, c)] -= excess;
            }
        }
        let mut change = 0.0f64;
        for r in 0..rows {
            for c in 0..cols {
                let t = block[(r, c)] + memory[(r, c)];
                let clamped = t.max(0.0);
                memory[(r, c)] = t - clamped;
                block[(r, c)] = clamped;
                change = change.max((clamped - before[(r, c)]).abs());
            }
        }
        if change <= 1e-14 * scale {
            break;
        }
    }
}

/// Result of [`accelerated_minimize`].
pub(crate) struct MinimizeOutcome {
    pub x: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Accelerated projected-gradient descent with adaptive restart and a
/// backtracking test enforcing the quadratic majorization (so the
/// acceleration is sound). `evaluate` returns the objective value and its
/// gradient, or `None` outside the objective's domain, which the line
/// search treats as an infinite value; the start must be feasible with a
/// finite value. Declares convergence on a sustained relative objective
/// stall or once iterates stop moving.
pub(crate) fn accelerated_minimize(
    start: DMatrix<f64>,
    project: impl Fn(&mut DMatrix<f64>),
    evaluate: impl Fn(&DMatrix<f64>) -> Option<(f64, DMatrix<f64>)>,
    opts: &StaticOptions,
) -> MinimizeOutcome {
    let mut iterations = 0usize;
    let mut converged = false;
    let mut step = 1.0f64;
    let mut x = start;
    let Some((mut f_x, _)) = evaluate(&x) else {
        return MinimizeOutcome {
            x,
            iterations,
            converged,
        };
    };
    let mut x_prev = x.clone();
    let mut momentum = 1.0f64;
    let mut stall = 0usize;
    let mut tiny_moves = 0usize;
    while iterations < opts.max_iterations {
        iterations += 1;
        let accel =
            (momentum - 1.0) / (0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()));
        let mut v = &x + (&x - &x_prev) * accel;
        project(&mut v);
        // An extrapolation outside the domain falls back to the incumbent.
        let (v, f_v, grad_v) = match evaluate(&v) {
            Some((f, g)) => (v, f, g),
            None => {
                momentum = 1.0;
                let (f, g) = evaluate(&x).expect("incumbent must stay feasible");
                (x.clone(), f, g)
            }
        };
        let mut halved = false;
        let mut cand;
        let mut f_cand;
        loop {
            cand = &v - &grad_v * step;
            project(&mut cand);
            let delta = &cand - &v;
            let linear = grad_v
                .iter()
                .zip(delta.iter())
                .map(|(g, d)| g * d)
                .sum::<f64>();
            let quad = delta.iter().map(|d| d * d).sum::<f64>() / (2.0 * step);
            f_cand = match evaluate(&cand) {
                Some((f, _)) => f,
                None => f64::INFINITY,
            };
            if f_cand <= f_v + linear + quad + 1e-14 * (1.0 + f_v.abs()) {
                break;
            }
            step *= 0.5;
            halved = true;
            if step < 1e-16 {
                break;
            }
        }
        // Restart the momentum when the accelerated step overshoots; fall
        // back to a plain step from the incumbent.
        if f_cand > f_x {
            momentum = 1.0;
            let plain = {
                let grad_x = evaluate(&x).expect("incumbent must stay feasible").1;
                let mut t = &x - &grad_x * step;
                project(&mut t);
                t
            };
            let f_plain = match evaluate(&plain) {
                Some((f, _)) => f,
                None => f64::INFINITY,
            };
            if f_plain <= f_x {
                let drop = f_x - f_plain;
                x_prev = x.clone();
                x = plain;
                f_x = f_plain;
                if drop <= opts.objective_tolerance * (1.0 + f_x.abs()) {
                    stall += 1;
                } else {
                    stall = 0;
                }
            } else {
                // Even the unaccelerated step fails: the step length is too
                // long for the local curvature. Shrink and retry.
                step *= 0.5;
                stall += 1;
                if step < 1e-16 || stall >= 30 {
                    converged = true;
                    break;
                }
                continue;
            }
        } else {
            momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            x_prev = std::mem::replace(&mut x, cand);
            let drop = f_x - f_cand;
            f_x = f_cand;
            if drop <= opts.objective_tolerance * (1.0 + f_x.abs()) {
                stall += 1;
            } else {
                stall = 0;
            }
        }
        if !halved {
            step *= 1.2;
        }
        let moved = (&x - &x_prev).abs().max();
        if moved <= 1e-15 * (1.0 + x.abs().max()) {
            tiny_moves += 1;
        } else {
            tiny_moves = 0;
        }
        if stall >= 30 || tiny_moves >= 5 {
            converged = true;
            break;
        }
    }
    MinimizeOutcome {
        x,
        iterations,
        converged,
    }
}

/// Minimizes the static cost over pairs admissible for `(mu, sigma, tau)`
/// on one-dimensional grids.
///
/// The search space is reduced to the per-node intermediate marginals
/// `nu_g` (the plan column masses): given `nu`, the optimal plan on a line
/// is the monotone coupling and the optimal exchange intensities solve a
/// small linear system per cell, with the continuity constraint satisfied
/// identically. The reduced objective is convex and continuously
/// differentiable in `nu` (its plan gradient is the Kantorovich potential
/// of the monotone coupling, its exchange gradient the node potential),
/// and the constraint set is a transportation polytope per connected
/// component, handled by projected gradient steps with a monotone line
/// search. Non-convergence within the iteration budget is reported
/// through the `converged` flag, not as an error.
pub fn solve_static_cost(
    mu: &SemiDiscreteDensity,
    sigma: &SemiDiscreteDensity,
    tau: f64,
    pot: &PotentialPair,
    graph: &Graph,
    opts: &StaticOptions,
) -> Result<StaticSolution> {
    check_tau(tau)?;
    let domain = mu.domain();
    let m = mu.num_nodes();
    check_problem_shapes(domain, m, pot, graph)?;
    if sigma.domain() != domain || sigma.num_nodes() != m {
        return Err(Error::InvalidField(
            "source and target densities disagree in shape".into(),
        ));
    }
    if domain.dimension() != 1 {
        return Err(Error::InvalidParameter(
            "the static solver supports one-dimensional grids only; \
             evaluation routines accept any dimension"
                .into(),
        ));
    }
    let n = domain.num_cells();
    if n > MAX_SOLVER_CELLS {
        return Err(Error::InvalidParameter(format!(
            "the dense solver accepts at most {MAX_SOLVER_CELLS} cells, got {n}"
        )));
    }
    check_component_balance(mu, sigma, graph)?;

    let weights = domain.cell_weights();
    let kernel = graph.kernel();
    let edges: Vec<(usize, usize)> = graph.edges().map(|(a, b, _)| (a, b)).collect();
    let plan_factor = opts.plan_weight.factor(m) / (2.0 * tau);
    let xs: Vec<f64> = (0..n).map(|i| domain.coords(i)[0]).collect();
    let pair_cost = |j: usize, i: usize| plan_factor * (xs[j] - xs[i]) * (xs[j] - xs[i]);

    // Source masses and their per-node totals.
    let src: Vec<Vec<f64>> = (0..m)
        .map(|g| (0..n).map(|j| mu.values()[(j, g)] * weights[j]).collect())
        .collect();
    let src_totals: Vec<f64> = src.iter().map(|a| a.iter().sum()).collect();

    // Components with at least one edge carry free marginals; singleton
    // components are pinned to the (mass-corrected) target.
    let components = graph.connected_components();
    // Per-cell pinned component sums of nu: exchange moves mass between
    // nodes at fixed position, so these are invariant.
    let comp_cell_sum = |ci: usize, i: usize| -> f64 {
        components[ci]
            .iter()
            .map(|&g| sigma.values()[(i, g)] * weights[i])
            .sum()
    };

    // Feasible start: the target masses themselves, then projected so the
    // per-node totals match the source.
    let mut nu = DMatrix::from_fn(n, m, |i, g| sigma.values()[(i, g)] * weights[i]);
    let project = |nu: &mut DMatrix<f64>| {
        for (ci, comp) in components.iter().enumerate() {
            let rows: Vec<f64> = (0..n).map(|i| comp_cell_sum(ci, i)).collect();
            let cols: Vec<f64> = comp.iter().map(|&g| src_totals[g]).collect();
            let mut block = DMatrix::from_fn(n, comp.len(), |i, c| nu[(i, comp[c])]);
            project_transportation(&mut block, &rows, &cols);
            for (c, &g) in comp.iter().enumerate() {
                for i in 0..n {
                    nu[(i, g)] = block[(i, c)];
                }
            }
        }
    };
    project(&mut nu);

    // Per-component kernel Laplacian factorizations (with a rank-one shift
    // killing the constant nullspace), reused at every cell.
    let comp_factors: Vec<Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>> = components
        .iter()
        .map(|comp| {
            let k = comp.len();
            if k < 2 {
                return None;
            }
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
            let shift = DMatrix::from_element(k, k, 1.0 / k as f64);
            (lap + shift).cholesky()
        })
        .collect();

    // Reduced objective, its gradient, and the node potentials.
    struct Eval {
        value: f64,
        grad: DMatrix<f64>,
        potentials: DMatrix<f64>,
    }
    let evaluate = |nu: &DMatrix<f64>| -> Eval {
        let mut value = 0.0;
        let mut grad = DMatrix::<f64>::zeros(n, m);
        // Plan part: monotone coupling per node, dual potential as
        // gradient. Rescale the target to the exact source total so the
        // walk is well defined under projection roundoff.
        for g in 0..m {
            let total: f64 = nu.column(g).sum();
            let scale = if total > 0.0 { src_totals[g] / total } else { 1.0 };
            let b: Vec<f64> = (0..n).map(|i| nu[(i, g)] * scale).collect();
            let duals = monotone_walk_duals(&src[g], &b, pair_cost);
            value += duals.cost;
            for i in 0..n {
                grad[(i, g)] = duals.psi[i];
            }
        }
        // Exchange part: per cell and component, y solves
        // L_K y = (nu/w - sigma) / (tau e^{-W}) and contributes
        // (tau/2) e^{-W} w y^T L_K y; the gradient is y itself.
        let mut potentials = DMatrix::<f64>::zeros(n, m);
        for (ci, comp) in components.iter().enumerate() {
            let Some(factor) = &comp_factors[ci] else {
                continue;
            };
            let k = comp.len();
            for i in 0..n {
                let e = pot.exp_neg_w()[i];
                let d = DVector::from_fn(k, |c, _| {
                    (nu[(i, comp[c])] / weights[i] - sigma.values()[(i, comp[c])]) / (tau * e)
                });
                // Solutions of the shifted system with zero-mean data have
                // zero mean, so they solve the Laplacian system.
                let mean = d.sum() / k as f64;
                let d0 = d.map(|v| v - mean);
                let y = factor.solve(&d0);
                let mut quad = 0.0;
                for c in 0..k {
                    quad += y[c] * d0[c];
                }
                value += 0.5 * tau * e * weights[i] * quad;
                for (c, &g) in comp.iter().enumerate() {
                    potentials[(i, g)] = y[c];
                    grad[(i, g)] += y[c];
                }
            }
        }
        Eval {
            value,
            grad,
            potentials,
        }
    };

    // With no edges the marginals are fully pinned by the projection;
    // otherwise run the accelerated projected-gradient loop.
    let mut iterations = 0usize;
    let mut converged = edges.is_empty();
    if !edges.is_empty() {
        let outcome = accelerated_minimize(
            nu,
            &project,
            |z: &DMatrix<f64>| {
                let e = evaluate(z);
                Some((e.value, e.grad))
            },
            opts,
        );
        nu = outcome.x;
        iterations = outcome.iterations;
        converged = outcome.converged;
    }
    let current = evaluate(&nu);

    // Assemble the pair: monotone plans onto the final marginals and
    // gradient intensities from the node potentials.
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
    for (e, &(a, b)) in edges.iter().enumerate() {
        for i in 0..n {
            h[(i, e)] = current.potentials[(i, a)] - current.potentials[(i, b)];
        }
    }
    let exchange = ExchangeField::new(domain, graph, h)?;
    let plans = TransportPlanSet::new(domain, plans)?;
    let pair = AdmissiblePair::new(plans, exchange)?;
    let cost = cost_of_pair(&pair, tau, pot, graph, opts.plan_weight)?;
    let feasibility = feasibility_residual(&pair, mu, sigma, tau, pot, graph)?;
    Ok(StaticSolution {
        pair,
        cost,
        iterations,
        converged: converged && feasibility <= opts.feasibility_tolerance,
        feasibility,
    })
}

/// Necessary-condition audit of a pair returned by the solver.
#[derive(Debug, Clone)]
pub struct OptimalityReport {
    /// Worst triangle cycle sum of the exchange intensities, relative to
    /// the intensity scale.
    pub cycle_defect: f64,
    /// Worst relative residual of the least-squares discrete-gradient fit
    /// to the exchange intensities.
    pub gradient_residual: f64,
    /// Worst two-point cyclical-monotonicity violation of the plan
    /// supports, relative to the squared diameter.
    pub monotonicity_defect: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Checks necessary optimality conditions: at a minimizer the exchange
/// intensities form a discrete gradient in every cell (zero cycle sums,
/// vanishing Poisson fit residual) and every plan support is two-point
/// cyclically monotone for the squared distance.
pub fn verify_optimality(
    pair: &AdmissiblePair,
    graph: &Graph,
    tolerance: f64,
) -> Result<OptimalityReport> {
    let domain = pair.plans.domain();
    let m = pair.plans.num_nodes();
    if graph.len() != m {
        return Err(Error::InvalidField("graph and plan node counts disagree".into()));
    }
    let n = domain.num_cells();
    let kernel = graph.kernel();
    let h_scale = pair.exchange.values().abs().max().max(1e-14);

    // Triangle cycle sums.
    let mut cycle_defect = 0.0f64;
    let mut triangles: Vec<(usize, usize, usize)> = Vec::new();
    for a in 0..m {
        for b in (a + 1)..m {
            if kernel[(a, b)] <= 0.0 {
                continue;
            }
            for c in (b + 1)..m {
                if kernel[(b, c)] > 0.0 && kernel[(a, c)] > 0.0 {
                    triangles.push((a, b, c));
                }
            }
        }
    }
    for &(a, b, c) in &triangles {
        let (eab, _) = pair.exchange.edge_index(a, b).unwrap();
        let (ebc, _) = pair.exchange.edge_index(b, c).unwrap();
        let (eac, _) = pair.exchange.edge_index(a, c).unwrap();
        for i in 0..n {
            let v = pair.exchange.values();
            let cyc = v[(i, eab)] + v[(i, ebc)] - v[(i, eac)];
            cycle_defect = cycle_defect.max(cyc.abs() / h_scale);
        }
    }

    // Least-squares discrete-gradient fit per cell and component.
    let components = graph.connected_components();
    let mut gradient_residual = 0.0f64;
    for i in 0..n {
        let hmat = pair.exchange.matrix_at(i, m);
        let mut num = 0.0;
        let mut den = 0.0;
        for comp in &components {
            if comp.len() < 2 {
                continue;
            }
            let size = comp.len();
            let mut lap = DMatrix::<f64>::zeros(size, size);
            let mut rhs = DVector::<f64>::zeros(size);
            for (p, &g) in comp.iter().enumerate() {
                for (qi, &gp) in comp.iter().enumerate() {
                    if g == gp {
                        continue;
                    }
                    let k = kernel[(g, gp)];
                    if k <= 0.0 {
                        continue;
                    }
                    lap[(p, p)] += k;
                    lap[(p, qi)] -= k;
                    rhs[p] -= k * hmat[(g, gp)];
                }
            }
            let shift = DMatrix::from_element(size, size, 1.0 / size as f64);
            let psi = (lap + shift)
                .lu()
                .solve(&rhs)
                .unwrap_or_else(|| DVector::zeros(size));
            for (p, &g) in comp.iter().enumerate() {
                for (qi, &gp) in comp.iter().enumerate() {
                    if g < gp && kernel[(g, gp)] > 0.0 {
                        let fit = psi[qi] - psi[p];
                        num += kernel[(g, gp)] * (hmat[(g, gp)] - fit).powi(2);
                        den += kernel[(g, gp)] * hmat[(g, gp)].powi(2);
                    }
                }
            }
        }
        if den > 1e-28 {
            gradient_residual = gradient_residual.max((num / den).sqrt());
        } else {
            gradient_residual = gradient_residual.max(num.sqrt() / h_scale);
        }
    }

    // Two-point cyclical monotonicity on the heaviest support atoms.
    let d2 = squared_distances(domain);
    let d2_max = d2.max().max(1e-14);
    let mut monotonicity_defect = 0.0f64;
    for g in 0..m {
        let p = pair.plans.plan(g);
        let mass_floor = p.max() * 1e-10;
        let mut atoms: Vec<(usize, usize, f64)> = Vec::new();
        for j in 0..n {
            for i in 0..n {
                if p[(j, i)] > mass_floor {
                    atoms.push((j, i, p[(j, i)]));
                }
            }
        }
        atoms.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
        atoms.truncate(48);
        for (k1, &(j1, i1, _)) in atoms.iter().enumerate() {
            for &(j2, i2, _) in atoms.iter().skip(k1 + 1) {
                let direct = d2[(j1, i1)] + d2[(j2, i2)];
                let swapped = d2[(j1, i2)] + d2[(j2, i1)];
                monotonicity_defect = monotonicity_defect.max((direct - swapped) / d2_max);
            }
        }
    }
    monotonicity_defect = monotonicity_defect.max(0.0);

    let pass = cycle_defect <= tolerance
        && gradient_residual <= tolerance
        && monotonicity_defect <= tolerance;
    Ok(OptimalityReport {
        cycle_defect,
        gradient_residual,
        monotonicity_defect,
        tolerance,
        pass,
    })
}
