//! Finite weighted graphs and first-order calculus on them.
//!
//! A [`Graph`] is a finite node set together with a symmetric, nonnegative
//! edge kernel `K` with zero diagonal. Node functions are represented as
//! [`NodeField`] vectors and edge functions as [`EdgeField`] matrices
//! indexed `(row, col) = (g, g')`.
//!
//! The calculus follows the usual discrete conventions:
//!
//! * gradient: `(grad phi)(g, g') = phi(g') - phi(g)`;
//! * divergence: `(div h)(g) = sum_{g'} (h(g, g') - h(g', g)) K(g, g')`;
//! * integration by parts:
//!   `sum_g (div h)(g) phi(g) = - sum_{g, g'} h(g, g') (grad phi)(g, g') K(g, g')`.
//!
//! For a symmetric edge weight `S`, the weighted Laplacian `L_S` defined by
//! `(L_S eta)(g) = 2 sum_{g'} S(g, g') K(g, g') (eta(g) - eta(g'))`
//! satisfies `div(S grad eta) = -L_S eta`, so the discrete Poisson problem
//! `div(S grad eta) = rho` is solved by `L_S eta = -rho` on zero-mean
//! functions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar function on graph nodes.
pub type NodeField = DVector<f64>;
/// Scalar function on ordered node pairs, indexed `(g, g')`.
pub type EdgeField = DMatrix<f64>;

/// Relative tolerance used when validating symmetry and zero diagonals.
const VALIDATION_TOL: f64 = 1e-12;

/// JSON shape of a graph: `{"nodes": [...], "K": [[...], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    nodes: Vec<String>,
    #[serde(rename = "K")]
    kernel: Vec<Vec<f64>>,
}

impl From<Graph> for RawGraph {
    fn from(g: Graph) -> Self {
        let m = g.len();
        RawGraph {
            nodes: g.names,
            kernel: (0..m)
                .map(|a| (0..m).map(|b| g.kernel[(a, b)]).collect())
                .collect(),
        }
    }
}

impl TryFrom<RawGraph> for Graph {
    type Error = Error;

    fn try_from(raw: RawGraph) -> Result<Self> {
        let m = raw.nodes.len();
        if raw.kernel.len() != m || raw.kernel.iter().any(|row| row.len() != m) {
            return Err(Error::InvalidGraph(format!(
                "kernel must be a {m} x {m} matrix matching the node list"
            )));
        }
        let kernel = DMatrix::from_fn(m, m, |a, b| raw.kernel[a][b]);
        Graph::new(raw.nodes, kernel)
    }
}

/// A finite weighted graph with named nodes and a symmetric kernel.
///
/// Serializes as `{"nodes": [...], "K": [[...], ...]}` and is fully
/// re-validated on deserialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct Graph {
    names: Vec<String>,
    kernel: DMatrix<f64>,
}

impl Graph {
    /// Builds a graph from node names and an edge kernel.
    ///
    /// The kernel must be square of matching size, finite, nonnegative,
    /// symmetric, and have zero diagonal. Small asymmetries and diagonal
    /// entries below a relative tolerance are repaired exactly; anything
    /// larger is rejected.
    pub fn new(names: Vec<String>, kernel: DMatrix<f64>) -> Result<Self> {
        let m = names.len();
        if m == 0 {
            return Err(Error::InvalidGraph("graph needs at least one node".into()));
        }
        if kernel.nrows() != m || kernel.ncols() != m {
            return Err(Error::InvalidGraph(format!(
                "kernel is {}x{} but the graph has {} nodes",
                kernel.nrows(),
                kernel.ncols(),
                m
            )));
        }
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        if unique.len() != m {
            return Err(Error::InvalidGraph("node names must be unique".into()));
        }
        let scale = kernel.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1.0);
        let mut k = kernel;
        for i in 0..m {
            for j in 0..m {
                let v = k[(i, j)];
                if !v.is_finite() {
                    return Err(Error::InvalidGraph("kernel entries must be finite".into()));
                }
                if v < -VALIDATION_TOL * scale {
                    return Err(Error::InvalidGraph(format!(
                        "kernel entry ({i}, {j}) is negative: {v}"
                    )));
                }
            }
        }
        for i in 0..m {
            if k[(i, i)].abs() > VALIDATION_TOL * scale {
                return Err(Error::InvalidGraph(format!(
                    "kernel diagonal entry ({i}, {i}) must be zero, got {}",
                    k[(i, i)]
                )));
            }
            k[(i, i)] = 0.0;
            for j in (i + 1)..m {
                let a = k[(i, j)];
                let b = k[(j, i)];
                if (a - b).abs() > VALIDATION_TOL * scale {
                    return Err(Error::InvalidGraph(format!(
                        "kernel must be symmetric: entries ({i}, {j}) and ({j}, {i}) \
                         differ by {}",
                        (a - b).abs()
                    )));
                }
                let v = 0.5 * (a + b);
                let v = v.max(0.0);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(Self { names, kernel: k })
    }

    /// Builds a graph with default node names `g0, g1, ...`.
    pub fn from_kernel(kernel: DMatrix<f64>) -> Result<Self> {
        let names = (0..kernel.nrows()).map(|i| format!("g{i}")).collect();
        Self::new(names, kernel)
    }

    /// Complete graph on `m` nodes with constant edge weight.
    pub fn complete(m: usize, weight: f64) -> Result<Self> {
        if weight <= 0.0 || !weight.is_finite() {
            return Err(Error::InvalidGraph(format!(
                "complete-graph weight must be positive and finite, got {weight}"
            )));
        }
        let mut k = DMatrix::from_element(m, m, weight);
        for i in 0..m {
            k[(i, i)] = 0.0;
        }
        Self::from_kernel(k)
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    /// Whether the graph has no nodes (never true for a validated graph).
    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Node names in index order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// The validated edge kernel.
    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    /// Index of a node by name.
    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Iterator over unordered edges `(g, g', K(g, g'))` with positive weight
    /// and `g < g'`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let m = self.len();
        (0..m).flat_map(move |g| {
            ((g + 1)..m).filter_map(move |h| {
                let k = self.kernel[(g, h)];
                (k > 0.0).then_some((g, h, k))
            })
        })
    }

    /// Connected components (by positive kernel entries), each sorted,
    /// ordered by smallest member.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let m = self.len();
        let mut seen = vec![false; m];
        let mut components = Vec::new();
        for start in 0..m {
            if seen[start] {
                continue;
            }
            let mut stack = vec![start];
            seen[start] = true;
            let mut comp = Vec::new();
            while let Some(g) = stack.pop() {
                comp.push(g);
                for h in 0..m {
                    if !seen[h] && self.kernel[(g, h)] > 0.0 {
                        seen[h] = true;
                        stack.push(h);
                    }
                }
            }
            comp.sort_unstable();
            components.push(comp);
        }
        components
    }

    /// Whether all nodes belong to one component.
    pub fn is_connected(&self) -> bool {
        self.connected_components().len() == 1
    }

    fn check_node_field(&self, v: &NodeField, what: &str) -> Result<()> {
        if v.len() != self.len() {
            return Err(Error::InvalidField(format!(
                "{what} has {} entries but the graph has {} nodes",
                v.len(),
                self.len()
            )));
        }
        Ok(())
    }

    fn check_edge_field(&self, a: &EdgeField, what: &str) -> Result<()> {
        if a.nrows() != self.len() || a.ncols() != self.len() {
            return Err(Error::InvalidField(format!(
                "{what} is {}x{} but the graph has {} nodes",
                a.nrows(),
                a.ncols(),
                self.len()
            )));
        }
        Ok(())
    }

    /// Discrete gradient `(grad phi)(g, g') = phi(g') - phi(g)`.
    pub fn discrete_gradient(&self, phi: &NodeField) -> Result<EdgeField> {
        self.check_node_field(phi, "node function")?;
        let m = self.len();
        Ok(EdgeField::from_fn(m, m, |g, h| phi[h] - phi[g]))
    }

    /// Discrete divergence
    /// `(div h)(g) = sum_{g'} (h(g, g') - h(g', g)) K(g, g')`.
    pub fn discrete_divergence(&self, h: &EdgeField) -> Result<NodeField> {
        self.check_edge_field(h, "edge function")?;
        let m = self.len();
        let mut div = NodeField::zeros(m);
        for g in 0..m {
            let mut acc = 0.0;
            for gp in 0..m {
                acc += (h[(g, gp)] - h[(gp, g)]) * self.kernel[(g, gp)];
            }
            div[g] = acc;
        }
        Ok(div)
    }

    /// Absolute defect in the summation-by-parts identity,
    /// `| sum_g (div h)(g) phi(g) + sum_{g,g'} h(g,g') (grad phi)(g,g') K(g,g') |`.
    ///
    /// Zero (up to roundoff) for every edge function and node function.
    pub fn integration_by_parts_defect(&self, h: &EdgeField, phi: &NodeField) -> Result<f64> {
        self.check_edge_field(h, "edge function")?;
        self.check_node_field(phi, "node function")?;
        let div = self.discrete_divergence(h)?;
        let lhs = div.dot(phi);
        let m = self.len();
        let mut rhs = 0.0;
        for g in 0..m {
            for gp in 0..m {
                rhs += h[(g, gp)] * (phi[gp] - phi[g]) * self.kernel[(g, gp)];
            }
        }
        Ok((lhs + rhs).abs())
    }

    fn check_edge_weight(&self, s: &EdgeField) -> Result<()> {
        self.check_edge_field(s, "edge weight")?;
        let scale = s.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1.0);
        for g in 0..self.len() {
            for gp in 0..self.len() {
                let v = s[(g, gp)];
                if !v.is_finite() {
                    return Err(Error::InvalidField("edge weight must be finite".into()));
                }
                if (v - s[(gp, g)]).abs() > 1e-9 * scale {
                    return Err(Error::InvalidField(
                        "edge weight must be symmetric".into(),
                    ));
                }
                if self.kernel[(g, gp)] > 0.0 && v < 0.0 {
                    return Err(Error::InvalidField(
                        "edge weight must be nonnegative on edges".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Whether the graph with effective weights `S(g,g') K(g,g') > 0` is
    /// connected.
    fn weighted_connected(&self, s: &EdgeField) -> bool {
        let m = self.len();
        let mut seen = vec![false; m];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(g) = stack.pop() {
            for h in 0..m {
                if !seen[h] && self.kernel[(g, h)] * 0.5 * (s[(g, h)] + s[(h, g)]) > 0.0 {
                    seen[h] = true;
                    count += 1;
                    stack.push(h);
                }
            }
        }
        count == m
    }

    /// Weighted Laplacian matrix `L_S` with
    /// `(L_S)(g, g) = 2 sum_{g'} S(g, g') K(g, g')` and
    /// `(L_S)(g, g') = -2 S(g, g') K(g, g')` off the diagonal.
    ///
    /// `L_S` is symmetric positive semidefinite and satisfies
    /// `div(S grad eta) = -L_S eta`.
    pub fn weighted_laplacian(&self, s: &EdgeField) -> Result<DMatrix<f64>> {
        self.check_edge_weight(s)?;
        let m = self.len();
        let mut l = DMatrix::zeros(m, m);
        for g in 0..m {
            let mut diag = 0.0;
            for gp in 0..m {
                if gp == g {
                    continue;
                }
                let w = 2.0 * 0.5 * (s[(g, gp)] + s[(gp, g)]) * self.kernel[(g, gp)];
                l[(g, gp)] = -w;
                diag += w;
            }
            l[(g, g)] = diag;
        }
        Ok(l)
    }

    /// Solves the discrete Poisson problem `div(S grad eta) = rho` for the
    /// zero-mean node function `eta`.
    ///
    /// Requires `rho` to sum to zero (up to a small relative tolerance;
    /// the residual mean is removed exactly before solving) and the graph
    /// weighted by `S K` to be connected.
    pub fn solve_graph_poisson(&self, s: &EdgeField, rho: &NodeField) -> Result<NodeField> {
        self.check_node_field(rho, "right-hand side")?;
        let m = self.len();
        if m == 1 {
            if rho[0].abs() > 1e-12 {
                return Err(Error::InvalidParameter(
                    "right-hand side must sum to zero".into(),
                ));
            }
            return Ok(NodeField::zeros(1));
        }
        let sum: f64 = rho.iter().sum();
        let scale: f64 = rho.iter().map(|x| x.abs()).sum::<f64>().max(1e-300);
        if sum.abs() > 1e-8 * scale.max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "right-hand side must sum to zero, got sum {sum}"
            )));
        }
        if !self.weighted_connected(s) {
            return Err(Error::InvalidGraph(
                "the graph weighted by S*K is disconnected; the Poisson problem \
                 is not solvable for general data"
                    .into(),
            ));
        }
        let l = self.weighted_laplacian(s)?;
        // Solve L eta = -rho on the zero-mean subspace by shifting with the
        // rank-one projector onto constants; the shifted matrix is positive
        // definite and agrees with L on zero-mean functions.
        let shift = (l.trace() / m as f64).max(1e-30);
        let ones = DMatrix::from_element(m, m, shift / m as f64);
        let shifted = &l + ones;
        let chol = shifted.clone().cholesky().ok_or_else(|| {
            Error::Numerical("weighted graph Laplacian is numerically singular".into())
        })?;
        let mut b = -rho.clone();
        let mean_b = b.iter().sum::<f64>() / m as f64;
        b.iter_mut().for_each(|x| *x -= mean_b);
        let mut eta = chol.solve(&b);
        // One step of iterative refinement keeps the residual near roundoff.
        let resid = &b - &l * &eta;
        let corr = chol.solve(&resid);
        eta += corr;
        let mean = eta.iter().sum::<f64>() / m as f64;
        eta.iter_mut().for_each(|x| *x -= mean);
        Ok(eta)
    }

    /// Smallest nonzero eigenvalue of the weighted Laplacian `L_S`
    /// (the spectral gap of the weighted graph).
    ///
    /// Fails if the weighted graph is disconnected (the zero eigenvalue is
    /// then repeated) or has a single node.
    pub fn laplacian_spectral_gap(&self, s: &EdgeField) -> Result<f64> {
        let m = self.len();
        if m < 2 {
            return Err(Error::InvalidGraph(
                "spectral gap requires at least two nodes".into(),
            ));
        }
        if !self.weighted_connected(s) {
            return Err(Error::InvalidGraph(
                "the graph weighted by S*K is disconnected; its spectral gap \
                 vanishes"
                    .into(),
            ));
        }
        let l = self.weighted_laplacian(s)?;
        let eig = l.symmetric_eigen();
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).expect("eigenvalues are finite"));
        let max = vals.last().copied().unwrap_or(0.0).max(1.0);
        let gap = vals
            .iter()
            .copied()
            .find(|&v| v > 1e-10 * max)
            .ok_or_else(|| Error::Numerical("all Laplacian eigenvalues vanish".into()))?;
        Ok(gap)
    }

    /// Uniform edge weight `S = 1` on every ordered pair, for unweighted
    /// Laplacian computations.
    pub fn unit_edge_weight(&self) -> EdgeField {
        let m = self.len();
        let mut s = EdgeField::from_element(m, m, 1.0);
        for g in 0..m {
            s[(g, g)] = 0.0;
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node() -> Graph {
        Graph::complete(2, 1.0).expect("valid graph")
    }

    #[test]
    fn rejects_asymmetric_kernel() {
        let k = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        let err = Graph::from_kernel(k).unwrap_err();
        assert!(err.to_string().contains("symmetric"));
    }

    #[test]
    fn rejects_negative_kernel() {
        let k = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        assert!(Graph::from_kernel(k).is_err());
    }

    #[test]
    fn rejects_nonzero_diagonal() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]);
        assert!(Graph::from_kernel(k).is_err());
    }

    #[test]
    fn gradient_is_antisymmetric() {
        let g = two_node();
        let phi = NodeField::from_vec(vec![3.0, 5.0]);
        let grad = g.discrete_gradient(&phi).unwrap();
        assert_eq!(grad[(0, 1)], 2.0);
        assert_eq!(grad[(1, 0)], -2.0);
        assert_eq!(grad[(0, 0)], 0.0);
    }

    #[test]
    fn components_of_disconnected_graph() {
        let mut k = DMatrix::zeros(4, 4);
        k[(0, 1)] = 1.0;
        k[(1, 0)] = 1.0;
        k[(2, 3)] = 2.0;
        k[(3, 2)] = 2.0;
        let g = Graph::from_kernel(k).unwrap();
        assert!(!g.is_connected());
        assert_eq!(g.connected_components(), vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn poisson_requires_zero_sum() {
        let g = two_node();
        let s = g.unit_edge_weight();
        let rho = NodeField::from_vec(vec![1.0, 1.0]);
        assert!(g.solve_graph_poisson(&s, &rho).is_err());
    }

    #[test]
    fn single_node_gap_is_an_error() {
        let g = Graph::from_kernel(DMatrix::zeros(1, 1)).unwrap();
        let s = g.unit_edge_weight();
        assert!(g.laplacian_spectral_gap(&s).is_err());
    }
}
