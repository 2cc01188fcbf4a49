//! Hand-checked reference values for the graph calculus.
//!
//! Each expected number below was derived independently by evaluating the
//! defining sums on paper; the tests freeze those values.

use nalgebra::{DMatrix, DVector};
use semidot::graph::Graph;

fn two_node() -> Graph {
    Graph::complete(2, 1.0).expect("valid graph")
}

fn triangle() -> Graph {
    Graph::complete(3, 1.0).expect("valid graph")
}

/// Antisymmetric h with h(0,1) = 1 on the two-node unit-kernel graph:
/// div h(0) = (h(0,1) - h(1,0)) K = (1 - (-1)) * 1 = 2, div h(1) = -2.
#[test]
fn divergence_of_antisymmetric_edge_field_two_nodes() {
    let g = two_node();
    let h = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let div = g.discrete_divergence(&h).unwrap();
    assert_eq!(div[0], 2.0);
    assert_eq!(div[1], -2.0);
}

/// A one-sided edge field only contributes through its asymmetric part:
/// h(0,1) = 1, h(1,0) = 0 gives div h = (1, -1).
#[test]
fn divergence_uses_asymmetric_part() {
    let g = two_node();
    let h = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    let div = g.discrete_divergence(&h).unwrap();
    assert_eq!(div[0], 1.0);
    assert_eq!(div[1], -1.0);
    let sym = DMatrix::from_row_slice(2, 2, &[0.0, 3.0, 3.0, 0.0]);
    let div_sym = g.discrete_divergence(&sym).unwrap();
    assert_eq!(div_sym[0], 0.0);
    assert_eq!(div_sym[1], 0.0);
}

/// Summation by parts holds exactly for small integer data.
#[test]
fn integration_by_parts_exact_for_integer_data() {
    let g = triangle();
    let h = DMatrix::from_row_slice(3, 3, &[0.0, 2.0, -1.0, 1.0, 0.0, 4.0, 0.0, -3.0, 0.0]);
    let phi = DVector::from_vec(vec![1.0, -2.0, 5.0]);
    let defect = g.integration_by_parts_defect(&h, &phi).unwrap();
    assert_eq!(defect, 0.0);
}

/// Two-node Poisson problem with unit weights: div(S grad eta) = (1, -1)
/// has the zero-mean solution eta = (-1/4, 1/4), because
/// div(S grad eta)(0) = 2 S K (eta(1) - eta(0)) = 2 * (1/2) = 1.
#[test]
fn poisson_two_nodes_reference_solution() {
    let g = two_node();
    let s = g.unit_edge_weight();
    let rho = DVector::from_vec(vec![1.0, -1.0]);
    let eta = g.solve_graph_poisson(&s, &rho).unwrap();
    assert!((eta[0] - (-0.25)).abs() < 1e-14, "eta[0] = {}", eta[0]);
    assert!((eta[1] - 0.25).abs() < 1e-14, "eta[1] = {}", eta[1]);
}

/// Triangle Poisson problem: rho = (2, -1, -1) has the zero-mean solution
/// eta = (-1/3, 1/6, 1/6): at node 0,
/// div(S grad eta)(0) = 2 [(eta1 - eta0) + (eta2 - eta0)] = 2 [1/2 + 1/2] = 2.
#[test]
fn poisson_triangle_reference_solution() {
    let g = triangle();
    let s = g.unit_edge_weight();
    let rho = DVector::from_vec(vec![2.0, -1.0, -1.0]);
    let eta = g.solve_graph_poisson(&s, &rho).unwrap();
    let expected = [-1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0];
    for (i, &e) in expected.iter().enumerate() {
        assert!((eta[i] - e).abs() < 1e-14, "eta[{i}] = {} vs {e}", eta[i]);
    }
}

/// The residual of the returned solution satisfies the defining equation to
/// roundoff: div(S grad eta) recomputed through the calculus equals rho.
#[test]
fn poisson_solution_satisfies_divergence_form() {
    let g = triangle();
    let s = g.unit_edge_weight();
    let rho = DVector::from_vec(vec![2.0, -1.0, -1.0]);
    let eta = g.solve_graph_poisson(&s, &rho).unwrap();
    let grad = g.discrete_gradient(&eta).unwrap();
    let flux = grad.component_mul(&s);
    let div = g.discrete_divergence(&flux).unwrap();
    for i in 0..3 {
        assert!((div[i] - rho[i]).abs() < 1e-12, "residual at {i}");
    }
}

/// Spectral gap of the two-node unit graph: L = [[2, -2], [-2, 2]] has
/// eigenvalues {0, 4}, so the gap is 4.
#[test]
fn spectral_gap_two_nodes_is_four() {
    let g = two_node();
    let s = g.unit_edge_weight();
    let gap = g.laplacian_spectral_gap(&s).unwrap();
    assert!((gap - 4.0).abs() < 1e-10, "gap = {gap}");
}

/// Complete unit graph on m nodes: the weighted Laplacian is
/// 2(m I - ones), whose nonzero eigenvalue is 2m.
#[test]
fn spectral_gap_complete_graph_is_two_m() {
    for m in 2..=6 {
        let g = Graph::complete(m, 1.0).unwrap();
        let s = g.unit_edge_weight();
        let gap = g.laplacian_spectral_gap(&s).unwrap();
        assert!(
            (gap - 2.0 * m as f64).abs() < 1e-9,
            "m = {m}: gap = {gap}"
        );
    }
}

/// Poisson energy bound: for the solution eta of div(S grad eta) = rho,
/// sum_{g,g'} |grad eta|^2 S K <= (1 / gap) * sum_g rho^2.
#[test]
fn poisson_energy_bound_holds() {
    let g = triangle();
    let s = g.unit_edge_weight();
    let rho = DVector::from_vec(vec![2.0, -1.0, -1.0]);
    let eta = g.solve_graph_poisson(&s, &rho).unwrap();
    let gap = g.laplacian_spectral_gap(&s).unwrap();
    let grad = g.discrete_gradient(&eta).unwrap();
    let mut energy = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            energy += grad[(a, b)].powi(2) * s[(a, b)] * g.kernel()[(a, b)];
        }
    }
    let bound = rho.iter().map(|x| x * x).sum::<f64>() / gap;
    assert!(
        energy <= bound * (1.0 + 1e-12),
        "energy {energy} exceeds bound {bound}"
    );
}

/// Disconnected weighted graphs are rejected by the Poisson solver and the
/// spectral gap.
#[test]
fn disconnected_graph_is_rejected() {
    let mut k = DMatrix::zeros(4, 4);
    k[(0, 1)] = 1.0;
    k[(1, 0)] = 1.0;
    k[(2, 3)] = 1.0;
    k[(3, 2)] = 1.0;
    let g = Graph::from_kernel(k).unwrap();
    let s = g.unit_edge_weight();
    let rho = DVector::from_vec(vec![1.0, -1.0, 0.0, 0.0]);
    assert!(g.solve_graph_poisson(&s, &rho).is_err());
    assert!(g.laplacian_spectral_gap(&s).is_err());
}

/// Edge weights below machine scale on a bridge edge also disconnect the
/// effective graph.
#[test]
fn zero_weight_bridge_disconnects() {
    let g = Graph::complete(2, 1.0).unwrap();
    let s = DMatrix::zeros(2, 2);
    let rho = DVector::from_vec(vec![1.0, -1.0]);
    assert!(g.solve_graph_poisson(&s, &rho).is_err());
}
