//! Independent oracles for the static transport cost: a CDF-walk coupling
//! on a single fiber, a closed-form pure-exchange instance that is provably
//! optimal, scaling laws, and the optimality audit on solved pairs.

use nalgebra::{DMatrix, DVector};
use semidot::domain::{GridDomain, SemiDiscreteDensity, SemiDiscreteField};
use semidot::graph::Graph;
use semidot::potentials::PotentialPair;
use semidot::statics::{
    cost_of_pair, exchange_divergence, feasibility_residual, solve_static_cost, squared_distances,
    verify_optimality, AdmissiblePair, ExchangeField, PlanTermWeight, StaticOptions,
    TransportPlanSet,
};

/// Monotone coupling cost via an explicit CDF walk, written from scratch.
fn cdf_transport_cost(xs: &[f64], a: &[f64], b: &[f64], tau: f64) -> f64 {
    let n = xs.len();
    let mut cost = 0.0;
    let mut j = 0;
    let mut i = 0;
    let mut ra = a[0];
    let mut rb = b[0];
    while j < n && i < n {
        let m = ra.min(rb);
        cost += m * (xs[j] - xs[i]).powi(2);
        ra -= m;
        rb -= m;
        if ra <= rb {
            j += 1;
            if j < n {
                ra = a[j];
            }
        } else {
            i += 1;
            if i < n {
                rb = b[i];
            }
        }
    }
    cost / (2.0 * tau)
}

/// Single fiber, no edges: the solver reproduces the monotone-coupling
/// cost of the one-dimensional problem.
#[test]
fn single_fiber_cost_matches_cdf_oracle() {
    let n = 32;
    let d = GridDomain::new(1, 1.0, n).unwrap();
    let v = SemiDiscreteField::constant(d, 1, 0.0).unwrap();
    let pot = PotentialPair::with_zero_weight(v).unwrap();
    let graph = Graph::new(vec!["only".into()], DMatrix::zeros(1, 1)).unwrap();
    let mu = SemiDiscreteDensity::from_unnormalized(
        SemiDiscreteField::from_fn(d, 1, |x, _| 1.2 + (2.0 * x[0]).sin()).unwrap(),
    )
    .unwrap();
    let sigma = SemiDiscreteDensity::from_unnormalized(
        SemiDiscreteField::from_fn(d, 1, |x, _| 1.2 + (1.7 * x[0] + 0.4).cos() * 0.8).unwrap(),
    )
    .unwrap();
    let tau = 0.2;
    let sol = solve_static_cost(&mu, &sigma, tau, &pot, &graph, &StaticOptions::default()).unwrap();
    assert!(sol.converged, "feasibility {}", sol.feasibility);

    let w = d.cell_weights();
    let xs: Vec<f64> = (0..n).map(|i| d.coords(i)[0]).collect();
    let a: Vec<f64> = (0..n).map(|j| mu.values()[(j, 0)] * w[j]).collect();
    let total_a: f64 = a.iter().sum();
    let b_raw: Vec<f64> = (0..n).map(|i| sigma.values()[(i, 0)] * w[i]).collect();
    let total_b: f64 = b_raw.iter().sum();
    let b: Vec<f64> = b_raw.iter().map(|x| x * total_a / total_b).collect();
    let oracle = cdf_transport_cost(&xs, &a, &b, tau);
    assert!(
        (sol.cost - oracle).abs() <= 1e-6 * (1.0 + oracle.abs()),
        "{} vs {oracle}",
        sol.cost
    );
}

/// Pure-exchange instance with a provable closed form: the whole unit mass
/// sits on node 0 and must end on node 1, with the shared spatial profile
/// e^{-W} (normalized by Z). Admissibility pins the intermediate marginals
/// cell by cell, so the minimizer is unique: diagonal plans and the
/// constant intensity h = 1/(tau K Z), with cost 1/(2 tau K Z). The solver
/// must hit it to near machine precision.
#[test]
fn pure_exchange_solution_matches_closed_form() {
    let n = 21;
    let d = GridDomain::new(1, 1.5, n).unwrap();
    let v = SemiDiscreteField::constant(d, 2, 0.0).unwrap();
    let w_fn = |x: f64| 0.5 * x * x;
    let w_grid = DVector::from_fn(n, |i, _| w_fn(d.coords(i)[0]));
    let pot = PotentialPair::new(v, w_grid.clone()).unwrap();
    let k = 0.8;
    let graph = Graph::complete(2, k).unwrap();
    let weights = d.cell_weights();
    let z: f64 = (0..n).map(|i| (-w_grid[i]).exp() * weights[i]).sum();
    let rho = |i: usize| (-w_grid[i]).exp() / z;
    let mu = SemiDiscreteDensity::new(
        SemiDiscreteField::new(
            d,
            DMatrix::from_fn(n, 2, |i, g| if g == 0 { rho(i) } else { 0.0 }),
        )
        .unwrap(),
    )
    .unwrap();
    let sigma = SemiDiscreteDensity::new(
        SemiDiscreteField::new(
            d,
            DMatrix::from_fn(n, 2, |i, g| if g == 1 { rho(i) } else { 0.0 }),
        )
        .unwrap(),
    )
    .unwrap();
    let tau = 0.3;
    let expected_cost = 1.0 / (2.0 * tau * k * z);
    let expected_h = 1.0 / (tau * k * z);

    // The hand-built pair evaluates to the closed form exactly.
    let mut ex = ExchangeField::zeros(d, &graph);
    for i in 0..n {
        ex.values_mut()[(i, 0)] = expected_h;
    }
    let hand = AdmissiblePair::new(TransportPlanSet::identity(&mu), ex).unwrap();
    let hand_cost = cost_of_pair(&hand, tau, &pot, &graph, PlanTermWeight::One).unwrap();
    assert!(
        (hand_cost - expected_cost).abs() <= 1e-12 * (1.0 + expected_cost),
        "{hand_cost} vs {expected_cost}"
    );
    let res = feasibility_residual(&hand, &mu, &sigma, tau, &pot, &graph).unwrap();
    assert!(res < 1e-12, "hand-built pair admissibility defect {res}");

    // The solver reaches the same cost, a constant intensity, and
    // diagonal plans.
    let sol = solve_static_cost(&mu, &sigma, tau, &pot, &graph, &StaticOptions::default()).unwrap();
    assert!(sol.converged, "feasibility {}", sol.feasibility);
    assert!(
        (sol.cost - expected_cost).abs() <= 1e-8 * (1.0 + expected_cost),
        "{} vs {expected_cost}",
        sol.cost
    );
    let hvals = sol.pair.exchange.values();
    for i in 0..n {
        assert!(
            (hvals[(i, 0)] - expected_h).abs() <= 1e-8 * (1.0 + expected_h.abs()),
            "cell {i}: intensity {} vs {expected_h}",
            hvals[(i, 0)]
        );
    }
    let plan0 = sol.pair.plans.plan(0);
    let off_diag = (0..n)
        .flat_map(|j| (0..n).map(move |i| (j, i)))
        .filter(|&(j, i)| j != i)
        .map(|(j, i)| plan0[(j, i)].abs())
        .fold(0.0f64, f64::max);
    assert!(off_diag < 1e-10, "off-diagonal plan mass {off_diag}");
}

/// Two-sided variant: mass fractions p and 1-p flip to q and 1-q under the
/// shared profile e^{-W}/Z. By Cauchy-Schwarz the exchange term of any
/// admissible pair is at least the constant-intensity value and the plan
/// term is nonnegative, so (p-q)^2/(2 tau K Z) is the exact optimum. The
/// optimum sits on a corner of the piecewise-linear plan term (degenerate
/// quantile alignment), where a first-order method certifies the value
/// only to its stopping accuracy: the solver must bracket the closed form
/// from above within that accuracy and can never beat it.
#[test]
fn two_sided_exchange_brackets_closed_form() {
    let n = 21;
    let d = GridDomain::new(1, 1.5, n).unwrap();
    let v = SemiDiscreteField::constant(d, 2, 0.0).unwrap();
    let w_fn = |x: f64| 0.5 * x * x;
    let w_grid = DVector::from_fn(n, |i, _| w_fn(d.coords(i)[0]));
    let pot = PotentialPair::new(v, w_grid.clone()).unwrap();
    let k = 0.8;
    let graph = Graph::complete(2, k).unwrap();
    let weights = d.cell_weights();
    let z: f64 = (0..n).map(|i| (-w_grid[i]).exp() * weights[i]).sum();
    let (p, q) = (0.75, 0.4);
    let rho = |i: usize| (-w_grid[i]).exp() / z;
    let mu = SemiDiscreteDensity::new(
        SemiDiscreteField::new(
            d,
            DMatrix::from_fn(n, 2, |i, g| rho(i) * if g == 0 { p } else { 1.0 - p }),
        )
        .unwrap(),
    )
    .unwrap();
    let sigma = SemiDiscreteDensity::new(
        SemiDiscreteField::new(
            d,
            DMatrix::from_fn(n, 2, |i, g| rho(i) * if g == 0 { q } else { 1.0 - q }),
        )
        .unwrap(),
    )
    .unwrap();
    let tau = 0.3;
    let expected_cost = (p - q) * (p - q) / (2.0 * tau * k * z);
    let expected_h = (p - q) / (tau * k * z);

    // The hand-built optimal pair evaluates to the closed form exactly and
    // is admissible.
    let mut ex = ExchangeField::zeros(d, &graph);
    for i in 0..n {
        ex.values_mut()[(i, 0)] = expected_h;
    }
    let hand = AdmissiblePair::new(TransportPlanSet::identity(&mu), ex).unwrap();
    let hand_cost = cost_of_pair(&hand, tau, &pot, &graph, PlanTermWeight::One).unwrap();
    assert!(
        (hand_cost - expected_cost).abs() <= 1e-12 * (1.0 + expected_cost),
        "{hand_cost} vs {expected_cost}"
    );
    let res = feasibility_residual(&hand, &mu, &sigma, tau, &pot, &graph).unwrap();
    assert!(res < 1e-12, "hand-built pair admissibility defect {res}");

    let sol = solve_static_cost(&mu, &sigma, tau, &pot, &graph, &StaticOptions::default()).unwrap();
    assert!(sol.converged, "feasibility {}", sol.feasibility);
    assert!(
        sol.cost >= expected_cost - 1e-9 * (1.0 + expected_cost),
        "solver {} undercuts the proven optimum {expected_cost}",
        sol.cost
    );
    assert!(
        sol.cost <= expected_cost + 2e-4 * (1.0 + expected_cost),
        "solver {} vs optimum {expected_cost}",
        sol.cost
    );
}

/// The pure-exchange optimum scales as 1/tau and matches the per-cell
/// balance closed form at every tau.
#[test]
fn pure_exchange_cost_scales_inversely_with_tau() {
    let n = 15;
    let d = GridDomain::new(1, 1.0, n).unwrap();
    let v = SemiDiscreteField::constant(d, 2, 0.0).unwrap();
    let pot = PotentialPair::with_zero_weight(v).unwrap();
    let k = 1.0;
    let graph = Graph::complete(2, k).unwrap();
    let weights = d.cell_weights();
    let z: f64 = weights.iter().sum();
    let mu = SemiDiscreteDensity::new(
        SemiDiscreteField::new(
            d,
            DMatrix::from_fn(n, 2, |_, g| if g == 0 { 1.0 / z } else { 0.0 }),
        )
        .unwrap(),
    )
    .unwrap();
    let sigma = SemiDiscreteDensity::new(
        SemiDiscreteField::new(
            d,
            DMatrix::from_fn(n, 2, |_, g| if g == 1 { 1.0 / z } else { 0.0 }),
        )
        .unwrap(),
    )
    .unwrap();
    let cost_at = |tau: f64| {
        let sol =
            solve_static_cost(&mu, &sigma, tau, &pot, &graph, &StaticOptions::default()).unwrap();
        assert!(sol.converged);
        let expected = 1.0 / (2.0 * tau * k * z);
        assert!(
            (sol.cost - expected).abs() <= 1e-8 * (1.0 + expected),
            "tau {tau}: {} vs {expected}",
            sol.cost
        );
        sol.cost
    };
    let c1 = cost_at(0.1);
    let c2 = cost_at(0.2);
    assert!(
        (c1 / c2 - 2.0).abs() < 1e-8,
        "costs {c1}, {c2}: ratio {}",
        c1 / c2
    );
}

/// The per-node plan-term weight multiplies exactly the plan part of the
/// cost.
#[test]
fn plan_term_weight_scales_only_the_plan_part() {
    let n = 9;
    let d = GridDomain::new(1, 1.0, n).unwrap();
    let v = SemiDiscreteField::constant(d, 3, 0.0).unwrap();
    let pot = PotentialPair::with_zero_weight(v).unwrap();
    let graph = Graph::complete(3, 1.0).unwrap();
    let mu = SemiDiscreteDensity::from_unnormalized(
        SemiDiscreteField::from_fn(d, 3, |x, g| 1.0 + 0.1 * (g as f64) + 0.2 * x[0]).unwrap(),
    )
    .unwrap();
    let mut plans = TransportPlanSet::identity(&mu);
    plans.plan_mut(1)[(2, 6)] += 0.004;
    let mut ex = ExchangeField::zeros(d, &graph);
    ex.values_mut()[(4, 1)] = 0.3;
    let pair = AdmissiblePair::new(plans, ex).unwrap();
    let tau = 0.2;
    let one = cost_of_pair(&pair, tau, &pot, &graph, PlanTermWeight::One).unwrap();
    let per_node = cost_of_pair(&pair, tau, &pot, &graph, PlanTermWeight::PerNode).unwrap();
    // Isolate the two parts by zeroing the exchange field.
    let plain = AdmissiblePair::new(
        pair.plans.clone(),
        ExchangeField::zeros(d, &graph),
    )
    .unwrap();
    let plan_part = cost_of_pair(&plain, tau, &pot, &graph, PlanTermWeight::One).unwrap();
    let exch_part = one - plan_part;
    assert!(plan_part > 0.0 && exch_part > 0.0);
    let expected = 3.0 * plan_part + exch_part;
    assert!(
        (per_node - expected).abs() < 1e-14,
        "{per_node} vs {expected}"
    );
}

/// Relabeling the nodes by a permutation leaves the optimal cost
/// unchanged.
#[test]
fn optimal_cost_is_permutation_invariant() {
    let n = 13;
    let d = GridDomain::new(1, 1.0, n).unwrap();
    let perm = [2usize, 0, 1];
    let v_fn = |x: f64, g: usize| 0.5 * x * x + 0.15 * g as f64;
    let f_fn = |x: f64, g: usize| 1.0 + 0.3 * ((g + 1) as f64 * x).sin();
    let s_fn = |x: f64, g: usize| 1.0 + 0.25 * ((g as f64) - x).cos();
    let kernel = DMatrix::from_fn(3, 3, |a, b| if a == b { 0.0 } else { 0.5 + 0.1 * (a + b) as f64 });

    let build = |relabel: bool| {
        let map = |g: usize| if relabel { perm[g] } else { g };
        let v = SemiDiscreteField::from_fn(d, 3, |x, g| v_fn(x[0], map(g))).unwrap();
        let pot = PotentialPair::with_zero_weight(v).unwrap();
        let k = DMatrix::from_fn(3, 3, |a, b| kernel[(map(a), map(b))]);
        let graph = Graph::from_kernel(k).unwrap();
        let raw_mu = SemiDiscreteField::from_fn(d, 3, |x, g| f_fn(x[0], map(g))).unwrap();
        let raw_sigma = SemiDiscreteField::from_fn(d, 3, |x, g| s_fn(x[0], map(g))).unwrap();
        // Normalize with a shared constant so per-node masses match after
        // relabeling.
        let mu = SemiDiscreteDensity::from_unnormalized(raw_mu).unwrap();
        let z_mu: f64 = (0..3).map(|g| mu.node_masses()[g]).sum::<f64>();
        assert!((z_mu - 1.0).abs() < 1e-12);
        let total_sigma = raw_sigma.integral();
        let sigma = SemiDiscreteDensity::new(
            SemiDiscreteField::new(d, raw_sigma.values() / total_sigma).unwrap(),
        )
        .unwrap();
        solve_static_cost(&mu, &sigma, 0.25, &pot, &graph, &StaticOptions::default()).unwrap()
    };
    let plain = build(false);
    let relabeled = build(true);
    assert!(plain.converged && relabeled.converged);
    assert!(
        (plain.cost - relabeled.cost).abs() <= 1e-8 * (1.0 + plain.cost.abs()),
        "{} vs {}",
        plain.cost,
        relabeled.cost
    );
}

/// The solved pair on a triangle graph passes the optimality audit, and
/// adding a circulation breaks it without changing admissibility.
#[test]
fn solved_pair_passes_audit_and_circulation_breaks_it() {
    let n = 11;
    let d = GridDomain::new(1, 1.0, n).unwrap();
    let v = SemiDiscreteField::from_fn(d, 3, |x, g| 0.5 * x[0] * x[0] + 0.1 * g as f64).unwrap();
    let pot = PotentialPair::with_zero_weight(v).unwrap();
    let graph = Graph::complete(3, 1.0).unwrap();
    let mu = SemiDiscreteDensity::from_unnormalized(
        SemiDiscreteField::from_fn(d, 3, |x, g| 1.0 + 0.2 * ((g + 1) as f64 * x[0]).sin())
            .unwrap(),
    )
    .unwrap();
    let sigma = SemiDiscreteDensity::from_unnormalized(
        SemiDiscreteField::from_fn(d, 3, |x, g| 1.0 + 0.2 * (x[0] - g as f64 * 0.3).cos())
            .unwrap(),
    )
    .unwrap();
    let tau = 0.2;
    let sol = solve_static_cost(&mu, &sigma, tau, &pot, &graph, &StaticOptions::default()).unwrap();
    assert!(sol.converged, "feasibility {}", sol.feasibility);
    let report = verify_optimality(&sol.pair, &graph, 1e-6).unwrap();
    assert!(
        report.pass,
        "cycle {} gradient {} monotonicity {}",
        report.cycle_defect, report.gradient_residual, report.monotonicity_defect
    );

    // Divergence-free circulation: admissibility is untouched, the audit
    // fails, and the cost strictly increases.
    let mut spoiled = sol.pair.clone();
    let bump = 0.5 * (1.0 + spoiled.exchange.values().abs().max());
    for i in 0..n {
        spoiled.exchange.values_mut()[(i, 0)] += bump; // (0,1)
        spoiled.exchange.values_mut()[(i, 2)] += bump; // (1,2)
        spoiled.exchange.values_mut()[(i, 1)] -= bump; // (0,2)
    }
    let div_clean = exchange_divergence(&sol.pair.exchange, &pot, &graph).unwrap();
    let div_spoiled = exchange_divergence(&spoiled.exchange, &pot, &graph).unwrap();
    let div_shift = (div_spoiled - div_clean).abs().max();
    assert!(div_shift < 1e-12, "circulation changed the divergence by {div_shift}");
    let res = feasibility_residual(&spoiled, &mu, &sigma, tau, &pot, &graph).unwrap();
    assert!(res <= sol.feasibility + 1e-12);
    let spoiled_report = verify_optimality(&spoiled, &graph, 1e-6).unwrap();
    assert!(!spoiled_report.pass);
    assert!(spoiled_report.cycle_defect > 0.1);
    let spoiled_cost = cost_of_pair(&spoiled, tau, &pot, &graph, PlanTermWeight::One).unwrap();
    assert!(spoiled_cost > sol.cost + 1e-6);
}

/// Two nodes with mirrored bumps that swap places: node 0 carries a bump
/// on the left that must end on the right, node 1 the reverse. A
/// hand-built competitor that refuses to transport (diagonal plans plus
/// pointwise-pinned exchange) pays to push both bumps through the edge;
/// sliding the bumps spatially is far cheaper, so the solver must beat the
/// competitor by a wide margin.
#[test]
fn solver_beats_pinned_competitor() {
    let n = 25;
    let d = GridDomain::new(1, 1.0, n).unwrap();
    let v = SemiDiscreteField::constant(d, 2, 0.0).unwrap();
    let pot = PotentialPair::with_zero_weight(v).unwrap();
    let k = 0.25;
    let graph = Graph::complete(2, k).unwrap();
    let left = |x: f64| (-8.0 * (x + 0.5) * (x + 0.5)).exp();
    let right = |x: f64| (-8.0 * (x - 0.5) * (x - 0.5)).exp();
    let mu = SemiDiscreteDensity::from_unnormalized(
        SemiDiscreteField::from_fn(d, 2, |x, g| if g == 0 { left(x[0]) } else { right(x[0]) })
            .unwrap(),
    )
    .unwrap();
    let sigma = SemiDiscreteDensity::from_unnormalized(
        SemiDiscreteField::from_fn(d, 2, |x, g| if g == 0 { right(x[0]) } else { left(x[0]) })
            .unwrap(),
    )
    .unwrap();
    let tau = 0.25;
    let mut ex = ExchangeField::zeros(d, &graph);
    for i in 0..n {
        let need = mu.values()[(i, 0)] - sigma.values()[(i, 0)];
        ex.values_mut()[(i, 0)] = need / (tau * k * pot.exp_neg_w()[i]);
    }
    let competitor = AdmissiblePair::new(TransportPlanSet::identity(&mu), ex).unwrap();
    let res = feasibility_residual(&competitor, &mu, &sigma, tau, &pot, &graph).unwrap();
    assert!(res < 1e-12, "competitor defect {res}");
    let competitor_cost =
        cost_of_pair(&competitor, tau, &pot, &graph, PlanTermWeight::One).unwrap();
    let sol = solve_static_cost(&mu, &sigma, tau, &pot, &graph, &StaticOptions::default()).unwrap();
    assert!(sol.converged);
    assert!(
        sol.cost <= 0.9 * competitor_cost,
        "solver {} vs competitor {competitor_cost}",
        sol.cost
    );
}

/// Round trip: the induced target of a pair built from a solution is the
/// target density.
#[test]
fn induced_target_round_trip() {
    let n = 9;
    let d = GridDomain::new(1, 1.0, n).unwrap();
    let v = SemiDiscreteField::constant(d, 2, 0.0).unwrap();
    let pot = PotentialPair::with_zero_weight(v).unwrap();
    let graph = Graph::complete(2, 1.0).unwrap();
    let mu = SemiDiscreteDensity::from_unnormalized(
        SemiDiscreteField::from_fn(d, 2, |x, g| 1.0 + 0.2 * (x[0] + g as f64).sin()).unwrap(),
    )
    .unwrap();
    let sigma = SemiDiscreteDensity::from_unnormalized(
        SemiDiscreteField::from_fn(d, 2, |x, g| 1.0 + 0.2 * (x[0] - g as f64).cos()).unwrap(),
    )
    .unwrap();
    let tau = 0.15;
    let sol = solve_static_cost(&mu, &sigma, tau, &pot, &graph, &StaticOptions::default()).unwrap();
    let induced = sol.pair.induced_target(tau, &pot, &graph).unwrap();
    let defect = (0..2)
        .flat_map(|g| (0..n).map(move |i| (g, i)))
        .map(|(g, i)| (induced.values()[(i, g)] - sigma.values()[(i, g)]).abs())
        .fold(0.0f64, f64::max);
    assert!(defect < 1e-8, "defect {defect}");
    // Squared distances are symmetric with zero diagonal.
    let d2 = squared_distances(d);
    assert_eq!(d2[(3, 3)], 0.0);
    assert_eq!(d2[(1, 5)], d2[(5, 1)]);
}
