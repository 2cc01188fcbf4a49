//! Independent oracles for the reaction-diffusion flow: a standalone
//! drift-diffusion stencil (bitwise comparison), a hand evaluation of the
//! full right-hand side on a 3x2 grid, Richardson step-halving ratios, and
//! weak-form/refinement studies.

use nalgebra::{DMatrix, DVector};
use semidot::domain::{
    equilibrium_density, GridDomain, SemiDiscreteDensity, SemiDiscreteField,
};
use semidot::graph::Graph;
use semidot::mobility::Mobility;
use semidot::pde::{rhs, rhs_field, run, step, weak_form_residual, FlowConfig, Scheme};
use semidot::potentials::PotentialPair;

fn gaussian_bump(d: GridDomain, nodes: usize) -> SemiDiscreteDensity {
    SemiDiscreteDensity::from_unnormalized(
        SemiDiscreteField::from_fn(d, nodes, |x, g| {
            (-(x[0] - 0.2).powi(2) / 0.5).exp() + 0.3 + 0.1 * g as f64
        })
        .unwrap(),
    )
    .unwrap()
}

/// K = 0 decouples the right-hand side into per-node drift-diffusion,
/// bitwise equal to a standalone stencil evaluated here with the same
/// formulas.
#[test]
fn single_node_rhs_matches_standalone_stencil_bitwise() {
    let n = 41;
    let d = GridDomain::new(1, 2.0, n).unwrap();
    let v = SemiDiscreteField::from_fn(d, 1, |x, _| 0.7 * x[0] * x[0] - 0.3 * x[0]).unwrap();
    let pot = PotentialPair::with_zero_weight(v.clone()).unwrap();
    let graph = Graph::new(vec!["only".into()], DMatrix::zeros(1, 1)).unwrap();
    let mob = Mobility::mass_independent(&pot);
    let f = gaussian_bump(d, 1);

    let lib = rhs(&f, &pot, &graph, &mob).unwrap();

    // Standalone stencil: flux form through u = f e^V with arithmetic-mean
    // e^{-V} face conductances and trapezoid cell weights.
    let dx = d.spacing();
    let mut weights = vec![dx; n];
    weights[0] = 0.5 * dx;
    weights[n - 1] = 0.5 * dx;
    let vv: Vec<f64> = (0..n).map(|i| v.values()[(i, 0)]).collect();
    let ev: Vec<f64> = vv.iter().map(|&x| x.exp()).collect();
    let env: Vec<f64> = vv.iter().map(|&x| (-x).exp()).collect();
    let mut oracle = vec![0.0f64; n];
    for c in 0..n - 1 {
        let nu = c + 1;
        let w_face = 0.5 * (env[c] + env[nu]);
        let u_c = f.values()[(c, 0)] * ev[c];
        let u_nu = f.values()[(nu, 0)] * ev[nu];
        let flux = 1.0 * w_face * (u_nu - u_c) / dx;
        oracle[c] += flux / weights[c];
        oracle[nu] -= flux / weights[nu];
    }
    for c in 0..n {
        assert_eq!(
            lib.values()[(c, 0)],
            oracle[c],
            "cell {c}: bitwise mismatch"
        );
    }
}

/// Full right-hand side on a 3-point grid with 2 nodes against a longhand
/// evaluation of the same discrete formulas.
#[test]
fn rhs_matches_longhand_six_cell_evaluation() {
    let d = GridDomain::new(1, 1.0, 3).unwrap(); // x = -1, 0, 1; dx = 1
    let v_tab = [[0.2, -0.1], [0.0, 0.3], [-0.4, 0.1]]; // [cell][node]
    let w_tab = [0.1, 0.0, 0.2];
    let f_tab = [[0.5, 0.8], [1.2, 0.6], [0.9, 1.1]];
    let v = SemiDiscreteField::new(
        d,
        DMatrix::from_fn(3, 2, |i, g| v_tab[i][g]),
    )
    .unwrap();
    let pot = PotentialPair::new(v, DVector::from_row_slice(&w_tab)).unwrap();
    let graph = Graph::complete(2, 1.5).unwrap();
    let mob = Mobility::mass_independent(&pot);
    let f = SemiDiscreteField::new(d, DMatrix::from_fn(3, 2, |i, g| f_tab[i][g])).unwrap();

    let lib = rhs_field(&f, &pot, &graph, &mob).unwrap();

    // Longhand: weights (1/2, 1, 1/2); per node g the two face fluxes
    //   F_a = 0.5 (e^{-V0} + e^{-V1}) (f1 e^{V1} - f0 e^{V0}),
    //   F_b = 0.5 (e^{-V1} + e^{-V2}) (f2 e^{V2} - f1 e^{V1}),
    // rhs_spatial = (2 F_a, F_b - F_a, -2 F_b); exchange per cell i:
    //   rhs_exch(i, g) = -(phi(i,g) - phi(i,g')) * K * e^{-W(i)}.
    let mut expect = [[0.0f64; 2]; 3];
    for g in 0..2 {
        let u: Vec<f64> = (0..3).map(|i| f_tab[i][g] * v_tab[i][g].exp()).collect();
        let fa = 0.5 * ((-v_tab[0][g]).exp() + (-v_tab[1][g]).exp()) * (u[1] - u[0]);
        let fb = 0.5 * ((-v_tab[1][g]).exp() + (-v_tab[2][g]).exp()) * (u[2] - u[1]);
        expect[0][g] += 2.0 * fa;
        expect[1][g] += fb - fa;
        expect[2][g] += -2.0 * fb;
    }
    for i in 0..3 {
        let phi0 = f_tab[i][0].ln() + v_tab[i][0];
        let phi1 = f_tab[i][1].ln() + v_tab[i][1];
        let ew = (-w_tab[i]).exp();
        expect[i][0] += -(phi0 - phi1) * 1.5 * ew;
        expect[i][1] += -(phi1 - phi0) * 1.5 * ew;
    }
    for i in 0..3 {
        for g in 0..2 {
            assert!(
                (lib.values()[(i, g)] - expect[i][g]).abs() < 1e-13,
                "cell {i} node {g}: {} vs {}",
                lib.values()[(i, g)],
                expect[i][g]
            );
        }
    }
}

/// Same longhand check with the log-mean mobility: the exchange term uses
/// theta_log of the e^V-scaled masses, evaluated here from its definition.
#[test]
fn rhs_matches_longhand_with_log_mean_mobility() {
    let d = GridDomain::new(1, 1.0, 3).unwrap();
    let v_tab = [[0.2, -0.1], [0.0, 0.3], [-0.4, 0.1]];
    let f_tab = [[0.5, 0.8], [1.2, 0.6], [0.9, 1.1]];
    let v = SemiDiscreteField::new(d, DMatrix::from_fn(3, 2, |i, g| v_tab[i][g])).unwrap();
    let pot = PotentialPair::with_zero_weight(v).unwrap();
    let graph = Graph::complete(2, 2.0).unwrap();
    let mob = Mobility::log_mean_scaled(&pot);
    let f = SemiDiscreteField::new(d, DMatrix::from_fn(3, 2, |i, g| f_tab[i][g])).unwrap();

    let lib = rhs_field(&f, &pot, &graph, &mob).unwrap();

    for i in 0..3 {
        // Spatial part with W-free conductances, as in the previous test.
        let mut expect = [0.0f64; 2];
        for g in 0..2 {
            let u: Vec<f64> = (0..3).map(|j| f_tab[j][g] * v_tab[j][g].exp()).collect();
            let fa = 0.5 * ((-v_tab[0][g]).exp() + (-v_tab[1][g]).exp()) * (u[1] - u[0]);
            let fb = 0.5 * ((-v_tab[1][g]).exp() + (-v_tab[2][g]).exp()) * (u[2] - u[1]);
            expect[g] = match i {
                0 => 2.0 * fa,
                1 => fb - fa,
                _ => -2.0 * fb,
            };
        }
        let a = f_tab[i][0] * v_tab[i][0].exp();
        let b = f_tab[i][1] * v_tab[i][1].exp();
        let theta = (a - b) / (a.ln() - b.ln());
        let phi0 = f_tab[i][0].ln() + v_tab[i][0];
        let phi1 = f_tab[i][1].ln() + v_tab[i][1];
        expect[0] += -(phi0 - phi1) * 2.0 * theta;
        expect[1] += -(phi1 - phi0) * 2.0 * theta;
        for g in 0..2 {
            assert!(
                (lib.values()[(i, g)] - expect[g]).abs() < 1e-13,
                "cell {i} node {g}"
            );
        }
    }
}

/// With the log-mean mobility the right-hand side is linear in f
/// (the product identity of the logarithmic mean): checked on
/// non-normalized fields.
#[test]
fn log_mean_rhs_is_linear() {
    let d = GridDomain::new(1, 1.5, 25).unwrap();
    let v = SemiDiscreteField::from_fn(d, 3, |x, g| {
        0.4 * x[0] * x[0] + 0.2 * (g as f64) * x[0]
    })
    .unwrap();
    let pot = PotentialPair::with_zero_weight(v).unwrap();
    let graph = Graph::complete(3, 0.7).unwrap();
    let mob = Mobility::log_mean_scaled(&pot);
    let f1 = SemiDiscreteField::from_fn(d, 3, |x, g| {
        1.0 + 0.5 * (x[0] + g as f64).sin().powi(2)
    })
    .unwrap();
    let f2 = SemiDiscreteField::from_fn(d, 3, |x, g| {
        0.3 + 0.2 * (x[0] * 2.0 - g as f64).cos().powi(2)
    })
    .unwrap();
    let (alpha, beta) = (0.7, 1.9);
    let mix = SemiDiscreteField::new(d, alpha * f1.values() + beta * f2.values()).unwrap();
    let r1 = rhs_field(&f1, &pot, &graph, &mob).unwrap();
    let r2 = rhs_field(&f2, &pot, &graph, &mob).unwrap();
    let rm = rhs_field(&mix, &pot, &graph, &mob).unwrap();
    let combo = alpha * r1.values() + beta * r2.values();
    let scale = combo.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1e-30);
    let defect = (rm.values() - combo)
        .iter()
        .fold(0.0f64, |a, &x| a.max(x.abs()));
    assert!(defect / scale < 1e-10, "relative defect {}", defect / scale);
}

fn default_instance() -> (GridDomain, PotentialPair, Graph, Mobility) {
    let d = GridDomain::new(1, 2.0, 49).unwrap();
    let v = SemiDiscreteField::from_fn(d, 2, |x, g| {
        0.5 * (x[0] - 0.2 * g as f64).powi(2) + 0.2 * g as f64
    })
    .unwrap();
    let pot = PotentialPair::with_zero_weight(v).unwrap();
    let graph = Graph::complete(2, 1.0).unwrap();
    let mob = Mobility::mass_independent(&pot);
    (d, pot, graph, mob)
}

/// One step from the equilibrium stays at the equilibrium to 1e-10.
#[test]
fn step_fixes_equilibrium() {
    let (d, pot, graph, mob) = default_instance();
    let f = equilibrium_density(&pot).unwrap();
    for scheme in [Scheme::Explicit, Scheme::SemiImplicitDiffusion] {
        let cfg = FlowConfig::new(d, &pot, None, 1.0, scheme, 1).unwrap();
        let f1 = step(&f, &cfg, &pot, &graph, &mob).unwrap();
        let diff = (f1.values() - f.values())
            .iter()
            .fold(0.0f64, |a, &x| a.max(x.abs()));
        assert!(diff < 1e-10, "{scheme:?}: drift {diff}");
    }
}

/// Richardson comparisons. Both schemes are first-order in time, so
/// (a) the one-step vs two-half-steps difference shrinks about 4x when the
/// step is halved, and (b) the global error at fixed horizon shrinks about
/// 2x. Both facts are asserted for both schemes.
#[test]
fn richardson_step_halving_ratios() {
    let (d, pot, graph, mob) = default_instance();
    let f0 = gaussian_bump(d, 2);
    let sup_diff = |a: &SemiDiscreteDensity, b: &SemiDiscreteDensity| {
        (a.values() - b.values())
            .iter()
            .fold(0.0f64, |acc, &x| acc.max(x.abs()))
    };
    for scheme in [Scheme::Explicit, Scheme::SemiImplicitDiffusion] {
        let base_dt = FlowConfig::default_dt(d, &pot) * 0.5;
        // Local: one step of dt vs two steps of dt/2.
        let local = |dt: f64| {
            let cfg1 = FlowConfig::new(d, &pot, Some(dt), dt, scheme, 1).unwrap();
            let cfg2 = FlowConfig::new(d, &pot, Some(0.5 * dt), dt, scheme, 1).unwrap();
            let one = step(&f0, &cfg1, &pot, &graph, &mob).unwrap();
            let half = step(&f0, &cfg2, &pot, &graph, &mob).unwrap();
            let two = step(&half, &cfg2, &pot, &graph, &mob).unwrap();
            sup_diff(&one, &two)
        };
        let l1 = local(base_dt);
        let l2 = local(0.5 * base_dt);
        let local_ratio = l1 / l2;
        assert!(
            (3.0..=5.5).contains(&local_ratio),
            "{scheme:?}: local ratio {local_ratio} ({l1} / {l2})"
        );
        // Global: error at T against a much finer reference run.
        let t_final = 64.0 * base_dt;
        let at_t = |dt: f64| {
            let cfg = FlowConfig::new(d, &pot, Some(dt), t_final, scheme, usize::MAX).unwrap();
            run(&f0, &cfg, &pot, &graph, &mob).unwrap().last().clone()
        };
        let reference = at_t(base_dt / 16.0);
        let g1 = sup_diff(&at_t(base_dt), &reference);
        let g2 = sup_diff(&at_t(0.5 * base_dt), &reference);
        let global_ratio = g1 / g2;
        assert!(
            (1.5..=3.0).contains(&global_ratio),
            "{scheme:?}: global ratio {global_ratio} ({g1} / {g2})"
        );
        assert!(g2 < g1, "{scheme:?}: refinement must reduce the error");
    }
}

/// Perturbed equilibrium: the L1 distance to equilibrium decreases along
/// the run and ends below its initial value.
#[test]
fn perturbed_equilibrium_relaxes_monotonically() {
    let (d, pot, graph, mob) = default_instance();
    let f_inf = equilibrium_density(&pot).unwrap();
    let f0 = SemiDiscreteDensity::from_unnormalized(
        SemiDiscreteField::new(
            d,
            f_inf
                .values()
                .map_with_location(|i, _, v| v * (1.0 + 0.25 * (3.0 * d.coords(i)[0]).sin())),
        )
        .unwrap(),
    )
    .unwrap();
    let cfg = FlowConfig::new(d, &pot, None, 0.5, Scheme::Explicit, 50).unwrap();
    let traj = run(&f0, &cfg, &pot, &graph, &mob).unwrap();
    let weights = d.cell_weights();
    let l1 = |f: &SemiDiscreteDensity| {
        let mut acc = 0.0;
        for g in 0..2 {
            for i in 0..d.num_cells() {
                acc += (f.values()[(i, g)] - f_inf.values()[(i, g)]).abs() * weights[i];
            }
        }
        acc
    };
    let dists: Vec<f64> = traj.densities.iter().map(l1).collect();
    for k in 1..dists.len() {
        assert!(
            dists[k] <= dists[k - 1] * (1.0 + 1e-9),
            "L1 distance increased at recorded index {k}: {} -> {}",
            dists[k - 1],
            dists[k]
        );
    }
    assert!(dists.last().unwrap() < &(0.5 * dists[0]));
}

/// K = 0: per-node masses are constant in time.
#[test]
fn zero_kernel_preserves_node_masses() {
    let d = GridDomain::new(1, 2.0, 33).unwrap();
    let v = SemiDiscreteField::from_fn(d, 2, |x, g| 0.5 * x[0] * x[0] + 0.1 * g as f64).unwrap();
    let pot = PotentialPair::with_zero_weight(v).unwrap();
    let graph = Graph::new(
        vec!["a".into(), "b".into()],
        DMatrix::zeros(2, 2),
    )
    .unwrap();
    let mob = Mobility::mass_independent(&pot);
    let f0 = gaussian_bump(d, 2);
    let m0 = f0.node_masses();
    let cfg = FlowConfig::new(d, &pot, None, 0.3, Scheme::Explicit, 100).unwrap();
    let traj = run(&f0, &cfg, &pot, &graph, &mob).unwrap();
    let m1 = traj.last().node_masses();
    for g in 0..2 {
        assert!(
            (m1[g] - m0[g]).abs() < 1e-12,
            "node {g}: {} -> {}",
            m0[g],
            m1[g]
        );
    }
}

/// K > 0 with nearly all mass on one node: node masses relax toward the
/// equilibrium split.
#[test]
fn node_masses_relax_toward_equilibrium() {
    let (d, pot, graph, mob) = default_instance();
    let f_inf = equilibrium_density(&pot).unwrap();
    let m_inf = f_inf.node_masses();
    let f0 = SemiDiscreteDensity::from_unnormalized(
        SemiDiscreteField::from_fn(d, 2, |x, g| {
            let profile = (-(0.5 * (x[0]).powi(2))).exp();
            if g == 0 {
                profile
            } else {
                1e-3 * profile
            }
        })
        .unwrap(),
    )
    .unwrap();
    let cfg = FlowConfig::new(d, &pot, None, 4.0, Scheme::Explicit, 1000).unwrap();
    let traj = run(&f0, &cfg, &pot, &graph, &mob).unwrap();
    let m_t = traj.last().node_masses();
    for g in 0..2 {
        assert!(
            (m_t[g] - m_inf[g]).abs() < 5e-3,
            "node {g}: mass {} vs equilibrium {}",
            m_t[g],
            m_inf[g]
        );
    }
}

/// Weak-form identity: constant test functions see only mass conservation.
#[test]
fn weak_form_constant_test_function() {
    let (d, pot, graph, mob) = default_instance();
    let f0 = gaussian_bump(d, 2);
    let cfg = FlowConfig::new(d, &pot, None, 0.1, Scheme::Explicit, 10).unwrap();
    let traj = run(&f0, &cfg, &pot, &graph, &mob).unwrap();
    let zeta = SemiDiscreteField::constant(d, 2, 3.7).unwrap();
    let res = weak_form_residual(&traj, &zeta, 0.0, 0.1, &pot, &graph, &mob).unwrap();
    assert!(res < 1e-10, "residual {res}");
}

/// Weak-form identity on the stationary trajectory with zeta = x. The
/// residual is the no-flux boundary remainder, here suppressed by a
/// strongly confined potential whose e^{-V} tail at the box boundary is
/// below 1e-4, so the residual sits far under the discretization scale.
#[test]
fn weak_form_stationary_linear_test_function() {
    let d = GridDomain::new(1, 2.5, 49).unwrap();
    let v = SemiDiscreteField::from_fn(d, 2, |x, g| {
        2.0 * (x[0] - 0.2 * g as f64).powi(2) + 0.2 * g as f64
    })
    .unwrap();
    let pot = PotentialPair::with_zero_weight(v).unwrap();
    let graph = Graph::complete(2, 1.0).unwrap();
    let mob = Mobility::mass_independent(&pot);
    let f = equilibrium_density(&pot).unwrap();
    let cfg = FlowConfig::new(d, &pot, None, 0.1, Scheme::Explicit, 10).unwrap();
    let traj = run(&f, &cfg, &pot, &graph, &mob).unwrap();
    let zeta = SemiDiscreteField::from_fn(d, 2, |x, _| x[0]).unwrap();
    let res = weak_form_residual(&traj, &zeta, 0.0, 0.1, &pot, &graph, &mob).unwrap();
    assert!(res < 1e-5, "residual {res}");
}

/// Refining space and time together shrinks the weak-form residual. The
/// test function cos(pi x / L) has zero normal derivative at the box
/// boundary, so no refinement-independent boundary remainder hides the
/// O(dx^2 + dt) decay.
#[test]
fn weak_form_residual_decreases_under_refinement() {
    let residual_at = |n: usize| {
        let d = GridDomain::new(1, 2.0, n).unwrap();
        let v = SemiDiscreteField::from_fn(d, 2, |x, g| {
            0.5 * (x[0] - 0.2 * g as f64).powi(2) + 0.2 * g as f64
        })
        .unwrap();
        let pot = PotentialPair::with_zero_weight(v).unwrap();
        let graph = Graph::complete(2, 1.0).unwrap();
        let mob = Mobility::mass_independent(&pot);
        let f0 = gaussian_bump(d, 2);
        let cfg = FlowConfig::new(d, &pot, None, 0.2, Scheme::Explicit, 5).unwrap();
        let traj = run(&f0, &cfg, &pot, &graph, &mob).unwrap();
        let zeta = SemiDiscreteField::from_fn(d, 2, |x, g| {
            (std::f64::consts::PI * x[0] / 2.0).cos() + 0.5 * g as f64
        })
        .unwrap();
        weak_form_residual(&traj, &zeta, 0.0, 0.2, &pot, &graph, &mob).unwrap()
    };
    let coarse = residual_at(25);
    let fine = residual_at(49);
    assert!(
        fine < 0.7 * coarse,
        "refinement must shrink the residual: {coarse} -> {fine}"
    );
}
