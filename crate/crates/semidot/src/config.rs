//! Run configurations for the experiment runner: a JSON-serializable
//! description of the instance (domain, graph, potentials, mobility,
//! data) plus experiment-specific numeric parameters.
//!
//! Configurations are schema-validated on load (unknown keys rejected,
//! every component re-validated through its constructor) and checked for
//! cross-field consistency by [`RunConfig::validate`], which reports
//! diagnostics without side effects.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{equilibrium_density, GridDomain, SemiDiscreteDensity, SemiDiscreteField};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::jko::MAX_TAU;
use crate::mobility::MobilityKind;
use crate::pde::{FlowConfig, Scheme};
use crate::potentials::{
    ConstantWeightSpec, PotentialPair, PotentialSpec, QuadraticSpec, TiltedSpec, WeightSpec,
};

/// The experiment an invocation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum Experiment {
    /// Integrate the entropy evolution and record the trajectory.
    Flow,
    /// Iterate the minimizing-movement scheme.
    Jko,
    /// Movement scheme versus the flow across a list of step sizes.
    Compare,
    /// Solve one static transport problem and audit its optimality.
    Cost,
    /// Approximate the dynamic transport distance between two densities.
    Dynamic,
    /// Integrate the geodesic or damped second-order dynamics.
    Geodesic,
    /// Run the structural invariant suite on the configured instance.
    Check,
}

impl Experiment {
    /// Stable lower-case name used in file names and reports.
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Flow => "flow",
            Experiment::Jko => "jko",
            Experiment::Compare => "compare",
            Experiment::Cost => "cost",
            Experiment::Dynamic => "dynamic",
            Experiment::Geodesic => "geodesic",
            Experiment::Check => "check",
        }
    }
}

impl std::fmt::Display for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Gaussian bump parameters for initial data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSpec {
    /// Center along the first axis.
    pub center: f64,
    /// Standard deviation.
    pub sigma: f64,
    /// Relative node masses (defaults to equal shares).
    #[serde(default)]
    pub node_shares: Option<Vec<f64>>,
    /// Additive floor keeping the density strictly positive (default 0).
    #[serde(default)]
    pub floor: f64,
}

/// Multiplicative cosine perturbation of the equilibrium.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    /// Relative amplitude; must stay below 1 in modulus.
    pub amplitude: f64,
    /// Number of half-periods across the box (default 1); integer counts
    /// keep the flux zero at the walls.
    #[serde(default = "one")]
    pub modes: usize,
    /// Per-node amplitude factors (defaults to all ones).
    #[serde(default)]
    pub node_factors: Option<Vec<f64>>,
}

fn one() -> usize {
    1
}

/// Density catalog for initial and target data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensitySpec {
    /// The stationary density `e^{-V} / Z`.
    Equilibrium,
    /// Constant on the whole product space.
    Uniform,
    /// A Gaussian bump along the first axis, optionally floored.
    Gaussian(GaussianSpec),
    /// `e^{-V} (1 + amplitude * factor_g * cos(modes pi (x1 + L) / 2L))`.
    PerturbedEquilibrium(PerturbationSpec),
    /// Explicit per-cell, per-node values (normalized on build).
    Tabulated { values: Vec<Vec<f64>> },
}

fn shares(params: &Option<Vec<f64>>, nodes: usize) -> Result<Vec<f64>> {
    match params {
        None => Ok(vec![1.0; nodes]),
        Some(v) if v.len() == nodes && v.iter().all(|s| s.is_finite() && *s >= 0.0) => {
            Ok(v.clone())
        }
        Some(v) => Err(Error::InvalidParameter(format!(
            "node shares must be {nodes} nonnegative numbers, got {v:?}"
        ))),
    }
}

impl DensitySpec {
    /// Builds the normalized density on the instance described by `pot`.
    pub fn build(&self, pot: &PotentialPair) -> Result<SemiDiscreteDensity> {
        let domain = pot.v().domain();
        let nodes = pot.v().num_nodes();
        match self {
            DensitySpec::Equilibrium => equilibrium_density(pot),
            DensitySpec::Uniform => SemiDiscreteDensity::from_unnormalized(
                SemiDiscreteField::constant(domain, nodes, 1.0)?,
            ),
            DensitySpec::Gaussian(g) => {
                if !(g.sigma.is_finite() && g.sigma > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "gaussian width must be positive, got {}",
                        g.sigma
                    )));
                }
                if !(g.floor.is_finite() && g.floor >= 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "gaussian floor must be nonnegative, got {}",
                        g.floor
                    )));
                }
                let share = shares(&g.node_shares, nodes)?;
                let (c, s, floor) = (g.center, g.sigma, g.floor);
                SemiDiscreteDensity::from_unnormalized(SemiDiscreteField::from_fn(
                    domain,
                    nodes,
                    |x, gi| {
                        let r2 = (x[0] - c) * (x[0] - c) + x[1] * x[1];
                        share[gi] * (floor + (-r2 / (2.0 * s * s)).exp())
                    },
                )?)
            }
            DensitySpec::PerturbedEquilibrium(p) => {
                let factors = match &p.node_factors {
                    None => vec![1.0; nodes],
                    Some(v) if v.len() == nodes => v.clone(),
                    Some(v) => {
                        return Err(Error::InvalidParameter(format!(
                            "node factors must have {nodes} entries, got {}",
                            v.len()
                        )))
                    }
                };
                let worst = factors
                    .iter()
                    .map(|f| (p.amplitude * f).abs())
                    .fold(0.0, f64::max);
                if !(worst < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "perturbation amplitude {worst} reaches 1; the density would \
                         touch zero"
                    )));
                }
                let l = domain.half_width();
                let k = p.modes as f64;
                let amp = p.amplitude;
                let env = pot.exp_neg_v();
                let values = nalgebra::DMatrix::from_fn(domain.num_cells(), nodes, |i, g| {
                    let x1 = domain.coords(i)[0];
                    let wave = (k * std::f64::consts::PI * (x1 + l) / (2.0 * l)).cos();
                    env[(i, g)] * (1.0 + amp * factors[g] * wave)
                });
                SemiDiscreteDensity::from_unnormalized(SemiDiscreteField::new(domain, values)?)
            }
            DensitySpec::Tabulated { values } => {
                let raw = PotentialSpec::Tabulated(crate::potentials::TabulatedSpec {
                    values: values.clone(),
                })
                .build(domain, nodes)?;
                SemiDiscreteDensity::from_unnormalized(raw)
            }
        }
    }
}

/// Recovers the flat cell index from coordinates produced by
/// [`SemiDiscreteField::from_fn`] (which walks cells in flat order).
fn domain_cell(domain: GridDomain, x: [f64; 2]) -> usize {
    let dx = domain.spacing();
    let to_idx = |c: f64| (((c + domain.half_width()) / dx).round() as usize)
        .min(domain.points_per_axis() - 1);
    let mut idx = [0usize; 2];
    idx[0] = to_idx(x[0]);
    if domain.dimension() == 2 {
        idx[1] = to_idx(x[1]);
    }
    domain.flat_index(idx)
}

/// Two-sided equilibrium envelope attached to the initial density.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSpec {
    /// Lower envelope factor.
    pub lambda: f64,
    /// Upper envelope factor.
    pub lambda_up: f64,
}

/// Experiment-specific numeric parameters; every field is optional and
/// requirements are checked per experiment.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    /// Movement step size (jko, cost).
    pub tau: Option<f64>,
    /// Movement step sizes for the comparison experiment.
    pub tau_list: Option<Vec<f64>>,
    /// Number of movement or integrator steps.
    pub steps: Option<usize>,
    /// Time step (flow, geodesic); the flow default is scheme-safe.
    pub dt: Option<f64>,
    /// Time horizon (flow, compare).
    pub t_final: Option<f64>,
    /// Time-stepping scheme for the flow (default explicit).
    pub scheme: Option<Scheme>,
    /// Recording stride (default 1).
    pub record_every: Option<usize>,
    /// Number of path intervals for the dynamic distance.
    pub t_steps: Option<usize>,
    /// Damping coefficient for the second-order dynamics (geodesic; 0
    /// selects the undamped geodesic system).
    pub gamma: Option<f64>,
    /// Reference flow step for the comparison experiment.
    pub ref_dt: Option<f64>,
    /// Iteration cap passed to the iterative solvers.
    pub max_iterations: Option<usize>,
}

/// A fully described, reproducible run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Which experiment to run.
    pub experiment: Experiment,
    /// Spatial grid.
    pub domain: GridDomain,
    /// Weighted graph, in the `{"nodes", "K"}` shape.
    pub graph: Graph,
    /// Node potential `V` (catalog entry or tabulated).
    pub potential: PotentialSpec,
    /// Mobility weight `W` (catalog entry or tabulated).
    pub weight: WeightSpec,
    /// Mobility kind.
    pub mobility: MobilityKind,
    /// Initial density.
    pub initial: DensitySpec,
    /// Target density (cost, dynamic).
    #[serde(default)]
    pub target: Option<DensitySpec>,
    /// Initial velocity potential (geodesic), from the potential catalog.
    #[serde(default)]
    pub velocity: Option<PotentialSpec>,
    /// Optional equilibrium envelope attached to the initial density.
    #[serde(default)]
    pub barrier: Option<BarrierSpec>,
    /// Numeric parameters.
    #[serde(default)]
    pub numerics: Numerics,
    /// Seed for any generated test data (the check experiment).
    #[serde(default)]
    pub seed: u64,
    /// Output directory; may be overridden on the command line.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses a configuration from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads a configuration file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    /// Builds the potential pair on the configured domain and graph.
    pub fn build_potentials(&self) -> Result<PotentialPair> {
        PotentialPair::from_specs(self.domain, self.graph.len(), &self.potential, &self.weight)
    }

    /// Builds the initial density, attaching the barrier envelope when one
    /// is configured.
    pub fn build_initial(&self, pot: &PotentialPair) -> Result<SemiDiscreteDensity> {
        let f = self.initial.build(pot)?;
        match self.barrier {
            Some(b) => f.with_barrier(b.lambda, b.lambda_up),
            None => Ok(f),
        }
    }

    /// Builds the target density, required by the cost and dynamic
    /// experiments.
    pub fn build_target(&self, pot: &PotentialPair) -> Result<SemiDiscreteDensity> {
        match &self.target {
            Some(spec) => spec.build(pot),
            None => Err(Error::Config(format!(
                "the {} experiment needs a target density",
                self.experiment
            ))),
        }
    }

    /// Builds the initial velocity potential for geodesic runs.
    pub fn build_velocity(&self, pot: &PotentialPair) -> Result<SemiDiscreteField> {
        match &self.velocity {
            Some(spec) => spec.build(self.domain, self.graph.len()),
            None => {
                let _ = pot;
                Err(Error::Config(
                    "the geodesic experiment needs a velocity potential".into(),
                ))
            }
        }
    }

    /// Schema and cross-field diagnostics; an empty list means the
    /// configuration is runnable as far as static checks can tell.
    pub fn validate(&self) -> Vec<String> {
        let mut notes = Vec::new();
        let pot = match self.build_potentials() {
            Ok(p) => p,
            Err(e) => {
                notes.push(format!("potentials do not build: {e}"));
                return notes;
            }
        };
        match self.initial.build(&pot) {
            Ok(f) => {
                if let Some(b) = self.barrier {
                    if let Err(e) = f.with_barrier(b.lambda, b.lambda_up) {
                        notes.push(format!(
                            "initial density violates the equilibrium envelope \
                             lambda e^-V <= f <= Lambda e^-V: {e}"
                        ));
                    }
                }
            }
            Err(e) => notes.push(format!("initial density does not build: {e}")),
        }
        let n = &self.numerics;
        let scheme = n.scheme.unwrap_or(Scheme::Explicit);
        if let Some(dt) = n.dt {
            if scheme == Scheme::Explicit && matches!(self.experiment, Experiment::Flow) {
                let bound = FlowConfig::explicit_cfl_bound(self.domain, &pot);
                if dt > bound {
                    notes.push(format!(
                        "explicit step {dt} exceeds the stability bound \
                         0.25 dx^2 / (1 + max|grad V| dx) = {bound}"
                    ));
                }
            }
            if !(dt.is_finite() && dt > 0.0) {
                notes.push(format!("time step must be positive, got {dt}"));
            }
        }
        let tau_ok = |tau: f64, notes: &mut Vec<String>| {
            if !(tau.is_finite() && tau > 0.0 && tau < MAX_TAU) {
                notes.push(format!(
                    "movement step size must lie in (0, {MAX_TAU}), got {tau}"
                ));
            }
        };
        match self.experiment {
            Experiment::Flow => {
                if !matches!(n.t_final, Some(t) if t.is_finite() && t > 0.0) {
                    notes.push("the flow experiment needs a positive t_final".into());
                }
            }
            Experiment::Jko => {
                match n.tau {
                    Some(tau) => tau_ok(tau, &mut notes),
                    None => notes.push("the jko experiment needs tau".into()),
                }
                if n.steps.is_none() {
                    notes.push("the jko experiment needs steps".into());
                }
            }
            Experiment::Compare => {
                let t_final = n.t_final.unwrap_or(0.0);
                if !(t_final.is_finite() && t_final > 0.0) {
                    notes.push("the compare experiment needs a positive t_final".into());
                }
                match &n.tau_list {
                    Some(list) if !list.is_empty() => {
                        for &tau in list {
                            tau_ok(tau, &mut notes);
                            if tau > 0.0 && t_final > 0.0 {
                                let k = t_final / tau;
                                if (k - k.round()).abs() > 1e-9 * k.max(1.0) {
                                    notes.push(format!(
                                        "step size {tau} does not divide the horizon {t_final}"
                                    ));
                                }
                            }
                        }
                    }
                    _ => notes.push("the compare experiment needs a nonempty tau_list".into()),
                }
            }
            Experiment::Cost => {
                match n.tau {
                    Some(tau) => tau_ok(tau, &mut notes),
                    None => notes.push("the cost experiment needs tau".into()),
                }
                match &self.target {
                    Some(spec) => {
                        if let Err(e) = spec.build(&pot) {
                            notes.push(format!("target density does not build: {e}"));
                        }
                    }
                    None => notes.push("the cost experiment needs a target density".into()),
                }
                if self.domain.dimension() != 1 {
                    notes.push("the static solver supports one-dimensional grids only".into());
                }
            }
            Experiment::Dynamic => match &self.target {
                Some(spec) => match spec.build(&pot) {
                    Ok(f) => {
                        if f.values().iter().any(|v| *v <= 0.0) {
                            notes.push(
                                "the dynamic distance needs a strictly positive target \
                                 density (use a positive floor)"
                                    .into(),
                            );
                        }
                    }
                    Err(e) => notes.push(format!("target density does not build: {e}")),
                },
                None => notes.push("the dynamic experiment needs a target density".into()),
            },
            Experiment::Geodesic => {
                if self.velocity.is_none() {
                    notes.push("the geodesic experiment needs a velocity potential".into());
                } else if let Err(e) = self.build_velocity(&pot) {
                    notes.push(format!("velocity potential does not build: {e}"));
                }
                if !matches!(n.dt, Some(dt) if dt.is_finite() && dt > 0.0) {
                    notes.push("the geodesic experiment needs a positive dt".into());
                }
                if n.steps.is_none() {
                    notes.push("the geodesic experiment needs steps".into());
                }
                if let Some(g) = n.gamma {
                    if !(g.is_finite() && g >= 0.0) {
                        notes.push(format!("damping must be nonnegative, got {g}"));
                    }
                }
            }
            Experiment::Check => {}
        }
        notes
    }

    /// A small, well-formed configuration for the given experiment; used
    /// as a starting point and by the test suite.
    pub fn template(experiment: Experiment) -> Self {
        let domain = GridDomain::new(1, 1.0, 17).expect("template domain");
        let graph = Graph::complete(2, 0.8).expect("template graph");
        let potential = PotentialSpec::Quadratic(QuadraticSpec {
            strength: 1.0,
            centers: None,
            offsets: Some(vec![0.0, 0.3]),
        });
        let weight = WeightSpec::Constant(ConstantWeightSpec { value: 0.2 });
        let mut cfg = RunConfig {
            experiment,
            domain,
            graph,
            potential,
            weight,
            mobility: MobilityKind::MassIndependent,
            initial: DensitySpec::Equilibrium,
            target: None,
            velocity: None,
            barrier: None,
            numerics: Numerics::default(),
            seed: 0,
            output_dir: None,
        };
        match experiment {
            Experiment::Flow => {
                cfg.numerics.t_final = Some(0.05);
                cfg.numerics.record_every = Some(10);
            }
            Experiment::Jko => {
                cfg.initial = DensitySpec::PerturbedEquilibrium(PerturbationSpec {
                    amplitude: 0.2,
                    modes: 1,
                    node_factors: None,
                });
                cfg.numerics.tau = Some(0.1);
                cfg.numerics.steps = Some(2);
            }
            Experiment::Compare => {
                cfg.initial = DensitySpec::PerturbedEquilibrium(PerturbationSpec {
                    amplitude: 0.2,
                    modes: 1,
                    node_factors: None,
                });
                cfg.numerics.tau_list = Some(vec![0.1, 0.05]);
                cfg.numerics.t_final = Some(0.2);
            }
            Experiment::Cost => {
                cfg.initial = DensitySpec::Equilibrium;
                cfg.target = Some(DensitySpec::PerturbedEquilibrium(PerturbationSpec {
                    amplitude: 0.25,
                    modes: 1,
                    node_factors: Some(vec![1.0, -1.0]),
                }));
                cfg.numerics.tau = Some(0.1);
            }
            Experiment::Dynamic => {
                cfg.initial = DensitySpec::Gaussian(GaussianSpec {
                    center: -0.3,
                    sigma: 0.35,
                    node_shares: Some(vec![0.6, 0.4]),
                    floor: 0.25,
                });
                cfg.target = Some(DensitySpec::Gaussian(GaussianSpec {
                    center: 0.3,
                    sigma: 0.35,
                    node_shares: Some(vec![0.45, 0.55]),
                    floor: 0.25,
                }));
                cfg.numerics.t_steps = Some(6);
            }
            Experiment::Geodesic => {
                cfg.initial = DensitySpec::PerturbedEquilibrium(PerturbationSpec {
                    amplitude: 0.15,
                    modes: 1,
                    node_factors: None,
                });
                cfg.velocity = Some(PotentialSpec::Tilted(TiltedSpec {
                    strength: 0.0,
                    tilts: vec![0.2, 0.2],
                    offsets: None,
                }));
                cfg.numerics.dt = Some(1e-3);
                cfg.numerics.steps = Some(50);
                cfg.numerics.record_every = Some(10);
                cfg.numerics.gamma = Some(0.0);
            }
            Experiment::Check => {}
        }
        cfg
    }
}
