//! Potentials on the product space and the built-in catalog.
//!
//! A [`PotentialPair`] bundles the node-dependent potential `V(x, g)` driving
//! the entropy with the node-independent mobility weight `W(x)` used by the
//! exchange terms, together with precomputed data: the spatial gradient of
//! `V` (centered differences inside, second-order one-sided at the
//! boundary), the tables `e^{V}` and `e^{-W}`, and the compatibility
//! constants `lambda', Lambda'` with
//! `lambda' e^{-W(x)} <= e^{-V(x,g)} <= Lambda' e^{-W(x)}`.
//!
//! Closed-form catalog entries (parameters per graph node where noted):
//!
//! * `quadratic`: `V = 0.5 a ((x1 - c_g)^2 + x2^2) + b_g`;
//! * `double_well`: `V = a (x1^2 - w^2)^2 + 0.5 x2^2 + b_g`;
//! * `tilted`: `V = 0.5 a |x|^2 + s_g x1 + b_g`;
//! * `tabulated`: explicit values per (cell, node).
//!
//! The weight `W` has its own catalog (`constant`, `quadratic`,
//! `tabulated`) without node dependence.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{GridDomain, SemiDiscreteField};
use crate::error::{Error, Result};

/// Node potential `V` and mobility weight `W` with precomputed tables.
#[derive(Debug, Clone)]
pub struct PotentialPair {
    v: SemiDiscreteField,
    w_grid: DVector<f64>,
    grad_v: Vec<DMatrix<f64>>,
    exp_v: DMatrix<f64>,
    exp_neg_v: DMatrix<f64>,
    exp_neg_w: DVector<f64>,
    compat_lower: f64,
    compat_upper: f64,
}

impl PotentialPair {
    /// Builds the pair from a node potential and a grid weight, computing
    /// gradients, exponential tables, and compatibility constants.
    pub fn new(v: SemiDiscreteField, w_grid: DVector<f64>) -> Result<Self> {
        let domain = v.domain();
        if w_grid.len() != domain.num_cells() {
            return Err(Error::InvalidField(format!(
                "weight W has {} entries but the domain has {} cells",
                w_grid.len(),
                domain.num_cells()
            )));
        }
        if w_grid.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidField("weight W must be finite".into()));
        }
        let grad_v = (0..domain.dimension())
            .map(|axis| crate::domain::spatial_gradient(&v, axis))
            .collect();
        let exp_v = v.values().map(f64::exp);
        let exp_neg_v = v.values().map(|x| (-x).exp());
        let exp_neg_w = w_grid.map(|x| (-x).exp());
        let mut lower = f64::INFINITY;
        let mut upper = f64::NEG_INFINITY;
        for g in 0..v.num_nodes() {
            for i in 0..domain.num_cells() {
                let ratio = (w_grid[i] - v.values()[(i, g)]).exp();
                lower = lower.min(ratio);
                upper = upper.max(ratio);
            }
        }
        Ok(Self {
            v,
            w_grid,
            grad_v,
            exp_v,
            exp_neg_v,
            exp_neg_w,
            compat_lower: lower,
            compat_upper: upper,
        })
    }

    /// Convenience constructor with `W = 0`.
    pub fn with_zero_weight(v: SemiDiscreteField) -> Result<Self> {
        let n = v.domain().num_cells();
        Self::new(v, DVector::zeros(n))
    }

    /// Builds the pair from catalog descriptors.
    pub fn from_specs(
        domain: GridDomain,
        nodes: usize,
        v_spec: &PotentialSpec,
        w_spec: &WeightSpec,
    ) -> Result<Self> {
        let v = v_spec.build(domain, nodes)?;
        let w = w_spec.build(domain)?;
        Self::new(v, w)
    }

    /// The node potential `V`.
    pub fn v(&self) -> &SemiDiscreteField {
        &self.v
    }

    /// The grid weight `W`.
    pub fn w_grid(&self) -> &DVector<f64> {
        &self.w_grid
    }

    /// Precomputed spatial gradient of `V` along `axis`.
    pub fn grad_v(&self, axis: usize) -> &DMatrix<f64> {
        &self.grad_v[axis]
    }

    /// Largest gradient magnitude of `V` over all axes and cells.
    pub fn max_grad_v(&self) -> f64 {
        self.grad_v
            .iter()
            .flat_map(|m| m.iter())
            .fold(0.0f64, |a, &x| a.max(x.abs()))
    }

    /// Table of `e^{V(x,g)}`.
    pub fn exp_v(&self) -> &DMatrix<f64> {
        &self.exp_v
    }

    /// Table of `e^{-V(x,g)}`.
    pub fn exp_neg_v(&self) -> &DMatrix<f64> {
        &self.exp_neg_v
    }

    /// Table of `e^{-W(x)}`.
    pub fn exp_neg_w(&self) -> &DVector<f64> {
        &self.exp_neg_w
    }

    /// Compatibility constants `(lambda', Lambda')` with
    /// `lambda' e^{-W} <= e^{-V} <= Lambda' e^{-W}` on the grid.
    pub fn compatibility(&self) -> (f64, f64) {
        (self.compat_lower, self.compat_upper)
    }
}

/// Quadratic node potential parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSpec {
    /// Curvature `a` of `0.5 a |x - c|^2`.
    pub strength: f64,
    /// Per-node center along the first axis (defaults to 0).
    #[serde(default)]
    pub centers: Option<Vec<f64>>,
    /// Per-node additive offset (defaults to 0).
    #[serde(default)]
    pub offsets: Option<Vec<f64>>,
}

/// Double-well node potential parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoubleWellSpec {
    /// Prefactor `a` of `a (x1^2 - w^2)^2`.
    pub strength: f64,
    /// Well position `w` (wells at `x1 = -w` and `x1 = +w`).
    pub well: f64,
    /// Per-node additive offset (defaults to 0).
    #[serde(default)]
    pub offsets: Option<Vec<f64>>,
}

/// Tilted quadratic node potential parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TiltedSpec {
    /// Curvature `a` of `0.5 a |x|^2`.
    pub strength: f64,
    /// Per-node tilt `s_g` multiplying `x1`.
    pub tilts: Vec<f64>,
    /// Per-node additive offset (defaults to 0).
    #[serde(default)]
    pub offsets: Option<Vec<f64>>,
}

/// Tabulated node potential values, row-major `[cell][node]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabulatedSpec {
    /// Values, one row per grid cell, one entry per node.
    pub values: Vec<Vec<f64>>,
}

/// Catalog descriptor for the node potential `V`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialSpec {
    /// `V = 0.5 a ((x1 - c_g)^2 + x2^2) + b_g`.
    Quadratic(QuadraticSpec),
    /// `V = a (x1^2 - w^2)^2 + 0.5 x2^2 + b_g`.
    DoubleWell(DoubleWellSpec),
    /// `V = 0.5 a |x|^2 + s_g x1 + b_g`.
    Tilted(TiltedSpec),
    /// Explicit per-cell, per-node values.
    Tabulated(TabulatedSpec),
}

fn per_node(params: &Option<Vec<f64>>, nodes: usize, what: &str) -> Result<Vec<f64>> {
    match params {
        None => Ok(vec![0.0; nodes]),
        Some(v) if v.len() == nodes => Ok(v.clone()),
        Some(v) => Err(Error::InvalidParameter(format!(
            "{what} must have one entry per node ({nodes}), got {}",
            v.len()
        ))),
    }
}

impl PotentialSpec {
    /// Evaluates the catalog entry on a grid for `nodes` graph nodes.
    pub fn build(&self, domain: GridDomain, nodes: usize) -> Result<SemiDiscreteField> {
        match self {
            PotentialSpec::Quadratic(q) => {
                let centers = per_node(&q.centers, nodes, "centers")?;
                let offsets = per_node(&q.offsets, nodes, "offsets")?;
                let a = q.strength;
                SemiDiscreteField::from_fn(domain, nodes, |x, g| {
                    let dx1 = x[0] - centers[g];
                    0.5 * a * (dx1 * dx1 + x[1] * x[1]) + offsets[g]
                })
            }
            PotentialSpec::DoubleWell(p) => {
                let offsets = per_node(&p.offsets, nodes, "offsets")?;
                let (a, w) = (p.strength, p.well);
                SemiDiscreteField::from_fn(domain, nodes, |x, g| {
                    let q = x[0] * x[0] - w * w;
                    a * q * q + 0.5 * x[1] * x[1] + offsets[g]
                })
            }
            PotentialSpec::Tilted(p) => {
                if p.tilts.len() != nodes {
                    return Err(Error::InvalidParameter(format!(
                        "tilts must have one entry per node ({nodes}), got {}",
                        p.tilts.len()
                    )));
                }
                let offsets = per_node(&p.offsets, nodes, "offsets")?;
                let a = p.strength;
                let tilts = p.tilts.clone();
                SemiDiscreteField::from_fn(domain, nodes, |x, g| {
                    0.5 * a * (x[0] * x[0] + x[1] * x[1]) + tilts[g] * x[0] + offsets[g]
                })
            }
            PotentialSpec::Tabulated(t) => {
                let cells = domain.num_cells();
                if t.values.len() != cells {
                    return Err(Error::InvalidParameter(format!(
                        "tabulated potential has {} rows, expected {cells}",
                        t.values.len()
                    )));
                }
                let mut m = DMatrix::zeros(cells, nodes);
                for (i, row) in t.values.iter().enumerate() {
                    if row.len() != nodes {
                        return Err(Error::InvalidParameter(format!(
                            "tabulated potential row {i} has {} entries, expected {nodes}",
                            row.len()
                        )));
                    }
                    for (g, &val) in row.iter().enumerate() {
                        m[(i, g)] = val;
                    }
                }
                SemiDiscreteField::new(domain, m)
            }
        }
    }
}

/// Constant weight parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantWeightSpec {
    /// The constant value of `W`.
    pub value: f64,
}

/// Quadratic weight parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticWeightSpec {
    /// Curvature `a` of `0.5 a |x|^2`.
    pub strength: f64,
}

/// Tabulated weight values per grid cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabulatedWeightSpec {
    /// One value per grid cell, row-major.
    pub values: Vec<f64>,
}

/// Catalog descriptor for the mobility weight `W`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSpec {
    /// `W = value` everywhere.
    Constant(ConstantWeightSpec),
    /// `W = 0.5 a |x|^2`.
    Quadratic(QuadraticWeightSpec),
    /// Explicit per-cell values.
    Tabulated(TabulatedWeightSpec),
}

impl WeightSpec {
    /// Evaluates the weight on a grid.
    pub fn build(&self, domain: GridDomain) -> Result<DVector<f64>> {
        match self {
            WeightSpec::Constant(c) => {
                if !c.value.is_finite() {
                    return Err(Error::InvalidParameter("weight must be finite".into()));
                }
                Ok(DVector::from_element(domain.num_cells(), c.value))
            }
            WeightSpec::Quadratic(q) => Ok(DVector::from_fn(domain.num_cells(), |c, _| {
                0.5 * q.strength * domain.coord_norm_sq(c)
            })),
            WeightSpec::Tabulated(t) => {
                if t.values.len() != domain.num_cells() {
                    return Err(Error::InvalidParameter(format!(
                        "tabulated weight has {} entries, expected {}",
                        t.values.len(),
                        domain.num_cells()
                    )));
                }
                if t.values.iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidParameter("weight must be finite".into()));
                }
                Ok(DVector::from_vec(t.values.clone()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain() -> GridDomain {
        GridDomain::new(1, 1.0, 9).unwrap()
    }

    #[test]
    fn quadratic_gradient_is_exact_for_quadratics() {
        // Centered differences differentiate quadratics exactly in the
        // interior; the second-order one-sided stencil is exact as well.
        let spec = PotentialSpec::Quadratic(QuadraticSpec {
            strength: 2.0,
            centers: Some(vec![0.5]),
            offsets: None,
        });
        let v = spec.build(domain(), 1).unwrap();
        let pot = PotentialPair::with_zero_weight(v).unwrap();
        for c in 0..9 {
            let x = pot.v().domain().coords(c)[0];
            let expected = 2.0 * (x - 0.5);
            assert!(
                (pot.grad_v(0)[(c, 0)] - expected).abs() < 1e-12,
                "cell {c}"
            );
        }
    }

    #[test]
    fn compatibility_constants_bracket_the_ratio() {
        let spec = PotentialSpec::Tilted(TiltedSpec {
            strength: 1.0,
            tilts: vec![0.3, -0.3],
            offsets: Some(vec![0.0, 0.7]),
        });
        let v = spec.build(domain(), 2).unwrap();
        let w = WeightSpec::Quadratic(QuadraticWeightSpec { strength: 1.0 })
            .build(domain())
            .unwrap();
        let pot = PotentialPair::new(v, w).unwrap();
        let (lo, hi) = pot.compatibility();
        assert!(lo <= hi);
        for g in 0..2 {
            for i in 0..9 {
                let ratio = (pot.w_grid()[i] - pot.v().values()[(i, g)]).exp();
                assert!(ratio >= lo - 1e-15 && ratio <= hi + 1e-15);
            }
        }
    }

    #[test]
    fn per_node_parameter_length_checked() {
        let spec = PotentialSpec::Quadratic(QuadraticSpec {
            strength: 1.0,
            centers: Some(vec![0.0]),
            offsets: None,
        });
        assert!(spec.build(domain(), 2).is_err());
    }

    #[test]
    fn specs_round_trip_through_json() {
        let spec = PotentialSpec::DoubleWell(DoubleWellSpec {
            strength: 1.0,
            well: 1.2,
            offsets: Some(vec![0.0, 0.1]),
        });
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("double_well"));
        let back: PotentialSpec = serde_json::from_str(&text).unwrap();
        match back {
            PotentialSpec::DoubleWell(d) => assert_eq!(d.well, 1.2),
            _ => panic!("wrong variant"),
        }
        let bad = r#"{"double_well": {"strength": 1.0, "well": 1.0, "depth": 2.0}}"#;
        assert!(serde_json::from_str::<PotentialSpec>(bad).is_err());
    }
}
