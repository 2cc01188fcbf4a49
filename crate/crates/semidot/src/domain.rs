//! Spatial grids, semi-discrete fields and densities, and the relative
//! entropy functional.
//!
//! The spatial domain is the box `[-L, L]^d` (d = 1 or 2) discretized by a
//! vertex-centred uniform grid with `n` points per axis, spacing
//! `dx = 2L / (n - 1)`, and no-flux boundary. Integrals are evaluated with
//! trapezoid quadrature: interior cells carry weight `dx^d`, cells touching
//! the boundary carry the corresponding half weights, so that constants
//! integrate exactly.
//!
//! A semi-discrete field assigns a real value to every pair
//! `(grid cell, graph node)`; a semi-discrete density is a nonnegative field
//! of unit total mass, optionally carrying a two-sided barrier certificate
//! `lambda * e^{-V} <= f <= Lambda * e^{-V}`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potentials::PotentialPair;

/// Tolerance on the unit-mass normalization of densities.
pub const MASS_TOL: f64 = 1e-10;

/// Largest grid size per axis in one dimension.
pub const MAX_POINTS_1D: usize = 1024;
/// Largest grid size per axis in two dimensions.
pub const MAX_POINTS_2D: usize = 48;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGridDomain {
    dimension: usize,
    half_width: f64,
    n: usize,
}

impl From<GridDomain> for RawGridDomain {
    fn from(d: GridDomain) -> Self {
        RawGridDomain {
            dimension: d.dimension,
            half_width: d.half_width,
            n: d.n,
        }
    }
}

impl TryFrom<RawGridDomain> for GridDomain {
    type Error = Error;

    fn try_from(raw: RawGridDomain) -> Result<Self> {
        GridDomain::new(raw.dimension, raw.half_width, raw.n)
    }
}

/// Uniform vertex-centred grid on the box `[-L, L]^dimension`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGridDomain", into = "RawGridDomain")]
pub struct GridDomain {
    dimension: usize,
    half_width: f64,
    n: usize,
}

impl GridDomain {
    /// Builds a grid with `n >= 3` points per axis on `[-half_width,
    /// half_width]^dimension`, dimension 1 or 2.
    pub fn new(dimension: usize, half_width: f64, n: usize) -> Result<Self> {
        if dimension != 1 && dimension != 2 {
            return Err(Error::InvalidDomain(format!(
                "dimension must be 1 or 2, got {dimension}"
            )));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::InvalidDomain(format!(
                "half width must be positive and finite, got {half_width}"
            )));
        }
        if n < 3 {
            return Err(Error::InvalidDomain(format!(
                "need at least 3 points per axis, got {n}"
            )));
        }
        let cap = if dimension == 1 {
            MAX_POINTS_1D
        } else {
            MAX_POINTS_2D
        };
        if n > cap {
            return Err(Error::InvalidDomain(format!(
                "at most {cap} points per axis in dimension {dimension}, got {n}"
            )));
        }
        Ok(Self {
            dimension,
            half_width,
            n,
        })
    }

    /// Spatial dimension (1 or 2).
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Half-width `L` of the box `[-L, L]^d`.
    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// Points per axis.
    pub fn points_per_axis(&self) -> usize {
        self.n
    }

    /// Grid spacing `2L / (n - 1)`.
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.n - 1) as f64
    }

    /// Total number of grid cells `n^dimension`.
    pub fn num_cells(&self) -> usize {
        self.n.pow(self.dimension as u32)
    }

    /// Coordinate of grid index `i` along one axis.
    pub fn axis_coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.spacing()
    }

    /// Multi-index `[i0, i1]` of a flat cell index (second entry 0 in 1-D).
    pub fn multi_index(&self, cell: usize) -> [usize; 2] {
        match self.dimension {
            1 => [cell, 0],
            _ => [cell / self.n, cell % self.n],
        }
    }

    /// Flat cell index of a multi-index.
    pub fn flat_index(&self, idx: [usize; 2]) -> usize {
        match self.dimension {
            1 => idx[0],
            _ => idx[0] * self.n + idx[1],
        }
    }

    /// Coordinates of a cell (second entry 0 in 1-D).
    pub fn coords(&self, cell: usize) -> [f64; 2] {
        let idx = self.multi_index(cell);
        match self.dimension {
            1 => [self.axis_coord(idx[0]), 0.0],
            _ => [self.axis_coord(idx[0]), self.axis_coord(idx[1])],
        }
    }

    /// Squared Euclidean norm of a cell's coordinate vector.
    pub fn coord_norm_sq(&self, cell: usize) -> f64 {
        let c = self.coords(cell);
        match self.dimension {
            1 => c[0] * c[0],
            _ => c[0] * c[0] + c[1] * c[1],
        }
    }

    /// Trapezoid quadrature weight of a cell: `dx^d`, halved once per axis
    /// on which the cell touches the boundary.
    pub fn quadrature_weight(&self, cell: usize) -> f64 {
        let dx = self.spacing();
        let idx = self.multi_index(cell);
        let mut w = dx.powi(self.dimension as i32);
        for k in 0..self.dimension {
            if idx[k] == 0 || idx[k] == self.n - 1 {
                w *= 0.5;
            }
        }
        w
    }

    /// All quadrature weights as a vector over flat cell indices.
    pub fn cell_weights(&self) -> DVector<f64> {
        DVector::from_fn(self.num_cells(), |c, _| self.quadrature_weight(c))
    }

    /// Neighbouring flat index in direction `+1` along `axis`, if any.
    pub fn neighbor_up(&self, cell: usize, axis: usize) -> Option<usize> {
        let mut idx = self.multi_index(cell);
        if idx[axis] + 1 >= self.n {
            return None;
        }
        idx[axis] += 1;
        Some(self.flat_index(idx))
    }

    /// Neighbouring flat index in direction `-1` along `axis`, if any.
    pub fn neighbor_down(&self, cell: usize, axis: usize) -> Option<usize> {
        let mut idx = self.multi_index(cell);
        if idx[axis] == 0 {
            return None;
        }
        idx[axis] -= 1;
        Some(self.flat_index(idx))
    }
}

/// JSON shape of a field: the domain descriptor, the node count, and the
/// values as one row per cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawField {
    domain: GridDomain,
    graph_nodes: usize,
    values: Vec<Vec<f64>>,
}

impl From<SemiDiscreteField> for RawField {
    fn from(f: SemiDiscreteField) -> Self {
        let nodes = f.num_nodes();
        RawField {
            domain: f.domain,
            graph_nodes: nodes,
            values: (0..f.values.nrows())
                .map(|i| (0..nodes).map(|g| f.values[(i, g)]).collect())
                .collect(),
        }
    }
}

impl TryFrom<RawField> for SemiDiscreteField {
    type Error = Error;

    fn try_from(raw: RawField) -> Result<Self> {
        let cells = raw.domain.num_cells();
        if raw.values.len() != cells {
            return Err(Error::InvalidField(format!(
                "field file has {} value rows but the domain has {cells} cells",
                raw.values.len()
            )));
        }
        if raw.values.iter().any(|row| row.len() != raw.graph_nodes) {
            return Err(Error::InvalidField(format!(
                "every value row must have graph_nodes = {} entries",
                raw.graph_nodes
            )));
        }
        let m = DMatrix::from_fn(cells, raw.graph_nodes, |i, g| raw.values[i][g]);
        SemiDiscreteField::new(raw.domain, m)
    }
}

/// Real-valued function on (grid cell, graph node) pairs.
///
/// Values are stored as a matrix with one row per cell and one column per
/// node. Serializes as `{"domain": {...}, "graph_nodes": m, "values":
/// [[...], ...]}` (row-major over cells) and is re-validated on
/// deserialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawField", into = "RawField")]
pub struct SemiDiscreteField {
    domain: GridDomain,
    values: DMatrix<f64>,
}

impl SemiDiscreteField {
    /// Wraps a value matrix, checking shape and finiteness.
    pub fn new(domain: GridDomain, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != domain.num_cells() {
            return Err(Error::InvalidField(format!(
                "field has {} rows but the domain has {} cells",
                values.nrows(),
                domain.num_cells()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::InvalidField("field needs at least one node".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidField("field entries must be finite".into()));
        }
        Ok(Self { domain, values })
    }

    /// Field built from a function of (coordinates, node index).
    pub fn from_fn(
        domain: GridDomain,
        nodes: usize,
        f: impl Fn([f64; 2], usize) -> f64,
    ) -> Result<Self> {
        let values = DMatrix::from_fn(domain.num_cells(), nodes, |c, g| f(domain.coords(c), g));
        Self::new(domain, values)
    }

    /// Constant field.
    pub fn constant(domain: GridDomain, nodes: usize, value: f64) -> Result<Self> {
        Self::new(domain, DMatrix::from_element(domain.num_cells(), nodes, value))
    }

    /// Zero field.
    pub fn zeros(domain: GridDomain, nodes: usize) -> Self {
        Self {
            domain,
            values: DMatrix::zeros(domain.num_cells(), nodes),
        }
    }

    /// The grid this field lives on.
    pub fn domain(&self) -> GridDomain {
        self.domain
    }

    /// Number of graph nodes (columns).
    pub fn num_nodes(&self) -> usize {
        self.values.ncols()
    }

    /// The value matrix, rows = cells, columns = nodes.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Mutable access to the value matrix (shape is fixed).
    pub fn values_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.values
    }

    /// Quadrature-weighted integral `sum_{cells, nodes} field * weight`.
    pub fn integral(&self) -> f64 {
        let w = self.domain.cell_weights();
        let mut acc = 0.0;
        for g in 0..self.num_nodes() {
            acc += self.values.column(g).dot(&w);
        }
        acc
    }

    /// Maximum absolute value.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, &v| a.max(v.abs()))
    }
}

/// Nonnegative semi-discrete field of unit total mass, with an optional
/// barrier certificate `(lambda, Lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiDiscreteDensity {
    field: SemiDiscreteField,
    barrier: Option<(f64, f64)>,
}

impl SemiDiscreteDensity {
    /// Validates nonnegativity and unit mass (within [`MASS_TOL`]).
    pub fn new(field: SemiDiscreteField) -> Result<Self> {
        if field.values().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidField("density must be nonnegative".into()));
        }
        let mass = field.integral();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidField(format!(
                "density mass must be 1 within {MASS_TOL}, got {mass}"
            )));
        }
        Ok(Self {
            field,
            barrier: None,
        })
    }

    /// Rescales a nonnegative field with positive total mass to unit mass.
    pub fn from_unnormalized(mut field: SemiDiscreteField) -> Result<Self> {
        if field.values().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidField(
                "density must be nonnegative and finite".into(),
            ));
        }
        let mass = field.integral();
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::InvalidField(format!(
                "cannot normalize a field of total mass {mass}"
            )));
        }
        field.values_mut().iter_mut().for_each(|v| *v /= mass);
        Self::new(field)
    }

    /// Attaches a barrier certificate `(lambda, Lambda)`.
    pub fn with_barrier(mut self, lambda: f64, lambda_up: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda_up.is_finite() && 0.0 < lambda && lambda <= lambda_up) {
            return Err(Error::InvalidParameter(format!(
                "barrier constants must satisfy 0 < lambda <= Lambda, got \
                 ({lambda}, {lambda_up})"
            )));
        }
        self.barrier = Some((lambda, lambda_up));
        Ok(self)
    }

    /// The underlying field.
    pub fn field(&self) -> &SemiDiscreteField {
        &self.field
    }

    /// The grid this density lives on.
    pub fn domain(&self) -> GridDomain {
        self.field.domain()
    }

    /// Number of graph nodes.
    pub fn num_nodes(&self) -> usize {
        self.field.num_nodes()
    }

    /// Density values, rows = cells, columns = nodes.
    pub fn values(&self) -> &DMatrix<f64> {
        self.field.values()
    }

    /// Total mass (1 up to [`MASS_TOL`]).
    pub fn mass(&self) -> f64 {
        self.field.integral()
    }

    /// Recorded barrier certificate, if any.
    pub fn barrier(&self) -> Option<(f64, f64)> {
        self.barrier
    }

    /// Mass per graph node, `sum_i f(i, g) * weight(i)`.
    pub fn node_masses(&self) -> DVector<f64> {
        let w = self.domain().cell_weights();
        DVector::from_fn(self.num_nodes(), |g, _| {
            self.values().column(g).dot(&w)
        })
    }
}

/// Relative entropy `sum (f log f + V f) * weight` with `0 log 0 = 0`.
pub fn entropy(f: &SemiDiscreteDensity, pot: &PotentialPair) -> Result<f64> {
    check_pot_shape(f.field(), pot)?;
    let w = f.domain().cell_weights();
    let v = pot.v().values();
    let mut acc = 0.0;
    for g in 0..f.num_nodes() {
        for i in 0..f.domain().num_cells() {
            let r = f.values()[(i, g)];
            let term = if r > 0.0 { r * r.ln() } else { 0.0 };
            acc += (term + v[(i, g)] * r) * w[i];
        }
    }
    if !acc.is_finite() {
        return Err(Error::Numerical("entropy evaluated to a non-finite value".into()));
    }
    Ok(acc)
}

/// Entropy of an arbitrary nonnegative field (not necessarily normalized);
/// used by variational solvers on intermediate iterates.
pub fn entropy_of_field(values: &DMatrix<f64>, pot: &PotentialPair, weights: &DVector<f64>) -> f64 {
    let v = pot.v().values();
    let mut acc = 0.0;
    for g in 0..values.ncols() {
        for i in 0..values.nrows() {
            let r = values[(i, g)];
            let term = if r > 0.0 { r * r.ln() } else { 0.0 };
            acc += (term + v[(i, g)] * r) * weights[i];
        }
    }
    acc
}

/// The normalized equilibrium density `c * e^{-V}`.
pub fn equilibrium_density(pot: &PotentialPair) -> Result<SemiDiscreteDensity> {
    let v = pot.v();
    let field = SemiDiscreteField::new(
        v.domain(),
        v.values().map(|x| (-x).exp()),
    )?;
    SemiDiscreteDensity::from_unnormalized(field)
}

/// Result of a two-sided barrier comparison `lambda e^{-V} <= f <= Lambda e^{-V}`.
#[derive(Debug, Clone, Serialize)]
pub struct BarrierReport {
    /// Whether both bounds hold up to the roundoff grace.
    pub pass: bool,
    /// Smallest observed ratio `f e^{V}` and the cell/node where it occurs.
    pub min_ratio: f64,
    /// Cell and node achieving `min_ratio`.
    pub min_cell: (usize, usize),
    /// Largest observed ratio `f e^{V}` and where it occurs.
    pub max_ratio: f64,
    /// Cell and node achieving `max_ratio`.
    pub max_cell: (usize, usize),
    /// Number of cells outside the graced interval.
    pub violations: usize,
    /// Absolute grace allowed for roundoff (relative to the bound scale).
    pub grace: f64,
}

/// Compares `f e^{V}` against the barrier interval `[lambda, Lambda]`.
///
/// Equality cases (for example `f = f_infinity` with `lambda = Lambda = c`)
/// pass thanks to a small roundoff grace proportional to the bound scale.
pub fn barrier_check(
    f: &SemiDiscreteDensity,
    pot: &PotentialPair,
    lambda: f64,
    lambda_up: f64,
) -> Result<BarrierReport> {
    check_pot_shape(f.field(), pot)?;
    let v = pot.v().values();
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio = f64::NEG_INFINITY;
    let mut min_cell = (0, 0);
    let mut max_cell = (0, 0);
    for g in 0..f.num_nodes() {
        for i in 0..f.domain().num_cells() {
            let ratio = f.values()[(i, g)] * v[(i, g)].exp();
            if ratio < min_ratio {
                min_ratio = ratio;
                min_cell = (i, g);
            }
            if ratio > max_ratio {
                max_ratio = ratio;
                max_cell = (i, g);
            }
        }
    }
    let scale = lambda.abs().max(lambda_up.abs()).max(max_ratio.abs());
    let grace = 1e-9 * scale.max(1e-300);
    let mut violations = 0;
    for g in 0..f.num_nodes() {
        for i in 0..f.domain().num_cells() {
            let ratio = f.values()[(i, g)] * v[(i, g)].exp();
            if ratio < lambda - grace || ratio > lambda_up + grace {
                violations += 1;
            }
        }
    }
    Ok(BarrierReport {
        pass: violations == 0,
        min_ratio,
        min_cell,
        max_ratio,
        max_cell,
        violations,
        grace,
    })
}

/// Second spatial moment `sum |x|^2 f * weight`.
pub fn second_moment(f: &SemiDiscreteDensity) -> f64 {
    let d = f.domain();
    let w = d.cell_weights();
    let mut acc = 0.0;
    for g in 0..f.num_nodes() {
        for i in 0..d.num_cells() {
            acc += d.coord_norm_sq(i) * f.values()[(i, g)] * w[i];
        }
    }
    acc
}

/// Centered-difference gradient of a field along one axis, with
/// second-order one-sided stencils at the boundary.
pub fn spatial_gradient(field: &SemiDiscreteField, axis: usize) -> DMatrix<f64> {
    let domain = field.domain();
    let n = domain.points_per_axis();
    let dx = domain.spacing();
    let vals = field.values();
    let mut out = DMatrix::zeros(vals.nrows(), vals.ncols());
    for g in 0..vals.ncols() {
        for c in 0..vals.nrows() {
            let idx = domain.multi_index(c);
            let i = idx[axis];
            let at = |j: usize| {
                let mut m = idx;
                m[axis] = j;
                vals[(domain.flat_index(m), g)]
            };
            out[(c, g)] = if i == 0 {
                (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * dx)
            } else if i == n - 1 {
                (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * dx)
            } else {
                (at(i + 1) - at(i - 1)) / (2.0 * dx)
            };
        }
    }
    out
}

/// Sum over axes of centered second differences; at boundary points the
/// four-point one-sided stencil is used when the grid allows, the adjacent
/// interior stencil otherwise.
pub fn spatial_laplacian(field: &SemiDiscreteField) -> DMatrix<f64> {
    let domain = field.domain();
    let n = domain.points_per_axis();
    let dx2 = domain.spacing() * domain.spacing();
    let vals = field.values();
    let mut out = DMatrix::zeros(vals.nrows(), vals.ncols());
    for g in 0..vals.ncols() {
        for c in 0..vals.nrows() {
            let idx = domain.multi_index(c);
            let mut acc = 0.0;
            for axis in 0..domain.dimension() {
                let i = idx[axis];
                let at = |j: usize| {
                    let mut m = idx;
                    m[axis] = j;
                    vals[(domain.flat_index(m), g)]
                };
                acc += if i == 0 {
                    if n >= 4 {
                        (2.0 * at(0) - 5.0 * at(1) + 4.0 * at(2) - at(3)) / dx2
                    } else {
                        (at(0) - 2.0 * at(1) + at(2)) / dx2
                    }
                } else if i == n - 1 {
                    if n >= 4 {
                        (2.0 * at(n - 1) - 5.0 * at(n - 2) + 4.0 * at(n - 3) - at(n - 4)) / dx2
                    } else {
                        (at(n - 1) - 2.0 * at(n - 2) + at(n - 3)) / dx2
                    }
                } else {
                    (at(i + 1) - 2.0 * at(i) + at(i - 1)) / dx2
                };
            }
            out[(c, g)] = acc;
        }
    }
    out
}

fn check_pot_shape(field: &SemiDiscreteField, pot: &PotentialPair) -> Result<()> {
    if pot.v().domain() != field.domain() || pot.v().num_nodes() != field.num_nodes() {
        return Err(Error::InvalidField(
            "potential and field shapes do not match".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dimension_and_size() {
        assert!(GridDomain::new(3, 1.0, 8).is_err());
        assert!(GridDomain::new(1, 1.0, 2).is_err());
        assert!(GridDomain::new(1, -1.0, 8).is_err());
        assert!(GridDomain::new(2, 1.0, 64).is_err());
    }

    #[test]
    fn trapezoid_weights_sum_to_volume_1d() {
        let d = GridDomain::new(1, 3.0, 17).unwrap();
        let total: f64 = d.cell_weights().iter().sum();
        assert!((total - 6.0).abs() < 1e-12);
    }

    #[test]
    fn trapezoid_weights_sum_to_volume_2d() {
        let d = GridDomain::new(2, 1.5, 9).unwrap();
        let total: f64 = d.cell_weights().iter().sum();
        assert!((total - 9.0).abs() < 1e-12);
    }

    #[test]
    fn neighbors_respect_boundaries() {
        let d = GridDomain::new(1, 1.0, 5).unwrap();
        assert_eq!(d.neighbor_down(0, 0), None);
        assert_eq!(d.neighbor_up(4, 0), None);
        assert_eq!(d.neighbor_up(1, 0), Some(2));
        let d2 = GridDomain::new(2, 1.0, 4).unwrap();
        let c = d2.flat_index([2, 3]);
        assert_eq!(d2.neighbor_up(c, 1), None);
        assert_eq!(d2.neighbor_up(c, 0), Some(d2.flat_index([3, 3])));
    }

    #[test]
    fn density_normalization_enforced() {
        let d = GridDomain::new(1, 0.5, 11).unwrap();
        let f = SemiDiscreteField::constant(d, 2, 0.7).unwrap();
        assert!(SemiDiscreteDensity::new(f.clone()).is_err());
        let n = SemiDiscreteDensity::from_unnormalized(f).unwrap();
        assert!((n.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negative_density_rejected() {
        let d = GridDomain::new(1, 0.5, 11).unwrap();
        let mut f = SemiDiscreteField::constant(d, 1, 1.0).unwrap();
        f.values_mut()[(3, 0)] = -0.1;
        assert!(SemiDiscreteDensity::from_unnormalized(f).is_err());
    }

    #[test]
    fn domain_round_trips_through_json() {
        let d = GridDomain::new(2, 2.0, 8).unwrap();
        let text = serde_json::to_string(&d).unwrap();
        let back: GridDomain = serde_json::from_str(&text).unwrap();
        assert_eq!(back, d);
        let bad = r#"{"dimension": 5, "half_width": 1.0, "n": 8}"#;
        assert!(serde_json::from_str::<GridDomain>(bad).is_err());
    }
}
