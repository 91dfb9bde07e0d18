//! Diffusion models, tensor grids, node fields and discrete measures.
//!
//! Nodes are ordered row-major with `x1` varying fastest: the node with
//! axis indices `(i, j)` has linear index `i + j * n1` where `n1 = cells[0] + 1`.
//! Every node owns the trapezoidal dual cell `[x - h/2, x + h/2]` clipped to
//! the box, so boundary nodes carry half (corners a quarter) of an interior
//! volume. Quadrature and the finite-volume solver share these volumes.

use serde::Serialize;
use thiserror::Error;

use crate::expr::{EvalFault, Expression, MAX_DIM};
use crate::numeric::neumaier_sum;

/// Minimum number of cells per axis.
pub const MIN_CELLS: usize = 8;

/// Node-to-node tolerance under which the diffusion matrix counts as constant.
pub const CONSTANT_D_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("unsupported dimension {0}; expected 1 or 2")]
    Dimension(usize),
    #[error("axis {axis}: degenerate box [{lower}, {upper}]")]
    DegenerateBox { axis: usize, lower: f64, upper: f64 },
    #[error("axis {axis}: {cells} cells, at least {MIN_CELLS} required")]
    TooFewCells { axis: usize, cells: usize },
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("non-finite value at node {index}")]
    NonFinite { index: usize },
    #[error("fields or measures live on different grids")]
    GridMismatch,
    #[error(transparent)]
    Eval(#[from] EvalFault),
    #[error("diffusion matrix is not positive definite at {point:?} (smallest eigenvalue {min_eigenvalue})")]
    NotPositiveDefinite { point: Vec<f64>, min_eigenvalue: f64 },
    #[error("expression dimension {got} does not match model dimension {expected}")]
    ExpressionDimension { expected: usize, got: usize },
    #[error("model has no divergence-free perturbation F")]
    MissingPerturbation,
    #[error("model has no potential V")]
    MissingPotential,
    #[error("measure has no mass")]
    ZeroMass,
    #[error("negative density {value} at node {index}")]
    NegativeDensity { index: usize, value: f64 },
}

/// Uniform tensor grid on a box in one or two dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Grid {
    pub dim: usize,
    pub lower: [f64; MAX_DIM],
    pub upper: [f64; MAX_DIM],
    pub cells: [usize; MAX_DIM],
    pub spacing: [f64; MAX_DIM],
}

impl Grid {
    pub fn new(lower: &[f64], upper: &[f64], cells: &[usize]) -> Result<Grid, ModelError> {
        let dim = lower.len();
        if dim == 0 || dim > MAX_DIM {
            return Err(ModelError::Dimension(dim));
        }
        if upper.len() != dim || cells.len() != dim {
            return Err(ModelError::Length {
                expected: dim,
                got: upper.len().min(cells.len()),
            });
        }
        let mut g = Grid {
            dim,
            lower: [0.0; MAX_DIM],
            upper: [0.0; MAX_DIM],
            cells: [0; MAX_DIM],
            spacing: [0.0; MAX_DIM],
        };
        for k in 0..dim {
            let (lo, hi) = (lower[k], upper[k]);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(ModelError::DegenerateBox {
                    axis: k,
                    lower: lo,
                    upper: hi,
                });
            }
            if cells[k] < MIN_CELLS {
                return Err(ModelError::TooFewCells {
                    axis: k,
                    cells: cells[k],
                });
            }
            g.lower[k] = lo;
            g.upper[k] = hi;
            g.cells[k] = cells[k];
            g.spacing[k] = (hi - lo) / cells[k] as f64;
        }
        Ok(g)
    }

    /// Number of nodes along `axis` (1 for axes beyond `dim`).
    pub fn nodes_along(&self, axis: usize) -> usize {
        if axis < self.dim {
            self.cells[axis] + 1
        } else {
            1
        }
    }

    pub fn node_count(&self) -> usize {
        (0..self.dim).map(|k| self.nodes_along(k)).product()
    }

    pub fn index(&self, ij: [usize; MAX_DIM]) -> usize {
        ij[0] + ij[1] * self.nodes_along(0)
    }

    pub fn axis_indices(&self, index: usize) -> [usize; MAX_DIM] {
        let n0 = self.nodes_along(0);
        [index % n0, index / n0]
    }

    /// Linear-index offset between neighbours along `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        if axis == 0 {
            1
        } else {
            self.nodes_along(0)
        }
    }

    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        if i == self.cells[axis] {
            self.upper[axis]
        } else {
            self.lower[axis] + i as f64 * self.spacing[axis]
        }
    }

    /// Coordinates of a node (only the first `dim` entries are meaningful).
    pub fn node(&self, index: usize) -> [f64; MAX_DIM] {
        let ij = self.axis_indices(index);
        let mut x = [0.0; MAX_DIM];
        for (k, xk) in x.iter_mut().enumerate().take(self.dim) {
            *xk = self.coordinate(k, ij[k]);
        }
        x
    }

    pub fn node_point(&self, index: usize) -> Vec<f64> {
        self.node(index)[..self.dim].to_vec()
    }

    /// Width of the dual cell of node `i` along `axis`.
    pub fn dual_width(&self, axis: usize, i: usize) -> f64 {
        let h = self.spacing[axis];
        if i == 0 || i == self.cells[axis] {
            0.5 * h
        } else {
            h
        }
    }

    pub fn cell_volume(&self, index: usize) -> f64 {
        let ij = self.axis_indices(index);
        (0..self.dim).map(|k| self.dual_width(k, ij[k])).product()
    }

    pub fn volumes(&self) -> Vec<f64> {
        (0..self.node_count()).map(|i| self.cell_volume(i)).collect()
    }

    /// Smallest number of grid steps from the node to the box boundary.
    pub fn boundary_distance(&self, index: usize) -> usize {
        let ij = self.axis_indices(index);
        (0..self.dim)
            .map(|k| ij[k].min(self.cells[k] - ij[k]))
            .min()
            .unwrap_or(0)
    }

    /// Whether the node lies in the central half of the box on every axis.
    pub fn in_core(&self, index: usize) -> bool {
        let x = self.node(index);
        (0..self.dim).all(|k| {
            let c = 0.5 * (self.lower[k] + self.upper[k]);
            let half = 0.25 * (self.upper[k] - self.lower[k]);
            (x[k] - c).abs() <= half * (1.0 + 1e-12)
        })
    }

    pub fn core_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&i| self.in_core(i)).collect()
    }
}

/// One real value per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Field, ModelError> {
        if values.len() != grid.node_count() {
            return Err(ModelError::Length {
                expected: grid.node_count(),
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { index });
        }
        Ok(Field { grid, values })
    }

    /// Internal constructor for values already known to be well formed.
    pub(crate) fn from_vec(grid: Grid, values: Vec<f64>) -> Field {
        debug_assert_eq!(values.len(), grid.node_count());
        Field { grid, values }
    }

    pub fn constant(grid: Grid, c: f64) -> Field {
        Field::from_vec(grid, vec![c; grid.node_count()])
    }

    /// Samples `f` at every node; `f` receives the node coordinates.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Result<Field, ModelError> {
        let values = (0..grid.node_count())
            .map(|i| f(&grid.node(i)[..grid.dim]))
            .collect();
        Field::new(grid, values)
    }

    pub fn from_expression(grid: Grid, e: &Expression) -> Result<Field, ModelError> {
        if e.dim() != grid.dim {
            return Err(ModelError::ExpressionDimension {
                expected: grid.dim,
                got: e.dim(),
            });
        }
        let values = (0..grid.node_count())
            .map(|i| e.eval(&grid.node(i)[..grid.dim]))
            .collect::<Result<Vec<_>, _>>()?;
        Field::new(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field::from_vec(self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field, ModelError> {
        self.same_grid(other)?;
        Ok(Field::from_vec(
            self.grid,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn same_grid(&self, other: &Field) -> Result<(), ModelError> {
        if self.grid == other.grid {
            Ok(())
        } else {
            Err(ModelError::GridMismatch)
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Σ volume_i · value_i.
    pub fn mass(&self) -> f64 {
        neumaier_sum(
            self.values
                .iter()
                .enumerate()
                .map(|(i, v)| v * self.grid.cell_volume(i)),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for Field {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

/// How the drift `a` in the flux `D(∇u + u a)` is specified.
#[derive(Debug, Clone, PartialEq)]
pub enum Drift {
    /// Components `a_1..a_n` given directly.
    Explicit(Vec<Expression>),
    /// `a = ∇V − F` with an optional perturbation `F`.
    Gradient {
        potential: Expression,
        perturbation: Option<Vec<Expression>>,
    },
}

/// Diffusion model: symmetric matrix `D(x)` and drift `a(x)`.
///
/// The associated Fokker-Planck equation is `∂u/∂t = div[D(∇u + u a)]`,
/// whose Lebesgue dual is the generator `L f = div(D∇f) − ⟨D a, ∇f⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    dim: usize,
    /// Upper triangle, row-major: `[D11]` or `[D11, D12, D22]`.
    diffusion: Vec<Expression>,
    drift: Drift,
}

impl Model {
    pub fn new(dim: usize, diffusion: Vec<Expression>, drift: Drift) -> Result<Model, ModelError> {
        if dim == 0 || dim > MAX_DIM {
            return Err(ModelError::Dimension(dim));
        }
        let expected = dim * (dim + 1) / 2;
        if diffusion.len() != expected {
            return Err(ModelError::Length {
                expected,
                got: diffusion.len(),
            });
        }
        let mut exprs: Vec<&Expression> = diffusion.iter().collect();
        match &drift {
            Drift::Explicit(a) => {
                if a.len() != dim {
                    return Err(ModelError::Length {
                        expected: dim,
                        got: a.len(),
                    });
                }
                exprs.extend(a);
            }
            Drift::Gradient {
                potential,
                perturbation,
            } => {
                exprs.push(potential);
                if let Some(f) = perturbation {
                    if f.len() != dim {
                        return Err(ModelError::Length {
                            expected: dim,
                            got: f.len(),
                        });
                    }
                    exprs.extend(f);
                }
            }
        }
        if let Some(e) = exprs.iter().find(|e| e.dim() != dim) {
            return Err(ModelError::ExpressionDimension {
                expected: dim,
                got: e.dim(),
            });
        }
        Ok(Model {
            dim,
            diffusion,
            drift,
        })
    }

    /// Convenience constructor from expression strings.
    pub fn explicit(dim: usize, diffusion: &[&str], drift: &[&str]) -> Result<Model, crate::Error> {
        let d = parse_all(diffusion, dim)?;
        let a = parse_all(drift, dim)?;
        Ok(Model::new(dim, d, Drift::Explicit(a))?)
    }

    /// Convenience constructor for `a = ∇V − F`.
    pub fn gradient(
        dim: usize,
        diffusion: &[&str],
        potential: &str,
        perturbation: Option<&[&str]>,
    ) -> Result<Model, crate::Error> {
        let d = parse_all(diffusion, dim)?;
        let v = Expression::parse(potential, dim)?;
        let f = perturbation.map(|f| parse_all(f, dim)).transpose()?;
        Ok(Model::new(
            dim,
            d,
            Drift::Gradient {
                potential: v,
                perturbation: f,
            },
        )?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn drift(&self) -> &Drift {
        &self.drift
    }

    pub fn potential(&self) -> Option<&Expression> {
        match &self.drift {
            Drift::Gradient { potential, .. } => Some(potential),
            Drift::Explicit(_) => None,
        }
    }

    pub fn perturbation(&self) -> Option<&[Expression]> {
        match &self.drift {
            Drift::Gradient {
                perturbation: Some(f),
                ..
            } => Some(f),
            _ => None,
        }
    }

    pub fn diffusion_entry(&self, i: usize, j: usize) -> &Expression {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        let idx = match (self.dim, r, c) {
            (1, 0, 0) => 0,
            (2, 0, 0) => 0,
            (2, 0, 1) => 1,
            (2, 1, 1) => 2,
            _ => panic!("diffusion index ({i}, {j}) out of range"),
        };
        &self.diffusion[idx]
    }

    /// `D(x)` padded to 2×2 (zeros beyond `dim`).
    pub fn diffusion_at(&self, x: &[f64]) -> Result<[[f64; MAX_DIM]; MAX_DIM], EvalFault> {
        let mut d = [[0.0; MAX_DIM]; MAX_DIM];
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = self.diffusion_entry(i, j).eval(x)?;
                d[i][j] = v;
                d[j][i] = v;
            }
        }
        Ok(d)
    }

    /// `∂_k D_ij(x)`, indexed `[i][j][k]`.
    fn diffusion_gradient_at(
        &self,
        x: &[f64],
    ) -> Result<[[[f64; MAX_DIM]; MAX_DIM]; MAX_DIM], EvalFault> {
        let mut g = [[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM];
        for i in 0..self.dim {
            for j in i..self.dim {
                let jet = self.diffusion_entry(i, j).eval_jet(x)?;
                g[i][j] = jet.gradient;
                g[j][i] = jet.gradient;
            }
        }
        Ok(g)
    }

    /// Drift `a(x)` and its Jacobian `Ja[i][k] = ∂_k a_i`.
    pub fn drift_jet(
        &self,
        x: &[f64],
    ) -> Result<([f64; MAX_DIM], [[f64; MAX_DIM]; MAX_DIM]), EvalFault> {
        let mut a = [0.0; MAX_DIM];
        let mut ja = [[0.0; MAX_DIM]; MAX_DIM];
        match &self.drift {
            Drift::Explicit(comps) => {
                for (i, c) in comps.iter().enumerate() {
                    let j = c.eval_jet(x)?;
                    a[i] = j.value;
                    ja[i] = j.gradient;
                }
            }
            Drift::Gradient {
                potential,
                perturbation,
            } => {
                let v = potential.eval_jet(x)?;
                a = v.gradient;
                ja = v.hessian;
                if let Some(f) = perturbation {
                    for (i, c) in f.iter().enumerate() {
                        let j = c.eval_jet(x)?;
                        a[i] -= j.value;
                        for k in 0..MAX_DIM {
                            ja[i][k] -= j.gradient[k];
                        }
                    }
                }
            }
        }
        Ok((a, ja))
    }

    /// Drift `a(x)` without derivatives.
    pub fn drift_at(&self, x: &[f64]) -> Result<[f64; MAX_DIM], EvalFault> {
        Ok(self.drift_jet(x)?.0)
    }

    /// `div(e^{−V} D F)(x)` expanded as `e^{−V}(div(DF) − ⟨DF, ∇V⟩)`, with
    /// `V` shifted by `shift` inside the exponential.
    fn divergence_residual_at(&self, x: &[f64], shift: f64) -> Result<f64, ModelError> {
        let v_expr = self.potential().ok_or(ModelError::MissingPotential)?;
        let f_expr = self.perturbation().ok_or(ModelError::MissingPerturbation)?;
        let v = v_expr.eval_jet(x)?;
        let d = self.diffusion_at(x)?;
        let dd = self.diffusion_gradient_at(x)?;
        let mut f = [0.0; MAX_DIM];
        let mut jf = [[0.0; MAX_DIM]; MAX_DIM];
        for (i, c) in f_expr.iter().enumerate() {
            let j = c.eval_jet(x)?;
            f[i] = j.value;
            jf[i] = j.gradient;
        }
        let n = self.dim;
        let mut div = 0.0;
        let mut dot = 0.0;
        for i in 0..n {
            let mut df_i = 0.0;
            for j in 0..n {
                div += dd[i][j][i] * f[j] + d[i][j] * jf[j][i];
                df_i += d[i][j] * f[j];
            }
            dot += df_i * v.gradient[i];
        }
        Ok((-(v.value - shift)).exp() * (div - dot))
    }
}

fn parse_all(src: &[&str], dim: usize) -> Result<Vec<Expression>, crate::expr::ExprError> {
    src.iter().map(|s| Expression::parse(s, dim)).collect()
}

/// Model coefficients sampled at the grid nodes.
#[derive(Debug, Clone)]
pub struct DiscreteModel {
    pub model: Model,
    pub grid: Grid,
    /// `D` at each node (2×2, zero-padded).
    pub diffusion: Vec<[[f64; MAX_DIM]; MAX_DIM]>,
    /// Drift `a` of the flux `D(∇u + u a)`.
    pub drift: Vec<[f64; MAX_DIM]>,
    /// First-order coefficient `b` of the generator in non-divergence form,
    /// `L f = D : ∇²f − b · ∇f`, i.e. `b = D a − div D`.
    pub generator_drift: Vec<[f64; MAX_DIM]>,
    pub potential: Option<Vec<f64>>,
    pub perturbation: Option<Vec<[f64; MAX_DIM]>>,
    pub constant_diffusion: bool,
}

impl DiscreteModel {
    pub fn dim(&self) -> usize {
        self.grid.dim
    }

    pub fn potential_field(&self) -> Option<Field> {
        self.potential
            .as_ref()
            .map(|v| Field::from_vec(self.grid, v.clone()))
    }
}

/// Smallest eigenvalue of a symmetric matrix of size `dim ≤ 2`.
pub(crate) fn min_eigenvalue_sym(m: &[[f64; MAX_DIM]; MAX_DIM], dim: usize) -> f64 {
    if dim == 1 {
        return m[0][0];
    }
    let (a, b, c) = (m[0][0], m[0][1], m[1][1]);
    let mean = 0.5 * (a + c);
    let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    mean - r
}

/// Samples `D`, `a`, `V`, `F` at the nodes and checks positive definiteness.
pub fn discretize_model(model: &Model, grid: &Grid) -> Result<DiscreteModel, ModelError> {
    if model.dim() != grid.dim {
        return Err(ModelError::ExpressionDimension {
            expected: grid.dim,
            got: model.dim(),
        });
    }
    let n = grid.node_count();
    let dim = grid.dim;
    let mut diffusion = Vec::with_capacity(n);
    let mut drift = Vec::with_capacity(n);
    let mut generator_drift = Vec::with_capacity(n);
    let mut potential = model.potential().map(|_| Vec::with_capacity(n));
    let mut perturbation = model.perturbation().map(|_| Vec::with_capacity(n));
    for idx in 0..n {
        let x = &grid.node(idx)[..dim];
        let d = model.diffusion_at(x)?;
        let lam = min_eigenvalue_sym(&d, dim);
        if !(lam > 0.0) {
            return Err(ModelError::NotPositiveDefinite {
                point: x.to_vec(),
                min_eigenvalue: lam,
            });
        }
        let dd = model.diffusion_gradient_at(x)?;
        let (a, _) = model.drift_jet(x)?;
        let mut b = [0.0; MAX_DIM];
        for i in 0..dim {
            for j in 0..dim {
                b[i] += d[i][j] * a[j] - dd[i][j][j];
            }
        }
        if let (Some(pv), Some(v)) = (potential.as_mut(), model.potential()) {
            pv.push(v.eval(x)?);
        }
        if let (Some(pf), Some(f)) = (perturbation.as_mut(), model.perturbation()) {
            let mut fv = [0.0; MAX_DIM];
            for (i, c) in f.iter().enumerate() {
                fv[i] = c.eval(x)?;
            }
            pf.push(fv);
        }
        diffusion.push(d);
        drift.push(a);
        generator_drift.push(b);
    }
    let d0 = diffusion[0];
    let constant_diffusion = diffusion.iter().all(|d| {
        (0..dim).all(|i| (0..dim).all(|j| (d[i][j] - d0[i][j]).abs() <= CONSTANT_D_TOL * (1.0 + d0[i][j].abs())))
    });
    Ok(DiscreteModel {
        model: model.clone(),
        grid: *grid,
        diffusion,
        drift,
        generator_drift,
        potential,
        perturbation,
        constant_diffusion,
    })
}

/// Node-wise residual of `div(e^{−V} D F) = 0`.
pub fn check_divergence_free(model: &Model, grid: &Grid) -> Result<Field, ModelError> {
    divergence_residual(model, grid, 0.0)
}

/// Same residual with `V` shifted by its minimum over the grid, so the
/// magnitude is independent of additive constants in `V`.
pub(crate) fn divergence_residual_normalized(model: &Model, grid: &Grid) -> Result<Field, ModelError> {
    let v = model.potential().ok_or(ModelError::MissingPotential)?;
    let vf = Field::from_expression(*grid, v)?;
    divergence_residual(model, grid, vf.min())
}

fn divergence_residual(model: &Model, grid: &Grid, shift: f64) -> Result<Field, ModelError> {
    if model.perturbation().is_none() {
        return Err(ModelError::MissingPerturbation);
    }
    let values = (0..grid.node_count())
        .map(|i| model.divergence_residual_at(&grid.node(i)[..grid.dim], shift))
        .collect::<Result<Vec<_>, _>>()?;
    Field::new(*grid, values)
}

/// Discrete probability measure on the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Measure {
    grid: Grid,
    weights: Vec<f64>,
    log_z: f64,
}

impl Measure {
    /// Normalizes `volume_i · density_i`; `density` must be nonnegative.
    pub fn from_density(density: &Field) -> Result<Measure, ModelError> {
        let grid = *density.grid();
        if let Some(index) = density.values().iter().position(|&v| !(v >= 0.0)) {
            return Err(ModelError::NegativeDensity {
                index,
                value: density[index],
            });
        }
        let raw: Vec<f64> = density
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v * grid.cell_volume(i))
            .collect();
        let z = neumaier_sum(raw.iter().copied());
        if !(z > 0.0) {
            return Err(ModelError::ZeroMass);
        }
        Ok(Measure {
            grid,
            weights: raw.iter().map(|w| w / z).collect(),
            log_z: z.ln(),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Normalization constant `Z` (may under- or overflow; see [`Measure::log_z`]).
    pub fn z(&self) -> f64 {
        self.log_z.exp()
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    /// Node density `w_i / volume_i`.
    pub fn density(&self) -> Field {
        Field::from_vec(
            self.grid,
            self.weights
                .iter()
                .enumerate()
                .map(|(i, w)| w / self.grid.cell_volume(i))
                .collect(),
        )
    }

    /// `μ(f) = Σ w_i f_i`.
    pub fn integrate(&self, f: &Field) -> Result<f64, ModelError> {
        if *f.grid() != self.grid {
            return Err(ModelError::GridMismatch);
        }
        Ok(self.integrate_values(f.values()))
    }

    pub(crate) fn integrate_values(&self, f: &[f64]) -> f64 {
        neumaier_sum(self.weights.iter().zip(f).map(|(w, v)| w * v))
    }

    /// `μ(f)` restricted to the nodes where `keep` holds, renormalized.
    pub(crate) fn integrate_where(&self, f: &[f64], keep: impl Fn(usize) -> bool) -> f64 {
        let num = neumaier_sum((0..f.len()).filter(|&i| keep(i)).map(|i| self.weights[i] * f[i]));
        let den = neumaier_sum((0..f.len()).filter(|&i| keep(i)).map(|i| self.weights[i]));
        num / den
    }
}

/// `w_i ∝ e^{−V(x_i)} · volume_i`, computed after subtracting `min V`.
pub fn gibbs_measure(potential: &Field) -> Result<Measure, ModelError> {
    let grid = *potential.grid();
    if let Some(index) = potential.values().iter().position(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite { index });
    }
    let vmin = potential.min();
    let raw: Vec<f64> = potential
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| (-(v - vmin)).exp() * grid.cell_volume(i))
        .collect();
    let z_shifted = neumaier_sum(raw.iter().copied());
    Ok(Measure {
        grid,
        weights: raw.iter().map(|w| w / z_shifted).collect(),
        log_z: z_shifted.ln() - vmin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1(lo: f64, hi: f64, cells: usize) -> Grid {
        Grid::new(&[lo], &[hi], &[cells]).unwrap()
    }

    #[test]
    fn grid_examples() {
        let g = grid1(-6.0, 6.0, 256);
        assert_eq!(g.node_count(), 257);
        assert_eq!(g.spacing[0], 12.0 / 256.0);
        assert_eq!(g.coordinate(0, 256), 6.0);
        let g2 = Grid::new(&[-5.0, -5.0], &[5.0, 5.0], &[64, 64]).unwrap();
        assert_eq!(g2.node_count(), 65 * 65);
        assert!(matches!(
            Grid::new(&[1.0], &[1.0], &[16]),
            Err(ModelError::DegenerateBox { .. })
        ));
        assert!(matches!(
            Grid::new(&[0.0], &[1.0], &[4]),
            Err(ModelError::TooFewCells { .. })
        ));
    }

    #[test]
    fn node_ordering_is_row_major() {
        let g = Grid::new(&[0.0, 10.0], &[8.0, 18.0], &[8, 8]).unwrap();
        let idx = g.index([3, 2]);
        assert_eq!(idx, 3 + 2 * 9);
        assert_eq!(g.axis_indices(idx), [3, 2]);
        assert_eq!(g.node(idx), [3.0, 12.0]);
        assert_eq!(g.cell_volume(g.index([0, 0])), 0.25);
        assert_eq!(g.cell_volume(g.index([0, 4])), 0.5);
        assert_eq!(g.cell_volume(g.index([4, 4])), 1.0);
        let total: f64 = g.volumes().iter().sum();
        assert!((total - 64.0).abs() < 1e-12);
    }

    #[test]
    fn discretize_samples_drift_and_rejects_non_pd() {
        let g = grid1(-6.0, 6.0, 64);
        let m = Model::explicit(1, &["1"], &["x1"]).unwrap();
        let dm = discretize_model(&m, &g).unwrap();
        for i in 0..g.node_count() {
            assert_eq!(dm.drift[i][0], g.node(i)[0]);
        }
        assert!(dm.constant_diffusion);

        let bad = Model::explicit(1, &["-1"], &["x1"]).unwrap();
        assert!(matches!(
            discretize_model(&bad, &g),
            Err(ModelError::NotPositiveDefinite { .. })
        ));

        let gm = Model::gradient(1, &["1"], "x1^2/2", None).unwrap();
        let dm = discretize_model(&gm, &g).unwrap();
        for i in 0..g.node_count() {
            assert!((dm.drift[i][0] - g.node(i)[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn generator_drift_includes_divergence_of_d() {
        let g = grid1(1.0, 2.0, 16);
        let m = Model::explicit(1, &["x1^2"], &["0"]).unwrap();
        let dm = discretize_model(&m, &g).unwrap();
        assert!(!dm.constant_diffusion);
        // L f = (x^2 f')' = x^2 f'' + 2x f', so b = -2x.
        for i in 0..g.node_count() {
            assert!((dm.generator_drift[i][0] + 2.0 * g.node(i)[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn gibbs_measure_properties() {
        let g = grid1(-8.0, 8.0, 512);
        let v = Field::from_fn(g, |x| 0.5 * x[0] * x[0]).unwrap();
        let mu = gibbs_measure(&v).unwrap();
        let total: f64 = neumaier_sum(mu.weights().iter().copied());
        assert!((total - 1.0).abs() < 1e-14);
        let x = Field::from_fn(g, |x| x[0]).unwrap();
        let x2 = Field::from_fn(g, |x| x[0] * x[0]).unwrap();
        assert!(mu.integrate(&x).unwrap().abs() < 1e-12);
        assert!((mu.integrate(&x2).unwrap() - 1.0).abs() < 1e-6);
        assert!((mu.z() - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-9);

        let shifted = v.map(|x| x + 123.0);
        let mu2 = gibbs_measure(&shifted).unwrap();
        for (a, b) in mu.weights().iter().zip(mu2.weights()) {
            assert!((a - b).abs() <= 1e-14);
        }

        let flat = gibbs_measure(&Field::constant(g, 3.0)).unwrap();
        let w = flat.weights();
        assert_eq!(w[0], w[512]);
        assert!((w[1] - 2.0 * w[0]).abs() < 1e-18);
    }

    #[test]
    fn integrate_examples() {
        let g = grid1(-6.0, 6.0, 256);
        let v = Field::from_fn(g, |x| 0.5 * x[0] * x[0]).unwrap();
        let mu = gibbs_measure(&v).unwrap();
        assert!((mu.integrate(&Field::constant(g, 1.0)).unwrap() - 1.0).abs() < 1e-14);
        let left = Field::from_fn(g, |x| if x[0] < 0.0 { 1.0 } else { 0.0 }).unwrap();
        assert!((mu.integrate(&left).unwrap() - 0.5).abs() <= g.spacing[0]);
        let other = Field::constant(grid1(-6.0, 6.0, 128), 1.0);
        assert_eq!(mu.integrate(&other), Err(ModelError::GridMismatch));
    }

    #[test]
    fn trapezoid_is_exact_for_affine_and_second_order_for_quadratic() {
        let flat = |cells| gibbs_measure(&Field::constant(grid1(0.0, 3.0, cells), 0.0)).unwrap();
        let mu = flat(16);
        let affine = Field::from_fn(*mu.grid(), |x| 2.0 * x[0] - 1.0).unwrap();
        assert!((mu.integrate(&affine).unwrap() - 2.0).abs() < 1e-14);

        let err = |cells| {
            let mu = flat(cells);
            let f = Field::from_fn(*mu.grid(), |x| x[0] * x[0]).unwrap();
            (mu.integrate(&f).unwrap() - 3.0).abs()
        };
        let order = (err(32) / err(64)).log2();
        assert!(order >= 1.9, "observed order {order}");
    }

    #[test]
    fn divergence_free_residuals() {
        let g = Grid::new(&[-3.0, -3.0], &[3.0, 3.0], &[12, 12]).unwrap();
        let rot = Model::gradient(2, &["1", "0", "1"], "(x1^2 + x2^2)/2", Some(&["-x2", "x1"])).unwrap();
        let r = check_divergence_free(&rot, &g).unwrap();
        assert!(r.values().iter().all(|v| v.abs() < 1e-14));

        let zero = Model::gradient(2, &["1", "0", "1"], "(x1^2 + x2^2)/2", Some(&["0", "0"])).unwrap();
        assert!(check_divergence_free(&zero, &g).unwrap().values().iter().all(|&v| v == 0.0));

        let bad = Model::gradient(2, &["1", "0", "1"], "(x1^2 + x2^2)/2", Some(&["x1", "0"])).unwrap();
        let r = check_divergence_free(&bad, &g).unwrap();
        for i in 0..g.node_count() {
            let x = g.node(i);
            let expect = (-(x[0] * x[0] + x[1] * x[1]) / 2.0).exp() * (1.0 - x[0] * x[0]);
            assert!((r[i] - expect).abs() < 1e-14);
        }

        let none = Model::gradient(2, &["1", "0", "1"], "x1", None).unwrap();
        assert_eq!(
            check_divergence_free(&none, &g).unwrap_err(),
            ModelError::MissingPerturbation
        );
    }

    #[test]
    fn core_is_central_half() {
        let g = grid1(-6.0, 6.0, 24);
        let core = g.core_nodes();
        assert_eq!(g.node(core[0])[0], -3.0);
        assert_eq!(g.node(*core.last().unwrap())[0], 3.0);
        assert_eq!(core.len(), 13);
    }
}
