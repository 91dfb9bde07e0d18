//! Generator `L`, carré du champ `Γ`, `Γ₂` and curvature estimates on grid fields.
//!
//! Derivatives use second-order central differences at interior nodes and
//! second-order one-sided stencils on the boundary. `Γ₂` is obtained by
//! composing the discrete `L` and `Γ`, so only nodes at least two steps away
//! from the boundary carry meaningful `Γ₂` values.

use serde::Serialize;
use thiserror::Error;

use crate::expr::{EvalFault, MAX_DIM};
use crate::model::{discretize_model, DiscreteModel, Field, Grid, Measure, Model, ModelError};

/// Threshold on `Γ(f)` below which a node is skipped in ratio tests.
pub const GAMMA_EPS: f64 = 1e-10;

/// Nodes closer than this to the boundary are excluded from `Γ₂` evaluations.
pub const GAMMA2_MARGIN: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OperatorError {
    #[error("field lives on a different grid than the model")]
    GridMismatch,
    #[error("diffusion matrix varies over the grid; use the sampled estimator")]
    NonConstantDiffusion,
    #[error("no interior node has Γ(f) above {GAMMA_EPS:e}; estimate inconclusive")]
    Inconclusive,
    #[error("function must be positive; found {value} at node {index}")]
    NonPositive { index: usize, value: f64 },
    #[error("exponent p = {0} outside ]1, 2[")]
    InvalidExponent(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalFault),
}

/// First derivative along `axis` at every node.
pub fn partial(f: &Field, axis: usize) -> Vec<f64> {
    let grid = f.grid();
    let v = f.values();
    let s = grid.stride(axis);
    let n = grid.cells[axis];
    let h = grid.spacing[axis];
    (0..v.len())
        .map(|idx| {
            let i = grid.axis_indices(idx)[axis];
            if i == 0 {
                (-3.0 * v[idx] + 4.0 * v[idx + s] - v[idx + 2 * s]) / (2.0 * h)
            } else if i == n {
                (3.0 * v[idx] - 4.0 * v[idx - s] + v[idx - 2 * s]) / (2.0 * h)
            } else {
                (v[idx + s] - v[idx - s]) / (2.0 * h)
            }
        })
        .collect()
}

/// Second derivative along `axis` at every node.
pub fn second_partial(f: &Field, axis: usize) -> Vec<f64> {
    let grid = f.grid();
    let v = f.values();
    let s = grid.stride(axis);
    let n = grid.cells[axis];
    let h2 = grid.spacing[axis] * grid.spacing[axis];
    (0..v.len())
        .map(|idx| {
            let i = grid.axis_indices(idx)[axis];
            if i == 0 {
                (2.0 * v[idx] - 5.0 * v[idx + s] + 4.0 * v[idx + 2 * s] - v[idx + 3 * s]) / h2
            } else if i == n {
                (2.0 * v[idx] - 5.0 * v[idx - s] + 4.0 * v[idx - 2 * s] - v[idx - 3 * s]) / h2
            } else {
                (v[idx + s] - 2.0 * v[idx] + v[idx - s]) / h2
            }
        })
        .collect()
}

/// Node-wise gradients, zero-padded beyond `dim`.
pub fn gradient(f: &Field) -> Vec<[f64; MAX_DIM]> {
    let dim = f.grid().dim;
    let parts: Vec<Vec<f64>> = (0..dim).map(|k| partial(f, k)).collect();
    (0..f.len())
        .map(|i| {
            let mut g = [0.0; MAX_DIM];
            for k in 0..dim {
                g[k] = parts[k][i];
            }
            g
        })
        .collect()
}

/// Node-wise Hessians; the mixed entry is `∂₂(∂₁ f)`.
pub fn hessian(f: &Field) -> Vec<[[f64; MAX_DIM]; MAX_DIM]> {
    let grid = *f.grid();
    let d11 = second_partial(f, 0);
    let (d22, d12) = if grid.dim == 2 {
        let f1 = Field::from_vec(grid, partial(f, 0));
        (second_partial(f, 1), partial(&f1, 1))
    } else {
        (vec![0.0; f.len()], vec![0.0; f.len()])
    };
    (0..f.len())
        .map(|i| [[d11[i], d12[i]], [d12[i], d22[i]]])
        .collect()
}

fn check_grid(dm: &DiscreteModel, f: &Field) -> Result<(), OperatorError> {
    if *f.grid() != dm.grid {
        Err(OperatorError::GridMismatch)
    } else {
        Ok(())
    }
}

/// `L f = D : ∇²f − b · ∇f` with `b = D a − div D`.
pub fn apply_generator(dm: &DiscreteModel, f: &Field) -> Result<Field, OperatorError> {
    check_grid(dm, f)?;
    let dim = dm.dim();
    let g = gradient(f);
    let h = hessian(f);
    let values = (0..f.len())
        .map(|i| {
            let d = &dm.diffusion[i];
            let b = &dm.generator_drift[i];
            let mut s = 0.0;
            for r in 0..dim {
                for c in 0..dim {
                    s += d[r][c] * h[i][r][c];
                }
                s -= b[r] * g[i][r];
            }
            s
        })
        .collect();
    Ok(Field::from_vec(dm.grid, values))
}

#[inline]
fn contract(d: &[[f64; MAX_DIM]; MAX_DIM], u: &[f64; MAX_DIM], v: &[f64; MAX_DIM], dim: usize) -> f64 {
    if dim == 1 {
        d[0][0] * (u[0] * v[0])
    } else {
        d[0][0] * (u[0] * v[0]) + d[1][1] * (u[1] * v[1]) + d[0][1] * (u[0] * v[1] + u[1] * v[0])
    }
}

/// `Γ(f, g) = ⟨∇f, D ∇g⟩`; symmetric in `f` and `g` bit for bit.
pub fn gamma(dm: &DiscreteModel, f: &Field, g: &Field) -> Result<Field, OperatorError> {
    check_grid(dm, f)?;
    check_grid(dm, g)?;
    let gf = gradient(f);
    let gg = gradient(g);
    let dim = dm.dim();
    let values = (0..f.len())
        .map(|i| contract(&dm.diffusion[i], &gf[i], &gg[i], dim))
        .collect();
    Ok(Field::from_vec(dm.grid, values))
}

/// `Γ(f) = Γ(f, f)`.
pub fn gamma_sq(dm: &DiscreteModel, f: &Field) -> Result<Field, OperatorError> {
    gamma(dm, f, f)
}

/// `Γ₂(f) = ½(L Γ(f) − 2 Γ(f, L f))`. Values within [`GAMMA2_MARGIN`] steps
/// of the boundary are computed but not meaningful.
pub fn gamma2(dm: &DiscreteModel, f: &Field) -> Result<Field, OperatorError> {
    let gf = gamma_sq(dm, f)?;
    let lgf = apply_generator(dm, &gf)?;
    let lf = apply_generator(dm, f)?;
    let cross = gamma(dm, f, &lf)?;
    Ok(lgf.zip_map(&cross, |a, b| 0.5 * (a - 2.0 * b))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CdMethod {
    ConstantDEigenvalue,
    SampledGamma2,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdEstimate {
    pub rho: f64,
    pub method: CdMethod,
    /// Node where the minimum is attained.
    pub argmin: Vec<f64>,
    pub grid: Grid,
    /// Number of test fields (sampled method only).
    pub test_functions: usize,
    /// The sampled estimate is an upper bound on the true constant.
    pub upper_bound: bool,
}

/// Smallest generalized eigenvalue of `S v = λ D v` for symmetric `S` and
/// positive definite `D`, via `C⁻¹ S C⁻ᵀ` with `D = C Cᵀ`.
pub(crate) fn min_generalized_eigenvalue(
    s: &[[f64; MAX_DIM]; MAX_DIM],
    d: &[[f64; MAX_DIM]; MAX_DIM],
    dim: usize,
) -> f64 {
    if dim == 1 {
        return s[0][0] / d[0][0];
    }
    let c11 = d[0][0].sqrt();
    let c21 = d[1][0] / c11;
    let c22 = (d[1][1] - c21 * c21).sqrt();
    // rows of C⁻¹
    let inv = [[1.0 / c11, 0.0], [-c21 / (c11 * c22), 1.0 / c22]];
    let mut t = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = 0.0;
            for k in 0..2 {
                for l in 0..2 {
                    acc += inv[i][k] * s[k][l] * inv[j][l];
                }
            }
            t[i][j] = acc;
        }
    }
    let off = 0.5 * (t[0][1] + t[1][0]);
    let mean = 0.5 * (t[0][0] + t[1][1]);
    let r = (0.25 * (t[0][0] - t[1][1]).powi(2) + off * off).sqrt();
    mean - r
}

/// Best `ρ` in `½(J D + (J D)ᵀ) ≥ ρ D` over the grid nodes, where `J` is the
/// Jacobian of the generator drift `b = D a`. Requires constant `D`.
pub fn cd_rho_constant_d(model: &Model, grid: &Grid) -> Result<CdEstimate, OperatorError> {
    let dm = discretize_model(model, grid)?;
    if !dm.constant_diffusion {
        return Err(OperatorError::NonConstantDiffusion);
    }
    let dim = grid.dim;
    let d = dm.diffusion[0];
    let mut best = f64::INFINITY;
    let mut arg = 0;
    for idx in 0..grid.node_count() {
        let x = grid.node_point(idx);
        let (_, ja) = model.drift_jet(&x)?;
        let mut jb = [[0.0; MAX_DIM]; MAX_DIM];
        for i in 0..dim {
            for k in 0..dim {
                jb[i][k] = (0..dim).map(|j| d[i][j] * ja[j][k]).sum();
            }
        }
        let mut m = [[0.0; MAX_DIM]; MAX_DIM];
        for i in 0..dim {
            for k in 0..dim {
                m[i][k] = (0..dim).map(|j| jb[i][j] * d[j][k]).sum();
            }
        }
        let mut s = [[0.0; MAX_DIM]; MAX_DIM];
        for i in 0..dim {
            for k in 0..dim {
                s[i][k] = 0.5 * (m[i][k] + m[k][i]);
            }
        }
        let lam = min_generalized_eigenvalue(&s, &d, dim);
        if lam < best {
            best = lam;
            arg = idx;
        }
    }
    Ok(CdEstimate {
        rho: best,
        method: CdMethod::ConstantDEigenvalue,
        argmin: grid.node_point(arg),
        grid: *grid,
        test_functions: 0,
        upper_bound: false,
    })
}

/// `min Γ₂(f)/Γ(f)` over test fields and interior nodes with `Γ(f) > ε`.
/// Only ever an upper bound on the best curvature constant.
pub fn cd_rho_sampled(dm: &DiscreteModel, tests: &[Field]) -> Result<CdEstimate, OperatorError> {
    let grid = dm.grid;
    let mut best = f64::INFINITY;
    let mut arg = None;
    for f in tests {
        let g = gamma_sq(dm, f)?;
        let g2 = gamma2(dm, f)?;
        for idx in 0..grid.node_count() {
            if grid.boundary_distance(idx) < GAMMA2_MARGIN || !(g[idx] > GAMMA_EPS) {
                continue;
            }
            let r = g2[idx] / g[idx];
            if r < best {
                best = r;
                arg = Some(idx);
            }
        }
    }
    let arg = arg.ok_or(OperatorError::Inconclusive)?;
    Ok(CdEstimate {
        rho: best,
        method: CdMethod::SampledGamma2,
        argmin: grid.node_point(arg),
        grid,
        test_functions: tests.len(),
        upper_bound: true,
    })
}

/// A default family of smooth test fields: per-axis polynomials up to degree
/// three, exponentials, and mixed products in 2D.
pub fn default_test_fields(grid: &Grid) -> Vec<Field> {
    let mut out = Vec::new();
    let dim = grid.dim;
    for k in 0..dim {
        let c = 0.5 * (grid.lower[k] + grid.upper[k]);
        let w = 0.5 * (grid.upper[k] - grid.lower[k]);
        let fs: [Box<dyn Fn(f64) -> f64>; 6] = [
            Box::new(|x| x),
            Box::new(|x| x * x),
            Box::new(|x| x * x * x),
            Box::new(|x| (0.5 * x).exp()),
            Box::new(|x| (-0.5 * x).exp()),
            Box::new(|x| x + 0.1 * x * x),
        ];
        for f in fs {
            out.push(Field::from_vec(
                *grid,
                (0..grid.node_count())
                    .map(|i| f((grid.node(i)[k] - c) / w * 2.0))
                    .collect(),
            ));
        }
    }
    if dim == 2 {
        let n = grid.node_count();
        let x = |i: usize| grid.node(i);
        out.push(Field::from_vec(*grid, (0..n).map(|i| x(i)[0] * x(i)[1]).collect()));
        out.push(Field::from_vec(*grid, (0..n).map(|i| x(i)[0] + x(i)[1]).collect()));
        out.push(Field::from_vec(*grid, (0..n).map(|i| x(i)[0] - 2.0 * x(i)[1]).collect()));
        out.push(Field::from_vec(
            *grid,
            (0..n).map(|i| x(i)[0] * x(i)[0] + x(i)[0] * x(i)[1]).collect(),
        ));
    }
    out
}

/// `μ(w Γ₂(g)) − ρ μ(w Γ(g))` with `w = g^{(2−p)/(p−1)}`, over interior nodes.
pub fn integral_criterion_check(
    dm: &DiscreteModel,
    mu: &Measure,
    g: &Field,
    p: f64,
    rho: f64,
) -> Result<f64, OperatorError> {
    if !(p > 1.0 && p < 2.0) {
        return Err(OperatorError::InvalidExponent(p));
    }
    check_grid(dm, g)?;
    if *mu.grid() != dm.grid {
        return Err(OperatorError::GridMismatch);
    }
    if let Some(index) = g.values().iter().position(|&v| !(v > 0.0)) {
        return Err(OperatorError::NonPositive {
            index,
            value: g[index],
        });
    }
    let e = (2.0 - p) / (p - 1.0);
    let gg = gamma_sq(dm, g)?;
    let g2 = gamma2(dm, g)?;
    let w: Vec<f64> = g.values().iter().map(|v| v.powf(e)).collect();
    let lhs_vals: Vec<f64> = (0..g.len()).map(|i| w[i] * g2[i]).collect();
    let rhs_vals: Vec<f64> = (0..g.len()).map(|i| w[i] * gg[i]).collect();
    let keep = |i: usize| dm.grid.boundary_distance(i) >= GAMMA2_MARGIN;
    let lhs = mu.integrate_where(&lhs_vals, keep);
    let rhs = mu.integrate_where(&rhs_vals, keep);
    Ok(lhs - rho * rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gibbs_measure;

    fn ou(cells: usize) -> DiscreteModel {
        let m = Model::explicit(1, &["1"], &["x1"]).unwrap();
        let g = Grid::new(&[-6.0], &[6.0], &[cells]).unwrap();
        discretize_model(&m, &g).unwrap()
    }

    fn interior(grid: &Grid) -> impl Iterator<Item = usize> + '_ {
        (0..grid.node_count()).filter(move |&i| grid.boundary_distance(i) >= GAMMA2_MARGIN)
    }

    #[test]
    fn generator_on_ou_polynomials() {
        let dm = ou(256);
        let x = Field::from_fn(dm.grid, |p| p[0]).unwrap();
        let lx = apply_generator(&dm, &x).unwrap();
        let x2 = x.map(|v| v * v);
        let lx2 = apply_generator(&dm, &x2).unwrap();
        for i in 0..dm.grid.node_count() {
            let xi = dm.grid.node(i)[0];
            assert!((lx[i] + xi).abs() < 1e-10);
            assert!((lx2[i] - (2.0 - 2.0 * xi * xi)).abs() < 1e-8);
        }
        let c = Field::constant(dm.grid, 3.0);
        assert!(apply_generator(&dm, &c).unwrap().values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gamma_examples() {
        let dm = ou(128);
        let x = Field::from_fn(dm.grid, |p| p[0]).unwrap();
        assert!(gamma_sq(&dm, &x).unwrap().values().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let x2 = x.map(|v| v * v);
        let g = gamma_sq(&dm, &x2).unwrap();
        for i in 0..g.len() {
            let xi = dm.grid.node(i)[0];
            assert!((g[i] - 4.0 * xi * xi).abs() < 1e-8);
        }

        let m = Model::explicit(2, &["2", "0", "3"], &["0", "0"]).unwrap();
        let grid = Grid::new(&[-1.0, -1.0], &[1.0, 1.0], &[16, 16]).unwrap();
        let dm2 = discretize_model(&m, &grid).unwrap();
        let f = Field::from_fn(grid, |p| p[0]).unwrap();
        let g = Field::from_fn(grid, |p| p[1]).unwrap();
        assert!(gamma(&dm2, &f, &g).unwrap().values().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn gamma2_examples() {
        let dm = ou(256);
        let x = Field::from_fn(dm.grid, |p| p[0]).unwrap();
        let g2 = gamma2(&dm, &x).unwrap();
        for i in interior(&dm.grid) {
            assert!((g2[i] - 1.0).abs() < 1e-9, "{}", g2[i]);
        }
        let x2 = x.map(|v| v * v);
        let g2 = gamma2(&dm, &x2).unwrap();
        // x = 1 is a node: 1 = -6 + i * 12/256 at i = 149.33.., use the formula
        for i in interior(&dm.grid) {
            let xi = dm.grid.node(i)[0];
            assert!((g2[i] - (4.0 + 4.0 * xi * xi)).abs() < 1e-6);
        }
        let c = Field::constant(dm.grid, 1.0);
        assert!(gamma2(&dm, &c).unwrap().values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gamma2_at_unit_point() {
        let m = Model::explicit(1, &["1"], &["x1"]).unwrap();
        let g = Grid::new(&[-4.0], &[4.0], &[256]).unwrap();
        let dm = discretize_model(&m, &g).unwrap();
        let f = Field::from_fn(g, |p| p[0] * p[0]).unwrap();
        let g2 = gamma2(&dm, &f).unwrap();
        let i = g.index([160, 0]);
        assert_eq!(g.node(i)[0], 1.0);
        assert!((g2[i] - 8.0).abs() < 1e-8);
    }

    #[test]
    fn constant_d_rho_examples() {
        let g1 = Grid::new(&[-6.0], &[6.0], &[64]).unwrap();
        let ou = Model::explicit(1, &["1"], &["x1"]).unwrap();
        assert!((cd_rho_constant_d(&ou, &g1).unwrap().rho - 1.0).abs() < 1e-12);

        let g2 = Grid::new(&[-3.0, -3.0], &[3.0, 3.0], &[8, 8]).unwrap();
        let shear = Model::explicit(2, &["1", "0", "1"], &["x1 + 4*x2", "x2"]).unwrap();
        assert!((cd_rho_constant_d(&shear, &g2).unwrap().rho + 1.0).abs() < 1e-12);
        let rot = Model::explicit(2, &["1", "0", "1"], &["x1 - x2", "x1 + x2"]).unwrap();
        assert!((cd_rho_constant_d(&rot, &g2).unwrap().rho - 1.0).abs() < 1e-12);

        let var = Model::explicit(1, &["1 + x1^2"], &["x1"]).unwrap();
        assert_eq!(
            cd_rho_constant_d(&var, &g1).unwrap_err(),
            OperatorError::NonConstantDiffusion
        );
    }

    #[test]
    fn generalized_eigenvalue_matches_characteristic_polynomial() {
        // det(S − λ D) = 0 solved by hand for S = [[2,1],[1,3]], D = [[2,0.5],[0.5,1]]
        let s: [[f64; 2]; 2] = [[2.0, 1.0], [1.0, 3.0]];
        let d: [[f64; 2]; 2] = [[2.0, 0.5], [0.5, 1.0]];
        let a = d[0][0] * d[1][1] - d[0][1] * d[1][0];
        let b = -(s[0][0] * d[1][1] + s[1][1] * d[0][0] - 2.0 * s[0][1] * d[0][1]);
        let c = s[0][0] * s[1][1] - s[0][1] * s[0][1];
        let lam = (-b - (b * b - 4.0 * a * c).sqrt()) / (2.0 * a);
        assert!((min_generalized_eigenvalue(&s, &d, 2) - lam).abs() < 1e-12);
    }

    #[test]
    fn sampled_rho_examples() {
        let dm = ou(512);
        let tests: Vec<Field> = [
            |x: f64| x,
            |x: f64| x * x,
            |x: f64| (0.5 * x).exp(),
        ]
        .iter()
        .map(|f| Field::from_fn(dm.grid, |p| f(p[0])).unwrap())
        .collect();
        let est = cd_rho_sampled(&dm, &tests).unwrap();
        assert!((est.rho - 1.0).abs() <= 0.02, "{}", est.rho);
        assert!(est.upper_bound);

        let heat = discretize_model(
            &Model::explicit(1, &["1"], &["0"]).unwrap(),
            &dm.grid,
        )
        .unwrap();
        let est = cd_rho_sampled(&heat, &default_test_fields(&dm.grid)).unwrap();
        assert!(est.rho.abs() <= 0.02, "{}", est.rho);

        let c = vec![Field::constant(dm.grid, 2.0)];
        assert_eq!(cd_rho_sampled(&dm, &c).unwrap_err(), OperatorError::Inconclusive);
    }

    #[test]
    fn sampled_dominates_constant_d() {
        let grid = Grid::new(&[-3.0, -3.0], &[3.0, 3.0], &[48, 48]).unwrap();
        for drift in [["x1 + 4*x2", "x2"], ["x1 - x2", "x1 + x2"], ["2*x1", "x2 + 0.5*x1"]] {
            let m = Model::explicit(2, &["1", "0.3", "2"], &drift).unwrap();
            let exact = cd_rho_constant_d(&m, &grid).unwrap().rho;
            let dm = discretize_model(&m, &grid).unwrap();
            let sampled = cd_rho_sampled(&dm, &default_test_fields(&grid)).unwrap().rho;
            assert!(sampled >= exact - 0.05, "{sampled} < {exact}");
        }
    }

    #[test]
    fn integral_criterion_examples() {
        let dm = ou(256);
        let mu = gibbs_measure(&Field::from_fn(dm.grid, |p| 0.5 * p[0] * p[0]).unwrap()).unwrap();
        let g = Field::from_fn(dm.grid, |p| 2.0 + (-(p[0] - 0.5).powi(2)).exp()).unwrap();
        let m1 = integral_criterion_check(&dm, &mu, &g, 1.5, 1.0).unwrap();
        assert!(m1 >= 0.0);
        let m2 = integral_criterion_check(&dm, &mu, &g, 1.5, -10.0).unwrap();
        assert!(m2 > m1);
        let c = Field::constant(dm.grid, 2.0);
        assert_eq!(integral_criterion_check(&dm, &mu, &c, 1.5, 1.0).unwrap(), 0.0);
        let neg = g.map(|v| v - 2.5);
        assert!(matches!(
            integral_criterion_check(&dm, &mu, &neg, 1.5, 1.0),
            Err(OperatorError::NonPositive { .. })
        ));
        assert!(matches!(
            integral_criterion_check(&dm, &mu, &g, 2.0, 1.0),
            Err(OperatorError::InvalidExponent(_))
        ));
    }

    #[test]
    fn gamma_is_symmetric_and_linear() {
        let m = Model::explicit(2, &["1 + 0.5*x1^2", "0.2", "1"], &["x1", "x2"]).unwrap();
        let grid = Grid::new(&[-2.0, -2.0], &[2.0, 2.0], &[16, 16]).unwrap();
        let dm = discretize_model(&m, &grid).unwrap();
        let f = Field::from_fn(grid, |p| (p[0] * p[1]).sin()).unwrap();
        let g = Field::from_fn(grid, |p| p[0].exp() - p[1]).unwrap();
        assert_eq!(gamma(&dm, &f, &g).unwrap(), gamma(&dm, &g, &f).unwrap());
        let a = gamma(&dm, &f.map(|v| 3.5 * v), &g).unwrap();
        let b = gamma(&dm, &f, &g).unwrap();
        for i in 0..a.len() {
            assert!((a[i] - 3.5 * b[i]).abs() <= 1e-12 * (1.0 + b[i].abs()));
        }
    }

    fn observed_order(errors: &[f64]) -> f64 {
        (errors[0] / errors[1]).log2()
    }

    #[test]
    fn product_rule_converges_at_second_order() {
        let m = Model::explicit(1, &["1 + 0.25*x1^2"], &["x1 + sin(x1)"]).unwrap();
        let mut errs = Vec::new();
        for cells in [64, 128] {
            let grid = Grid::new(&[-2.0], &[2.0], &[cells]).unwrap();
            let dm = discretize_model(&m, &grid).unwrap();
            let f = Field::from_fn(grid, |p| (0.7 * p[0]).sin()).unwrap();
            let g = Field::from_fn(grid, |p| p[0] * p[0] + p[0]).unwrap();
            let fg = f.zip_map(&g, |a, b| a * b).unwrap();
            let l = |u: &Field| apply_generator(&dm, u).unwrap();
            let (lfg, lf, lg) = (l(&fg), l(&f), l(&g));
            let gm = gamma(&dm, &f, &g).unwrap();
            let err = (0..grid.node_count())
                .filter(|&i| grid.boundary_distance(i) >= 1)
                .map(|i| (0.5 * (lfg[i] - f[i] * lg[i] - g[i] * lf[i]) - gm[i]).abs())
                .fold(0.0, f64::max);
            errs.push(err);
        }
        assert!(observed_order(&errs) >= 1.9, "{errs:?}");
    }

    #[test]
    fn chain_rule_converges_at_second_order() {
        let m = Model::explicit(2, &["1", "0.3", "1.5"], &["x1", "x2"]).unwrap();
        let mut errs = Vec::new();
        for cells in [64, 128] {
            let grid = Grid::new(&[-2.0, -2.0], &[2.0, 2.0], &[cells, cells]).unwrap();
            let dm = discretize_model(&m, &grid).unwrap();
            let f = Field::from_fn(grid, |p| (0.5 * p[0] + 0.3 * p[1]).sin() + p[1]).unwrap();
            let phi_f = f.map(|v| (0.5 * v).exp());
            let lhs = gamma_sq(&dm, &phi_f).unwrap();
            let gf = gamma_sq(&dm, &f).unwrap();
            let err = (0..grid.node_count())
                .filter(|&i| grid.boundary_distance(i) >= 1)
                .map(|i| (lhs[i] - 0.25 * f[i].exp() * gf[i]).abs())
                .fold(0.0, f64::max);
            errs.push(err);
        }
        assert!(observed_order(&errs) >= 1.9, "{errs:?}");
    }
}
