//! Vertex-centred finite volumes for `∂u/∂t = div[D(∇u + u a)]` with no-flux
//! boundaries, and the dual backward semigroup.
//!
//! Each node owns its dual cell. With `M` the diagonal of cell volumes and
//! `K` the matrix of summed face fluxes, the forward operator on densities is
//! `A = M⁻¹K` and the backward generator on functions is `L = M⁻¹Kᵀ`, so
//! `⟨A u, f⟩_M = ⟨u, L f⟩_M` holds by construction. Every face flux leaves one
//! cell and enters its neighbour, which makes the columns of `K` sum to zero.
//!
//! The flux along axis `k` is split as
//! `−D_kk(∂_k u + β_k u) − Σ_{l≠k} D_kl (cross terms)`. The first part uses
//! Scharfetter–Gummel exponential fitting with the Bernoulli function
//! `B(z) = z/(e^z − 1)`, so its coefficients are positive. In gradient mode the
//! fitted exponent is the potential difference across the face, which makes
//! `e^{−V}` an exact discrete steady state for diagonal `D`. Off-diagonal
//! diffusion is handled by centred cross terms; those break the M-matrix
//! property, so positivity is only guaranteed for diagonal `D`.
//!
//! Two-dimensional gradient models with a perturbation `F` satisfying
//! `div(e^{−V} D F) = 0` use a stream-function transport instead: the flux of
//! `G = e^{−(V−V_min)} D F` through each dual face is a difference of a stream
//! function at dual vertices, so its discrete divergence vanishes exactly, and
//! it is combined with the diffusive flux of `u e^{V−V_min}` into a single
//! exponentially fitted face flux (upwinding where `e^{−(V−V_min)}` underflows).

use serde::Serialize;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::expr::EvalFault;
use crate::linalg::{BandedLu, CsrMatrix, LinalgError};
use crate::model::{
    divergence_residual_normalized, gibbs_measure, DiscreteModel, Field, Measure, ModelError,
};
use crate::numeric::neumaier_sum;

/// Normalized divergence residual under which `F` counts as divergence free.
pub const DIVERGENCE_FREE_TOL: f64 = 1e-8;

/// Relative pivot floor used when factoring the singular flux matrix.
const KERNEL_PIVOT_TOL: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PdeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Eval(#[from] EvalFault),
    #[error("invalid time parameters: {0}")]
    InvalidTime(String),
    #[error("time {t} is not a multiple of the step {dt}")]
    Incommensurate { t: f64, dt: f64 },
    #[error("discretization is not ergodic: {count} near-zero pivots in the flux matrix")]
    NonErgodic { count: usize },
    #[error("density reached {min:e} at t = {t} under Crank-Nicolson; use implicit-euler")]
    NegativeDensity { t: f64, min: f64 },
    #[error("initial density must be nonnegative with positive mass")]
    InvalidInitialDensity,
    #[error("field lives on a different grid than the propagator")]
    GridMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    ImplicitEuler,
    CrankNicolson,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::ImplicitEuler => "implicit-euler",
            Scheme::CrankNicolson => "crank-nicolson",
        })
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "implicit-euler" => Ok(Scheme::ImplicitEuler),
            "crank-nicolson" => Ok(Scheme::CrankNicolson),
            _ => Err(format!(
                "unknown scheme `{s}`; expected implicit-euler or crank-nicolson"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    ExponentialFitting,
    StreamFunction,
}

/// `B(z) = z / (e^z − 1)`, finite for all `z`.
pub fn bernoulli(z: f64) -> f64 {
    if z == 0.0 {
        1.0
    } else {
        z / z.exp_m1()
    }
}

#[derive(Debug, Clone)]
pub struct Propagator {
    dm: DiscreteModel,
    volumes: Vec<f64>,
    flux: CsrMatrix,
    forward: CsrMatrix,
    backward: CsrMatrix,
    transport: Transport,
    shifted_potential: Option<Vec<f64>>,
}

impl Propagator {
    pub fn model(&self) -> &DiscreteModel {
        &self.dm
    }

    pub fn grid(&self) -> &crate::model::Grid {
        &self.dm.grid
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    /// `K = M A`: summed face fluxes.
    pub fn flux_matrix(&self) -> &CsrMatrix {
        &self.flux
    }

    /// `A_h`, acting on node densities.
    pub fn forward(&self) -> &CsrMatrix {
        &self.forward
    }

    /// `L_h = M⁻¹ A_hᵀ M`, acting on functions.
    pub fn backward(&self) -> &CsrMatrix {
        &self.backward
    }

    pub fn transport(&self) -> Transport {
        self.transport
    }

    /// `V − min V` at the nodes, in gradient mode.
    pub fn shifted_potential(&self) -> Option<&[f64]> {
        self.shifted_potential.as_deref()
    }

    /// Whether `e^{−V}` is the invariant density: gradient mode with `F`
    /// absent or divergence free.
    pub fn gibbs_is_invariant(&self) -> bool {
        self.shifted_potential.is_some()
            && (self.dm.perturbation.is_none() || self.transport == Transport::StreamFunction)
    }

    fn check(&self, f: &Field) -> Result<(), PdeError> {
        if *f.grid() != self.dm.grid {
            Err(PdeError::GridMismatch)
        } else {
            Ok(())
        }
    }
}

fn dual_vertex(grid: &crate::model::Grid, axis: usize, b: usize) -> f64 {
    let n = grid.cells[axis];
    if b == 0 {
        grid.lower[axis]
    } else if b == n + 1 {
        grid.upper[axis]
    } else {
        grid.lower[axis] + (b as f64 - 0.5) * grid.spacing[axis]
    }
}

/// Stream function of `G = e^{−(V−V_min)} D F` at dual vertices, indexed
/// `[a][b]` with `a, b` over `0..=cells+1`. It is obtained by Simpson
/// integration of `G_1` along each vertical dual line and vanishes on the box
/// boundary: the bottom-up integral is corrected by the fraction `θ` of the
/// total line integral, `θ` being the relative height.
fn stream_function(dm: &DiscreteModel, vmin: f64) -> Result<Vec<Vec<f64>>, PdeError> {
    let grid = dm.grid;
    let model = &dm.model;
    let v = model.potential().ok_or(ModelError::MissingPotential)?;
    let f = model.perturbation().ok_or(ModelError::MissingPerturbation)?;
    let g1 = |x: f64, y: f64| -> Result<f64, PdeError> {
        let p = [x, y];
        let d = model.diffusion_at(&p)?;
        let f1 = f[0].eval(&p)?;
        let f2 = f[1].eval(&p)?;
        Ok((-(v.eval(&p)? - vmin)).exp() * (d[0][0] * f1 + d[0][1] * f2))
    };
    let (n1, n2) = (grid.cells[0], grid.cells[1]);
    let (lo, hi) = (grid.lower[1], grid.upper[1]);
    let mut psi = vec![vec![0.0; n2 + 2]; n1 + 2];
    for (a, col) in psi.iter_mut().enumerate().take(n1 + 1).skip(1) {
        let x = dual_vertex(&grid, 0, a);
        let mut cum = vec![0.0; n2 + 2];
        let mut prev = g1(x, lo)?;
        for b in 0..=n2 {
            let s0 = dual_vertex(&grid, 1, b);
            let s1 = dual_vertex(&grid, 1, b + 1);
            let mid = g1(x, 0.5 * (s0 + s1))?;
            let end = g1(x, s1)?;
            cum[b + 1] = cum[b] + (s1 - s0) / 6.0 * (prev + 4.0 * mid + end);
            prev = end;
        }
        let total = cum[n2 + 1];
        for b in 0..n2 + 2 {
            let theta = if b == n2 + 1 {
                1.0
            } else {
                (dual_vertex(&grid, 1, b) - lo) / (hi - lo)
            };
            col[b] = cum[b] - theta * total;
        }
    }
    Ok(psi)
}

/// Assembles the forward and backward operators.
pub fn assemble(dm: &DiscreteModel) -> Result<Propagator, PdeError> {
    let grid = dm.grid;
    let dim = grid.dim;
    let n = grid.node_count();
    let volumes = grid.volumes();
    let vmin = dm
        .potential
        .as_ref()
        .map(|v| v.iter().copied().fold(f64::INFINITY, f64::min));
    let shifted: Option<Vec<f64>> = dm
        .potential
        .as_ref()
        .map(|v| v.iter().map(|x| x - vmin.unwrap()).collect());
    let stream = if dim == 2 && dm.perturbation.is_some() && shifted.is_some() {
        let r = divergence_residual_normalized(&dm.model, &grid)?;
        r.values().iter().all(|x| x.abs() <= DIVERGENCE_FREE_TOL)
    } else {
        false
    };
    let psi = if stream {
        Some(stream_function(dm, vmin.unwrap())?)
    } else {
        None
    };
    // e^{−(V − V_min)}: the cross terms and the transport act on u / w
    let w: Vec<f64> = match &shifted {
        Some(v) => v.iter().map(|x| (-x).exp()).collect(),
        None => vec![1.0; n],
    };

    let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(n * 9);
    // adds `flux_{i→j} = Σ c_m u_m`
    let mut push = |i: usize, j: usize, m: usize, c: f64| {
        trip.push((i, m, -c));
        trip.push((j, m, c));
    };

    for k in 0..dim {
        let s = grid.stride(k);
        let h = grid.spacing[k];
        for i in 0..n {
            let ij = grid.axis_indices(i);
            if ij[k] == grid.cells[k] {
                continue;
            }
            let j = i + s;
            let area = if dim == 2 {
                grid.dual_width(1 - k, ij[1 - k])
            } else {
                1.0
            };
            let dkk = 0.5 * (dm.diffusion[i][k][k] + dm.diffusion[j][k][k]);
            let delta = match &shifted {
                Some(v) => {
                    let mut d = v[j] - v[i];
                    if !stream {
                        if let Some(fv) = &dm.perturbation {
                            let t = |m: usize| {
                                (0..dim).map(|l| dm.diffusion[m][k][l] * fv[m][l]).sum::<f64>()
                                    / dm.diffusion[m][k][k]
                            };
                            d -= 0.5 * h * (t(i) + t(j));
                        }
                    }
                    d
                }
                None => {
                    let beta = |m: usize| {
                        (0..dim)
                            .map(|l| dm.diffusion[m][k][l] * dm.drift[m][l])
                            .sum::<f64>()
                            / dm.diffusion[m][k][k]
                    };
                    0.5 * h * (beta(i) + beta(j))
                }
            };
            let c = dkk * area / h;
            // transport flux of G through this face, from the stream function
            let g = psi.as_ref().map(|psi| {
                let (a, b) = (ij[0], ij[1]);
                if k == 0 {
                    psi[a + 1][b + 1] - psi[a + 1][b]
                } else {
                    -(psi[a + 1][b + 1] - psi[a][b + 1])
                }
            });
            // diffusion in u / w form is cw (ρ_i − ρ_j) with ρ = u / w
            let cw = c * bernoulli(delta) * w[i];
            match g {
                Some(g) if cw > 0.0 => {
                    // fitted diffusion + transport: cw [B(−Pe) ρ_i − B(Pe) ρ_j]
                    let pe = g / cw;
                    push(i, j, i, cw * bernoulli(-pe) / w[i]);
                    push(i, j, j, -cw * bernoulli(pe) / w[j]);
                }
                Some(g) => {
                    push(i, j, i, c * bernoulli(delta));
                    push(i, j, j, -c * bernoulli(-delta));
                    if g >= 0.0 {
                        push(i, j, i, g / w[i]);
                    } else {
                        push(i, j, j, g / w[j]);
                    }
                }
                None => {
                    push(i, j, i, c * bernoulli(delta));
                    push(i, j, j, -c * bernoulli(-delta));
                }
            }

            if dim == 2 {
                let l = 1 - k;
                let dkl = 0.5 * (dm.diffusion[i][k][l] + dm.diffusion[j][k][l]);
                if dkl != 0.0 {
                    // −D_kl · w · ∂_l(u / w), averaged over the two face nodes
                    let sl = grid.stride(l);
                    let hl = grid.spacing[l];
                    for &m in &[i, j] {
                        let ml = grid.axis_indices(m)[l];
                        let (lo, hi, span) = if ml == 0 {
                            (m, m + sl, hl)
                        } else if ml == grid.cells[l] {
                            (m - sl, m, hl)
                        } else {
                            (m - sl, m + sl, 2.0 * hl)
                        };
                        let coef = -0.5 * dkl * area * w[m] / span;
                        push(i, j, hi, coef / w[hi]);
                        push(i, j, lo, -coef / w[lo]);
                    }
                }
            }

        }
    }
    let flux = CsrMatrix::from_triplets(n, trip);
    let inv_vol: Vec<f64> = volumes.iter().map(|v| 1.0 / v).collect();
    let ones = vec![1.0; n];
    let forward = flux.scale(&inv_vol, &ones);
    let backward = flux.transpose().scale(&inv_vol, &ones);
    Ok(Propagator {
        dm: dm.clone(),
        volumes,
        flux,
        forward,
        backward,
        transport: if stream {
            Transport::StreamFunction
        } else {
            Transport::ExponentialFitting
        },
        shifted_potential: shifted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Backward,
}

/// One reusable time step of the forward or backward equation.
#[derive(Debug, Clone)]
pub struct Stepper {
    lu: BandedLu,
    /// `M − θ dt K`, kept for one step of iterative refinement on forward
    /// solves, which holds the mass residual at round-off over long runs.
    refine: Option<CsrMatrix>,
    explicit: Option<CsrMatrix>,
    volumes: Vec<f64>,
    dt: f64,
    scheme: Scheme,
}

impl Stepper {
    fn new(prop: &Propagator, dt: f64, scheme: Scheme, dir: Direction) -> Result<Self, PdeError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(PdeError::InvalidTime(format!("dt = {dt} must be positive")));
        }
        let k = match dir {
            Direction::Forward => prop.flux.clone(),
            Direction::Backward => prop.flux.transpose(),
        };
        let theta = match scheme {
            Scheme::ImplicitEuler => 1.0,
            Scheme::CrankNicolson => 0.5,
        };
        let n = prop.volumes.len();
        // M − θ dt K
        let implicit = CsrMatrix::from_triplets(
            n,
            k.triplets()
                .map(|(r, c, v)| (r, c, -theta * dt * v))
                .chain((0..n).map(|i| (i, i, prop.volumes[i])))
                .collect(),
        );
        let lu = BandedLu::factor(&implicit)?;
        let explicit = (scheme == Scheme::CrankNicolson).then(|| {
            CsrMatrix::from_triplets(
                n,
                k.triplets()
                    .map(|(r, c, v)| (r, c, (1.0 - theta) * dt * v))
                    .collect(),
            )
        });
        Ok(Stepper {
            lu,
            refine: (dir == Direction::Forward).then_some(implicit),
            explicit,
            volumes: prop.volumes.clone(),
            dt,
            scheme,
        })
    }

    pub fn forward(prop: &Propagator, dt: f64, scheme: Scheme) -> Result<Self, PdeError> {
        Self::new(prop, dt, scheme, Direction::Forward)
    }

    pub fn backward(prop: &Propagator, dt: f64, scheme: Scheme) -> Result<Self, PdeError> {
        Self::new(prop, dt, scheme, Direction::Backward)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn step(&self, x: &mut [f64]) {
        let extra = self.explicit.as_ref().map(|e| e.matvec(x));
        for (i, xi) in x.iter_mut().enumerate() {
            *xi *= self.volumes[i];
        }
        if let Some(e) = extra {
            for (xi, ei) in x.iter_mut().zip(e) {
                *xi += ei;
            }
        }
        match &self.refine {
            Some(a) => {
                let b = x.to_vec();
                self.lu.solve_in_place(x);
                let ax = a.matvec(x);
                let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
                self.lu.solve_in_place(&mut r);
                for (xi, ri) in x.iter_mut().zip(r) {
                    *xi += ri;
                }
            }
            None => self.lu.solve_in_place(x),
        }
    }
}

/// Number of steps and effective step for reaching `t` with steps at most `dt`.
pub fn step_plan(t: f64, dt: f64) -> Result<(usize, f64), PdeError> {
    if !(t >= 0.0) || !t.is_finite() || !(dt > 0.0) {
        return Err(PdeError::InvalidTime(format!("t = {t}, dt = {dt}")));
    }
    if t == 0.0 {
        return Ok((0, dt));
    }
    let n = ((t / dt) - 1e-9).ceil().max(1.0) as usize;
    Ok((n, t / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveOptions {
    pub t_end: f64,
    pub dt: f64,
    pub scheme: Scheme,
    /// Snapshot times; `0` and `t_end` are always included. Each time is
    /// rounded to the nearest step.
    pub snapshots: Vec<f64>,
}

impl SolveOptions {
    pub fn new(t_end: f64, dt: f64, scheme: Scheme) -> Self {
        SolveOptions {
            t_end,
            dt,
            scheme,
            snapshots: Vec::new(),
        }
    }

    /// Snapshots every `interval` from `0` to `t_end`.
    pub fn every(mut self, interval: f64) -> Self {
        let n = (self.t_end / interval + 1e-9).floor() as usize;
        self.snapshots = (0..=n).map(|i| i as f64 * interval).collect();
        self
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub scheme: Scheme,
    /// Effective step.
    pub dt: f64,
    pub times: Vec<f64>,
    pub snapshots: Vec<Field>,
    /// Per-step diagnostics, including the initial state.
    pub step_times: Vec<f64>,
    pub masses: Vec<f64>,
    pub minima: Vec<f64>,
}

impl Trajectory {
    /// Largest `|mass(t) − mass(0)| / mass(0)` over all steps.
    pub fn max_relative_mass_drift(&self) -> f64 {
        let m0 = self.masses[0];
        self.masses
            .iter()
            .map(|m| ((m - m0) / m0).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.minima.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn last(&self) -> &Field {
        self.snapshots.last().expect("trajectory has at least one snapshot")
    }
}

fn volume_mass(vol: &[f64], u: &[f64]) -> f64 {
    neumaier_sum(vol.iter().zip(u).map(|(v, x)| v * x))
}

/// Solves the forward equation from `u0`, normalized to unit mass.
pub fn solve_fokker_planck(
    prop: &Propagator,
    u0: &Field,
    opts: &SolveOptions,
) -> Result<Trajectory, PdeError> {
    prop.check(u0)?;
    let mass0 = volume_mass(&prop.volumes, u0.values());
    if u0.values().iter().any(|&v| v < 0.0) || !(mass0 > 0.0) {
        return Err(PdeError::InvalidInitialDensity);
    }
    let (n, dt) = step_plan(opts.t_end, opts.dt)?;
    let stepper = Stepper::forward(prop, dt, opts.scheme)?;
    let mut wanted: Vec<usize> = opts
        .snapshots
        .iter()
        .filter(|&&t| t >= 0.0 && t <= opts.t_end * (1.0 + 1e-12))
        .map(|&t| (t / dt).round() as usize)
        .chain([0, n])
        .map(|s| s.min(n))
        .collect();
    wanted.sort_unstable();
    wanted.dedup();

    let grid = prop.dm.grid;
    let mut u: Vec<f64> = u0.values().iter().map(|v| v / mass0).collect();
    let mut traj = Trajectory {
        scheme: opts.scheme,
        dt,
        times: Vec::new(),
        snapshots: Vec::new(),
        step_times: Vec::with_capacity(n + 1),
        masses: Vec::with_capacity(n + 1),
        minima: Vec::with_capacity(n + 1),
    };
    let mut next = 0;
    for step in 0..=n {
        if step > 0 {
            stepper.step(&mut u);
        }
        let t = step as f64 * dt;
        let min = u.iter().copied().fold(f64::INFINITY, f64::min);
        let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if opts.scheme == Scheme::CrankNicolson && min < -1e-12 * max.max(1.0) {
            return Err(PdeError::NegativeDensity { t, min });
        }
        traj.step_times.push(t);
        traj.masses.push(volume_mass(&prop.volumes, &u));
        traj.minima.push(min);
        if next < wanted.len() && wanted[next] == step {
            traj.times.push(t);
            traj.snapshots.push(Field::new(grid, u.clone())?);
            next += 1;
        }
    }
    Ok(traj)
}

/// Normalized kernel of `A_h`. The flux matrix is singular by construction
/// (its columns sum to zero); for an ergodic discretization the unpivoted LU
/// has a single vanishing pivot, the last one, and the kernel follows by back
/// substitution. Further near-zero pivots indicate a kernel of dimension
/// above one.
pub fn steady_state(prop: &Propagator) -> Result<Field, PdeError> {
    let lu = BandedLu::factor_singular(&prop.flux, KERNEL_PIVOT_TOL);
    let n = prop.volumes.len();
    let extra = lu.small_pivots().iter().filter(|&&r| r != n - 1).count();
    if extra > 0 {
        return Err(PdeError::NonErgodic { count: extra + 1 });
    }
    let mut x = lu.null_vector();
    let m = volume_mass(&prop.volumes, &x);
    for xi in x.iter_mut() {
        *xi /= m;
    }
    let max = x.iter().copied().fold(0.0, f64::max);
    if x.iter().any(|&v| v < -1e-12 * max) {
        return Err(PdeError::NonErgodic { count: 1 });
    }
    for xi in x.iter_mut() {
        *xi = xi.max(0.0);
    }
    Ok(Field::new(prop.dm.grid, x)?)
}

/// `max |A_h u|` relative to `max |u|`.
pub fn stationarity_residual(prop: &Propagator, u: &Field) -> f64 {
    let r = prop.forward.matvec(u.values());
    let scale = u.values().iter().map(|v| v.abs()).fold(0.0, f64::max);
    r.iter().map(|v| v.abs()).fold(0.0, f64::max) / scale
}

/// Invariant measure of the discrete dynamics: the Gibbs measure when `e^{−V}`
/// is invariant, otherwise the normalized kernel of `A_h`.
pub fn invariant_measure(prop: &Propagator) -> Result<Measure, PdeError> {
    if prop.gibbs_is_invariant() {
        Ok(gibbs_measure(&prop.dm.potential_field().expect("gradient mode"))?)
    } else {
        Ok(Measure::from_density(&steady_state(prop)?)?)
    }
}

/// `P_t f` by backward evolution with `L_h`.
pub fn semigroup_apply(prop: &Propagator, f: &Field, t: f64, dt: f64) -> Result<Field, PdeError> {
    semigroup_apply_with(prop, f, t, dt, Scheme::ImplicitEuler)
}

pub fn semigroup_apply_with(
    prop: &Propagator,
    f: &Field,
    t: f64,
    dt: f64,
    scheme: Scheme,
) -> Result<Field, PdeError> {
    prop.check(f)?;
    let (n, dt) = step_plan(t, dt)?;
    if n == 0 {
        return Ok(f.clone());
    }
    let stepper = Stepper::backward(prop, dt, scheme)?;
    let mut v = f.values().to_vec();
    for _ in 0..n {
        stepper.step(&mut v);
    }
    Ok(Field::new(prop.dm.grid, v)?)
}

/// Evolves several functions under `P_t` and records them at each of `times`
/// (ascending, multiples of `dt`). Result is indexed `[time][field]`.
pub fn semigroup_evolve(
    prop: &Propagator,
    fields: &[Field],
    times: &[f64],
    dt: f64,
    scheme: Scheme,
) -> Result<Vec<Vec<Field>>, PdeError> {
    for f in fields {
        prop.check(f)?;
    }
    let mut steps = Vec::with_capacity(times.len());
    for &t in times {
        let (n, _) = step_plan(t, dt)?;
        if ((n as f64) * dt - t).abs() > 1e-9 * t.max(1.0) {
            return Err(PdeError::Incommensurate { t, dt });
        }
        if steps.last().is_some_and(|&p| n < p) {
            return Err(PdeError::InvalidTime("times must be ascending".into()));
        }
        steps.push(n);
    }
    let stepper = Stepper::backward(prop, dt, scheme)?;
    let mut state: Vec<Vec<f64>> = fields.iter().map(|f| f.values().to_vec()).collect();
    let mut out = Vec::with_capacity(times.len());
    let mut done = 0;
    for &n in &steps {
        while done < n {
            for v in state.iter_mut() {
                stepper.step(v);
            }
            done += 1;
        }
        out.push(
            state
                .iter()
                .map(|v| Field::new(prop.dm.grid, v.clone()))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{discretize_model, Grid, Model};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ou(cells: usize) -> Propagator {
        let m = Model::gradient(1, &["1"], "x1^2/2", None).unwrap();
        let g = Grid::new(&[-6.0], &[6.0], &[cells]).unwrap();
        assemble(&discretize_model(&m, &g).unwrap()).unwrap()
    }

    fn rotation(cells: usize) -> Propagator {
        let m = Model::gradient(2, &["1", "0", "1"], "(x1^2 + x2^2)/2", Some(&["x2", "-x1"])).unwrap();
        let g = Grid::new(&[-5.0, -5.0], &[5.0, 5.0], &[cells, cells]).unwrap();
        assemble(&discretize_model(&m, &g).unwrap()).unwrap()
    }

    fn gaussian(grid: Grid, mean: f64) -> Field {
        Field::from_fn(grid, |p| (-0.5 * (p[0] - mean).powi(2)).exp()).unwrap()
    }

    #[test]
    fn bernoulli_is_stable() {
        assert_eq!(bernoulli(0.0), 1.0);
        assert!((bernoulli(1e-10) - (1.0 - 0.5e-10)).abs() < 1e-15);
        assert_eq!(bernoulli(800.0), 0.0);
        assert!((bernoulli(-800.0) - 800.0).abs() < 1e-12);
        for z in [-3.0, -0.1, 0.2, 5.0] {
            assert!((bernoulli(-z) - bernoulli(z) - z).abs() < 1e-13);
        }
    }

    #[test]
    fn pure_diffusion_is_neumann_laplacian() {
        let m = Model::explicit(1, &["1"], &["0"]).unwrap();
        let g = Grid::new(&[0.0], &[1.0], &[10]).unwrap();
        let p = assemble(&discretize_model(&m, &g).unwrap()).unwrap();
        let h2 = 0.01;
        let a = p.forward();
        for i in 1..10 {
            assert!((a.get(i, i) + 2.0 / h2).abs() < 1e-9);
            assert!((a.get(i, i - 1) - 1.0 / h2).abs() < 1e-9);
            assert!((a.get(i, i + 1) - 1.0 / h2).abs() < 1e-9);
        }
        // half cells at the boundary: (u1 − u0)/h / (h/2)
        assert!((a.get(0, 0) + 2.0 / h2).abs() < 1e-9);
        assert!((a.get(0, 1) - 2.0 / h2).abs() < 1e-9);
    }

    fn check_structure(p: &Propagator) {
        let k = p.flux_matrix();
        let scale = (0..k.dim()).map(|i| k.get(i, i).abs()).fold(0.0, f64::max);
        let col = k.transpose().row_sums();
        assert!(col.iter().all(|c| c.abs() <= 1e-14 * scale), "column sums");
        let rows = p.backward().row_sums();
        let lscale = (0..k.dim()).map(|i| p.backward().get(i, i).abs()).fold(0.0, f64::max);
        assert!(rows.iter().all(|r| r.abs() <= 1e-14 * lscale), "row sums");

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = k.dim();
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let au = p.forward().matvec(&u);
        let lf = p.backward().matvec(&f);
        let vol = p.volumes();
        let lhs = neumaier_sum((0..n).map(|i| vol[i] * au[i] * f[i]));
        let rhs = neumaier_sum((0..n).map(|i| vol[i] * u[i] * lf[i]));
        let mag = neumaier_sum((0..n).map(|i| vol[i] * (au[i] * f[i]).abs()));
        assert!((lhs - rhs).abs() <= 1e-12 * mag.max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn conservation_and_duality() {
        check_structure(&ou(128));
        check_structure(&rotation(24));
        let m = Model::explicit(2, &["1 + 0.2*x1^2", "0.3", "2"], &["x1 + x2", "sin(x1) + x2"]).unwrap();
        let g = Grid::new(&[-2.0, -2.0], &[2.0, 2.0], &[16, 20]).unwrap();
        check_structure(&assemble(&discretize_model(&m, &g).unwrap()).unwrap());
        let m = Model::gradient(2, &["1", "0.4", "1"], "x1^2/2 + x2^4/4", Some(&["x1", "0"])).unwrap();
        check_structure(&assemble(&discretize_model(&m, &g).unwrap()).unwrap());
    }

    #[test]
    fn ou_steady_state_is_gibbs() {
        let p = ou(256);
        let u = steady_state(&p).unwrap();
        let mu = Measure::from_density(&u).unwrap();
        let gibbs = gibbs_measure(&p.model().potential_field().unwrap()).unwrap();
        let err = mu
            .weights()
            .iter()
            .zip(gibbs.weights())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-10, "{err}");
        assert!(stationarity_residual(&p, &u) < 1e-10);
    }

    #[test]
    fn flat_steady_state_is_uniform() {
        let m = Model::explicit(1, &["1"], &["0"]).unwrap();
        let g = Grid::new(&[0.0], &[1.0], &[64]).unwrap();
        let p = assemble(&discretize_model(&m, &g).unwrap()).unwrap();
        let u = steady_state(&p).unwrap();
        let err = u.values().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn rotation_steady_state_is_gaussian() {
        let p = rotation(48);
        assert_eq!(p.transport(), Transport::StreamFunction);
        let u = steady_state(&p).unwrap();
        let mu = Measure::from_density(&u).unwrap();
        let gibbs = gibbs_measure(&p.model().potential_field().unwrap()).unwrap();
        let err = mu
            .density()
            .values()
            .iter()
            .zip(gibbs.density().values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-10, "{err}");
        assert!(stationarity_residual(&p, &u) < 1e-8);
    }

    #[test]
    fn equilibrium_is_preserved() {
        let p = ou(128);
        let u = steady_state(&p).unwrap();
        let traj = solve_fokker_planck(&p, &u, &SolveOptions::new(0.5, 1e-2, Scheme::ImplicitEuler)).unwrap();
        let err = traj
            .last()
            .values()
            .iter()
            .zip(u.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    fn mean(p: &Propagator, u: &Field) -> f64 {
        let mu = Measure::from_density(u).unwrap();
        let x = Field::from_fn(*p.grid(), |q| q[0]).unwrap();
        mu.integrate(&x).unwrap()
    }

    #[test]
    fn ou_mean_decays_exponentially() {
        let p = ou(512);
        let u0 = gaussian(*p.grid(), 1.0);
        let traj = solve_fokker_planck(&p, &u0, &SolveOptions::new(1.0, 1e-3, Scheme::ImplicitEuler)).unwrap();
        let m = mean(&p, traj.last());
        assert!((m / (-1f64).exp() - 1.0).abs() < 0.02, "{m}");
        assert!(traj.max_relative_mass_drift() <= 1e-12);
        assert!(traj.min_value() >= 0.0);
    }

    #[test]
    fn mean_decay_converges_in_space() {
        let mut errs = Vec::new();
        for cells in [64, 128] {
            let p = ou(cells);
            let u0 = gaussian(*p.grid(), 1.0);
            let traj =
                solve_fokker_planck(&p, &u0, &SolveOptions::new(1.0, 1e-3, Scheme::CrankNicolson)).unwrap();
            let m0 = mean(&p, &u0);
            errs.push((mean(&p, traj.last()) - m0 * (-1f64).exp()).abs());
        }
        let order = (errs[0] / errs[1]).log2();
        assert!(order >= 1.8, "{errs:?} {order}");
    }

    #[test]
    fn semigroup_mehler() {
        let p = ou(512);
        let grid = *p.grid();
        let c = Field::constant(grid, 2.5);
        let pc = semigroup_apply(&p, &c, 1.0, 1e-3).unwrap();
        assert!(pc.values().iter().all(|v| (v - 2.5).abs() < 1e-12));
        let x = Field::from_fn(grid, |q| q[0]).unwrap();
        let x2 = x.map(|v| v * v);
        let out = semigroup_evolve(&p, &[x.clone(), x2.clone()], &[1.0], 1e-3, Scheme::ImplicitEuler).unwrap();
        let e = (-1f64).exp();
        for i in grid.core_nodes() {
            let xi = grid.node(i)[0];
            if xi.abs() > 0.1 {
                assert!((out[0][0][i] / (e * xi) - 1.0).abs() < 0.02);
            }
            let exact = e * e * xi * xi + 1.0 - e * e;
            assert!((out[0][1][i] / exact - 1.0).abs() < 0.02);
        }
        for (f, pf) in [(&x, &out[0][0]), (&x2, &out[0][1])] {
            assert!(pf.min() >= f.min() - 1e-12 && pf.max() <= f.max() + 1e-12);
        }
    }

    #[test]
    fn duality_identity_holds() {
        let p = ou(256);
        let grid = *p.grid();
        let u0 = gaussian(grid, 1.5).map(|v| v * 0.7 + 0.01);
        let m0 = volume_mass(p.volumes(), u0.values());
        let traj = solve_fokker_planck(&p, &u0, &SolveOptions::new(0.5, 1e-3, Scheme::ImplicitEuler)).unwrap();
        let v = p.shifted_potential().unwrap();
        let lifted = Field::new(grid, (0..u0.len()).map(|i| v[i].exp() * u0[i] / m0).collect()).unwrap();
        let pt = semigroup_apply(&p, &lifted, 0.5, 1e-3).unwrap();
        let err = grid
            .core_nodes()
            .into_iter()
            .map(|i| (traj.last()[i] - (-v[i]).exp() * pt[i]).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn ergodic_rate_matches_curvature() {
        let p = ou(512);
        let x = Field::from_fn(*p.grid(), |q| q[0]).unwrap();
        let out = semigroup_evolve(&p, &[x], &[1.0, 2.0], 1e-3, Scheme::CrankNicolson).unwrap();
        let mu = invariant_measure(&p).unwrap();
        let dist = |f: &Field| {
            let m = mu.integrate(f).unwrap();
            f.values().iter().map(|v| (v - m).abs()).fold(0.0, f64::max)
        };
        let rate = (dist(&out[0][0]) / dist(&out[1][0])).ln();
        assert!((rate - 1.0).abs() < 0.05, "{rate}");
    }

    #[test]
    fn crank_nicolson_reports_negative_values() {
        let p = ou(64);
        let mut spike = vec![0.0; p.volumes().len()];
        spike[32] = 1.0;
        let u0 = Field::new(*p.grid(), spike).unwrap();
        let err = solve_fokker_planck(&p, &u0, &SolveOptions::new(0.5, 0.1, Scheme::CrankNicolson)).unwrap_err();
        assert!(matches!(err, PdeError::NegativeDensity { .. }));
        let ok = solve_fokker_planck(&p, &u0, &SolveOptions::new(0.5, 0.1, Scheme::ImplicitEuler)).unwrap();
        assert!(ok.min_value() >= 0.0);
    }

    #[test]
    fn disconnected_chain_is_not_ergodic() {
        // D is ~1e-40 on the left half, so the two halves barely exchange mass
        let m = Model::explicit(1, &["1e-40 + (1 + tanh(200*x1))^4"], &["0"]).unwrap();
        let g = Grid::new(&[-1.0], &[1.0], &[16]).unwrap();
        let p = assemble(&discretize_model(&m, &g).unwrap()).unwrap();
        assert!(matches!(steady_state(&p), Err(PdeError::NonErgodic { .. })));
    }

    #[test]
    fn snapshots_and_plans() {
        assert_eq!(step_plan(1.0, 1e-3).unwrap().0, 1000);
        assert_eq!(step_plan(0.3, 0.1).unwrap().0, 3);
        let (n, dt) = step_plan(1.0, 0.3).unwrap();
        assert_eq!(n, 4);
        assert!((dt - 0.25).abs() < 1e-15);
        let p = ou(32);
        let u0 = gaussian(*p.grid(), 0.0);
        let traj = solve_fokker_planck(&p, &u0, &SolveOptions::new(1.0, 0.1, Scheme::ImplicitEuler).every(0.25)).unwrap();
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(traj.times.first(), Some(&0.0));
        assert!((traj.times.last().unwrap() - 1.0).abs() < 1e-12);
        assert!(semigroup_evolve(&p, &[u0], &[0.15], 0.1, Scheme::ImplicitEuler).is_err());
    }
}
