//! Entropy generators Φ and the Φ-entropy, Beckner and refined functionals.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::model::{Field, Measure, ModelError};

/// Half-width of the band around `p = 1` where the Beckner quotient is
/// replaced by its limit `Ent(g²)`.
pub const BECKNER_LIMIT_BAND: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhiError {
    #[error("exponent p = {p} outside {range}")]
    ExponentOutOfRange { p: f64, range: &'static str },
    #[error("value {value} at node {index} lies outside the interval {interval} of {label}")]
    OutsideInterval {
        index: usize,
        value: f64,
        label: String,
        interval: Interval,
    },
    #[error("function must be positive; found {value} at node {index}")]
    NonPositive { index: usize, value: f64 },
    #[error("argument {0} outside [0, 1]")]
    OutsideUnitInterval(f64),
    #[error("unknown Φ kind `{0}`; expected variance, boltzmann, power-<p> or gauss-isoperimetry")]
    UnknownKind(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "p", rename_all = "kebab-case")]
pub enum PhiKind {
    Power(f64),
    Variance,
    Boltzmann,
    GaussIsoperimetry,
}

impl fmt::Display for PhiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhiKind::Power(p) => write!(f, "power-{p}"),
            PhiKind::Variance => f.write_str("variance"),
            PhiKind::Boltzmann => f.write_str("boltzmann"),
            PhiKind::GaussIsoperimetry => f.write_str("gauss-isoperimetry"),
        }
    }
}

impl FromStr for PhiKind {
    type Err = PhiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "variance" => Ok(PhiKind::Variance),
            "boltzmann" | "entropy" => Ok(PhiKind::Boltzmann),
            "gauss-isoperimetry" | "gauss_isoperimetry" => Ok(PhiKind::GaussIsoperimetry),
            _ => t
                .strip_prefix("power-")
                .or_else(|| t.strip_prefix("power_"))
                .and_then(|p| p.parse::<f64>().ok())
                .map(PhiKind::Power)
                .ok_or_else(|| PhiError::UnknownKind(s.to_string())),
        }
    }
}

/// Interval `I` of admissible values. A closed end means Φ is defined there,
/// possibly by continuity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub lower_closed: bool,
    pub upper_closed: bool,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        let lo = if self.lower_closed { x >= self.lower } else { x > self.lower };
        let hi = if self.upper_closed { x <= self.upper } else { x < self.upper };
        lo && hi
    }

    pub fn contains_interior(&self, x: f64) -> bool {
        x > self.lower && x < self.upper
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}, {}{}",
            if self.lower_closed { '[' } else { ']' },
            self.lower,
            self.upper,
            if self.upper_closed { ']' } else { '[' }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhiFunction {
    pub kind: PhiKind,
    pub label: String,
    pub interval: Interval,
    pub strictly_convex: bool,
    /// `−1/Φ''` is convex on `I`.
    pub inverse_second_convex: bool,
}

pub fn make_phi(kind: PhiKind) -> Result<PhiFunction, PhiError> {
    let positive = Interval {
        lower: 0.0,
        upper: f64::INFINITY,
        lower_closed: true,
        upper_closed: false,
    };
    let interval = match kind {
        PhiKind::Power(p) => {
            if !(1.0..=2.0).contains(&p) {
                return Err(PhiError::ExponentOutOfRange { p, range: "[1, 2]" });
            }
            positive
        }
        PhiKind::Boltzmann => positive,
        PhiKind::Variance => Interval {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            lower_closed: false,
            upper_closed: false,
        },
        PhiKind::GaussIsoperimetry => Interval {
            lower: 0.0,
            upper: 1.0,
            lower_closed: true,
            upper_closed: true,
        },
    };
    Ok(PhiFunction {
        kind,
        label: kind.to_string(),
        interval,
        strictly_convex: true,
        inverse_second_convex: true,
    })
}

impl PhiFunction {
    pub fn value(&self, x: f64) -> f64 {
        match self.kind {
            PhiKind::Power(p) if p == 1.0 => xlnx(x),
            PhiKind::Power(p) => (x.powf(p) - x) / (p * (p - 1.0)),
            PhiKind::Boltzmann => xlnx(x),
            PhiKind::Variance => x * x,
            PhiKind::GaussIsoperimetry => -gauss_u(x),
        }
    }

    pub fn first(&self, x: f64) -> f64 {
        match self.kind {
            PhiKind::Power(p) if p == 1.0 => x.ln() + 1.0,
            PhiKind::Power(p) => (p * x.powf(p - 1.0) - 1.0) / (p * (p - 1.0)),
            PhiKind::Boltzmann => x.ln() + 1.0,
            PhiKind::Variance => 2.0 * x,
            PhiKind::GaussIsoperimetry => normal_quantile(x),
        }
    }

    pub fn second(&self, x: f64) -> f64 {
        match self.kind {
            PhiKind::Power(p) if p == 1.0 => 1.0 / x,
            PhiKind::Power(p) => x.powf(p - 2.0),
            PhiKind::Boltzmann => 1.0 / x,
            PhiKind::Variance => 2.0,
            PhiKind::GaussIsoperimetry => 1.0 / gauss_u(x),
        }
    }

    /// Power exponent, if Φ belongs to the `Φ_p` family (Boltzmann is `p = 1`).
    pub fn power(&self) -> Option<f64> {
        match self.kind {
            PhiKind::Power(p) => Some(p),
            PhiKind::Boltzmann => Some(1.0),
            _ => None,
        }
    }

    /// `p = 2` belongs to the `Φ_p` family but lies outside `]1, 2[`, the range
    /// of the refined local inequalities.
    pub fn outside_refined_range(&self) -> bool {
        matches!(self.kind, PhiKind::Power(p) if p == 2.0)
    }

    /// Checks every node value against `I`.
    pub fn check_range(&self, f: &Field) -> Result<(), PhiError> {
        match f.values().iter().position(|&v| !self.interval.contains(v)) {
            None => Ok(()),
            Some(index) => Err(PhiError::OutsideInterval {
                index,
                value: f[index],
                label: self.label.clone(),
                interval: self.interval,
            }),
        }
    }

    /// Sample points strictly inside `I` used for admissibility checks.
    pub fn sample_points(&self, count: usize) -> Vec<f64> {
        let (a, b) = match self.kind {
            PhiKind::Variance => (-10.0, 10.0),
            PhiKind::GaussIsoperimetry => (0.01, 0.99),
            _ => (0.01, 10.0),
        };
        (0..count)
            .map(|i| a + (b - a) * i as f64 / (count - 1) as f64)
            .collect()
    }
}

fn xlnx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Admissibility {
    pub second_positive: bool,
    pub inverse_second_convex: bool,
    pub min_second: f64,
    pub min_second_difference: f64,
}

/// Sampled check of `Φ'' > 0` and convexity of `−1/Φ''`.
pub fn check_admissible(phi: &PhiFunction, samples: usize) -> Admissibility {
    let xs = phi.sample_points(samples.max(3));
    let psi: Vec<f64> = xs.iter().map(|&x| -1.0 / phi.second(x)).collect();
    let min_second = xs.iter().map(|&x| phi.second(x)).fold(f64::INFINITY, f64::min);
    let mut min_d2 = f64::INFINITY;
    let mut ok = true;
    for i in 1..xs.len() - 1 {
        let d2 = psi[i + 1] - 2.0 * psi[i] + psi[i - 1];
        let scale = psi[i + 1].abs() + 2.0 * psi[i].abs() + psi[i - 1].abs();
        min_d2 = min_d2.min(d2);
        if d2 < -1e-12 * scale {
            ok = false;
        }
    }
    Admissibility {
        second_positive: min_second > 0.0,
        inverse_second_convex: ok,
        min_second,
        min_second_difference: min_d2,
    }
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Inverse of [`normal_cdf`]: Acklam's rational approximation followed by one
/// Newton step on the distribution function.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const P_LOW: f64 = 0.02425;
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // F(x) − p, written through the smaller tail so it stays accurate near p = 1
    let e = if p > 0.5 {
        (1.0 - p) - 0.5 * libm::erfc(x / SQRT_2)
    } else {
        normal_cdf(x) - p
    };
    x - e / normal_pdf(x)
}

fn gauss_u(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        // U is symmetric; evaluating on the lower half keeps the quantile accurate
        let y = normal_quantile(x.min(1.0 - x));
        normal_pdf(y)
    }
}

/// Gaussian isoperimetric profile `U = F' ∘ F⁻¹` on `[0, 1]`.
pub fn gauss_isoperimetry_u(x: f64) -> Result<f64, PhiError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(PhiError::OutsideUnitInterval(x));
    }
    Ok(gauss_u(x))
}

/// Residual `U''(x) + 1/U(x)` with `U''` from central second differences at
/// steps `h` and `2h` combined by Richardson extrapolation. The plain
/// three-point difference carries a truncation error `h² U''''/12`, which
/// reaches about 5e-6 at `x = 0.05` for `h = 1e-4`.
pub fn isoperimetry_ode_residual(x: f64, h: f64) -> Result<f64, PhiError> {
    let u = |t: f64| gauss_isoperimetry_u(t);
    let d2 = |s: f64| -> Result<f64, PhiError> { Ok((u(x + s)? - 2.0 * u(x)? + u(x - s)?) / (s * s)) };
    let extrapolated = (4.0 * d2(h)? - d2(2.0 * h)?) / 3.0;
    Ok(extrapolated + 1.0 / u(x)?)
}

/// `Ent^Φ_μ(f) = μ(Φ(f)) − Φ(μ(f))`.
pub fn phi_entropy(mu: &Measure, phi: &PhiFunction, f: &Field) -> Result<f64, PhiError> {
    if f.grid() != mu.grid() {
        return Err(ModelError::GridMismatch.into());
    }
    phi.check_range(f)?;
    let mean = mu.integrate_values(f.values());
    let phis: Vec<f64> = f.values().iter().map(|&v| phi.value(v)).collect();
    Ok(mu.integrate_values(&phis) - phi.value(mean))
}

fn check_positive(mu: &Measure, g: &Field) -> Result<(), PhiError> {
    if g.grid() != mu.grid() {
        return Err(ModelError::GridMismatch.into());
    }
    match g.values().iter().position(|&v| !(v > 0.0)) {
        None => Ok(()),
        Some(index) => Err(PhiError::NonPositive {
            index,
            value: g[index],
        }),
    }
}

fn moment(mu: &Measure, g: &Field, e: f64) -> f64 {
    let v: Vec<f64> = g.values().iter().map(|x| x.powf(e)).collect();
    mu.integrate_values(&v)
}

/// `Var_μ(g) = μ(g²) − μ(g)²`.
pub fn variance(mu: &Measure, g: &Field) -> Result<f64, PhiError> {
    if g.grid() != mu.grid() {
        return Err(ModelError::GridMismatch.into());
    }
    let sq: Vec<f64> = g.values().iter().map(|x| x * x).collect();
    let m = mu.integrate_values(g.values());
    Ok(mu.integrate_values(&sq) - m * m)
}

/// `Ent_μ(g²) = μ(g² ln g²) − μ(g²) ln μ(g²)`.
pub fn entropy_of_square(mu: &Measure, g: &Field) -> Result<f64, PhiError> {
    check_positive(mu, g)?;
    let sq: Vec<f64> = g.values().iter().map(|x| x * x).collect();
    let xl: Vec<f64> = sq.iter().map(|&x| xlnx(x)).collect();
    let a = mu.integrate_values(&sq);
    Ok(mu.integrate_values(&xl) - xlnx(a))
}

/// `r = ln μ(g²) − p ln μ(g^{2/p})`, nonnegative by Jensen for `p ≥ 1`.
fn log_gap(mu: &Measure, g: &Field, p: f64) -> (f64, f64) {
    let a = moment(mu, g, 2.0);
    let b = moment(mu, g, 2.0 / p);
    (a, a.ln() - p * b.ln())
}

/// The Beckner quotient `(μ(g²) − μ(g^{2/p})^p)/(p − 1)` evaluated directly,
/// without the limit switch near `p = 1`.
pub fn beckner_quotient(mu: &Measure, g: &Field, p: f64) -> Result<f64, PhiError> {
    check_positive(mu, g)?;
    if !(p > 0.0) || p == 1.0 || !p.is_finite() {
        return Err(PhiError::ExponentOutOfRange {
            p,
            range: "]0, ∞[ \\ {1}",
        });
    }
    if p == 2.0 {
        return variance(mu, g);
    }
    let (a, r) = log_gap(mu, g, p);
    Ok(-a * (-r).exp_m1() / (p - 1.0))
}

/// Beckner functional; returns `Ent_μ(g²)` when `|p − 1| < BECKNER_LIMIT_BAND`.
pub fn beckner_functional(mu: &Measure, g: &Field, p: f64) -> Result<f64, PhiError> {
    if (p - 1.0).abs() < BECKNER_LIMIT_BAND {
        return entropy_of_square(mu, g);
    }
    beckner_quotient(mu, g, p)
}

/// Refined functional
/// `p/(2(p−1)²) [μ(g²) − μ(g^{2/p})^p (μ(g²)/μ(g^{2/p})^p)^{2/p−1}]`,
/// equal to `Var_μ(g)` at `p = 2`.
pub fn refined_functional(mu: &Measure, g: &Field, p: f64) -> Result<f64, PhiError> {
    check_positive(mu, g)?;
    if !(p > 1.0 && p <= 2.0) {
        return Err(PhiError::ExponentOutOfRange { p, range: "]1, 2]" });
    }
    if p == 2.0 {
        return variance(mu, g);
    }
    let (a, r) = log_gap(mu, g, p);
    let s = 2.0 - 2.0 / p;
    Ok(-p * a * (-s * r).exp_m1() / (2.0 * (p - 1.0) * (p - 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub p: f64,
    pub beckner: f64,
    /// `None` outside `]1, 2]`.
    pub refined: Option<f64>,
}

pub fn p_sweep(mu: &Measure, g: &Field, ps: &[f64]) -> Result<Vec<SweepRow>, PhiError> {
    ps.iter()
        .map(|&p| {
            let refined = if p > 1.0 && p <= 2.0 {
                Some(refined_functional(mu, g, p)?)
            } else {
                None
            };
            Ok(SweepRow {
                p,
                beckner: beckner_functional(mu, g, p)?,
                refined,
            })
        })
        .collect()
}

/// Whether `values` never increase by more than `rel_slack · |previous|`.
pub fn is_nonincreasing(values: &[f64], rel_slack: f64) -> bool {
    values
        .windows(2)
        .all(|w| w[1] <= w[0] + rel_slack * w[0].abs().max(w[1].abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Grid;

    /// Two-node grid analogue: a 1D grid whose measure puts mass 1/2 on each
    /// of two nodes and zero elsewhere is not expressible with trapezoid
    /// weights, so build it from a density supported on the end nodes.
    fn two_point(values: (f64, f64)) -> (Measure, Field) {
        let grid = Grid::new(&[0.0], &[1.0], &[8]).unwrap();
        let mut dens = vec![0.0; 9];
        dens[0] = 1.0;
        dens[8] = 1.0;
        let mu = Measure::from_density(&Field::new(grid, dens).unwrap()).unwrap();
        let mut f = vec![values.0; 9];
        f[8] = values.1;
        (mu, Field::new(grid, f).unwrap())
    }

    #[test]
    fn power_examples() {
        let phi = make_phi(PhiKind::Power(1.5)).unwrap();
        assert!((phi.value(4.0) - 16.0 / 3.0).abs() < 1e-14);
        assert_eq!(phi.value(1.0), 0.0);
        let b = make_phi(PhiKind::Boltzmann).unwrap();
        assert_eq!(b.value(1.0), 0.0);
        assert!((b.second(4.0) - 0.25).abs() < 1e-15);
        assert_eq!(b.value(0.0), 0.0);
        assert_eq!(phi.value(0.0), 0.0);
        assert!(make_phi(PhiKind::Power(2.5)).is_err());
        assert!(make_phi(PhiKind::Power(0.9)).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for kind in [
            PhiKind::Power(1.3),
            PhiKind::Power(2.0),
            PhiKind::Boltzmann,
            PhiKind::Variance,
            PhiKind::GaussIsoperimetry,
        ] {
            let phi = make_phi(kind).unwrap();
            for x in [0.2, 0.45, 0.7] {
                let h = 1e-5;
                let d1 = (phi.value(x + h) - phi.value(x - h)) / (2.0 * h);
                let d2 = (phi.first(x + h) - phi.first(x - h)) / (2.0 * h);
                assert!((d1 - phi.first(x)).abs() < 1e-8, "{kind} {x}");
                assert!((d2 - phi.second(x)).abs() < 1e-6 * phi.second(x).abs(), "{kind} {x}");
            }
        }
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("power-1.5".parse::<PhiKind>().unwrap(), PhiKind::Power(1.5));
        assert_eq!("variance".parse::<PhiKind>().unwrap(), PhiKind::Variance);
        assert_eq!(
            "gauss-isoperimetry".parse::<PhiKind>().unwrap(),
            PhiKind::GaussIsoperimetry
        );
        assert!("cubic".parse::<PhiKind>().is_err());
        let k = PhiKind::Power(1.7);
        assert_eq!(k.to_string().parse::<PhiKind>().unwrap(), k);
    }

    #[test]
    fn isoperimetric_profile() {
        let u = gauss_isoperimetry_u(0.5).unwrap();
        assert!((u - 0.398_942_280_401_432_7).abs() < 1e-12);
        assert_eq!(gauss_isoperimetry_u(0.0).unwrap(), 0.0);
        assert_eq!(gauss_isoperimetry_u(1.0).unwrap(), 0.0);
        assert!(gauss_isoperimetry_u(1.5).is_err());
        for i in 1..100 {
            let x = i as f64 / 100.0;
            let a = gauss_isoperimetry_u(x).unwrap();
            let b = gauss_isoperimetry_u(1.0 - x).unwrap();
            assert!((a - b).abs() <= 1e-15, "{x}: {a} vs {b}");
        }
    }

    #[test]
    fn isoperimetric_ode() {
        let mut worst: f64 = 0.0;
        for i in 0..=900 {
            let x = 0.05 + i as f64 * 1e-3;
            worst = worst.max(isoperimetry_ode_residual(x, 1e-4).unwrap().abs());
        }
        assert!(worst <= 1e-6, "{worst}");
        // the plain difference is limited by its own truncation error h²U''''/12
        let x: f64 = 0.05;
        let u = |t: f64| gauss_isoperimetry_u(t).unwrap();
        let h = 1e-4;
        let plain = (u(x + h) - 2.0 * u(x) + u(x - h)) / (h * h) + 1.0 / u(x);
        let y = normal_quantile(x);
        let u4 = -(1.0 + 2.0 * y * y) / u(x).powi(3);
        assert!((plain - h * h * u4 / 12.0).abs() < 2e-7, "{plain}");
    }

    #[test]
    fn quantile_inverts_cdf() {
        for p in [1e-12, 1e-6, 0.01, 0.02425, 0.3, 0.5, 0.77, 0.99, 1.0 - 1e-9] {
            let x = normal_quantile(p);
            let back = normal_cdf(x);
            assert!((back - p).abs() <= 1e-15 + 1e-13 * p, "{p}: {back}");
        }
        assert_eq!(normal_quantile(0.5), 0.0);
    }

    #[test]
    fn entropy_examples() {
        let (mu, f) = two_point((0.0, 2.0));
        let var = make_phi(PhiKind::Variance).unwrap();
        assert!((phi_entropy(&mu, &var, &f).unwrap() - 1.0).abs() < 1e-14);
        let (mu, f) = two_point((1.0, 3.0));
        let b = make_phi(PhiKind::Boltzmann).unwrap();
        let expected = 1.5 * 3f64.ln() - 2.0 * 2f64.ln();
        assert!((phi_entropy(&mu, &b, &f).unwrap() - expected).abs() < 1e-14);
        assert!((expected - 0.2616).abs() < 1e-4);
        let c = Field::constant(*mu.grid(), 0.7);
        assert!(phi_entropy(&mu, &b, &c).unwrap().abs() < 1e-15);
        let neg = Field::constant(*mu.grid(), -0.7);
        assert!(matches!(
            phi_entropy(&mu, &b, &neg),
            Err(PhiError::OutsideInterval { .. })
        ));
    }

    #[test]
    fn beckner_and_refined_examples() {
        let (mu, g) = two_point((1.0, 2.0));
        let p = 1.5;
        let a = 2.5;
        let b = (1.0 + 2f64.powf(4.0 / 3.0)) / 2.0;
        let beck = (a - b.powf(p)) / (p - 1.0);
        assert!((beckner_functional(&mu, &g, p).unwrap() - beck).abs() < 1e-13);
        let bp = b.powf(p);
        let refd = p / (2.0 * (p - 1.0) * (p - 1.0)) * (a - bp * (a / bp).powf(2.0 / p - 1.0));
        let got = refined_functional(&mu, &g, p).unwrap();
        assert!((got - refd).abs() < 1e-13, "{got} vs {refd}");
        assert!(got >= beck);

        let v = variance(&mu, &g).unwrap();
        assert_eq!(refined_functional(&mu, &g, 2.0).unwrap(), v);
        assert_eq!(beckner_functional(&mu, &g, 2.0).unwrap(), v);
        assert!((v - 0.25).abs() < 1e-15);
        assert_eq!(
            beckner_functional(&mu, &g, 1.0).unwrap(),
            entropy_of_square(&mu, &g).unwrap()
        );
        let c = Field::constant(*mu.grid(), 1.3);
        assert!(refined_functional(&mu, &c, 1.5).unwrap().abs() < 1e-15);
        assert!(refined_functional(&mu, &g, 2.5).is_err());
    }

    #[test]
    fn admissibility_of_builtins() {
        for kind in [
            PhiKind::Power(1.0),
            PhiKind::Power(1.5),
            PhiKind::Power(2.0),
            PhiKind::Boltzmann,
            PhiKind::Variance,
            PhiKind::GaussIsoperimetry,
        ] {
            let a = check_admissible(&make_phi(kind).unwrap(), 401);
            assert!(a.second_positive && a.inverse_second_convex, "{kind}: {a:?}");
        }
    }

    #[test]
    fn monotonicity_helper() {
        assert!(is_nonincreasing(&[3.0, 2.0, 2.0, 1.0], 0.0));
        assert!(!is_nonincreasing(&[1.0, 1.1], 1e-10));
        assert!(is_nonincreasing(&[1.0, 1.0 + 1e-12], 1e-10));
    }
}
