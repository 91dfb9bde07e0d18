//! Φ-entropy inequalities, decay estimates and identities evaluated on
//! concrete models.
//!
//! Every check produces a [`CheckResult`] with `margin = rhs − lhs`; the check
//! passes when `margin ≥ −tolerance`. Identities are reported as a relative
//! discrepancy in `lhs` against `rhs = 0`. Pointwise (local) inequalities are
//! evaluated on the core of the box (central half of every axis) and report
//! the node with the worst margin.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::{discretize_model, Field, Grid, Measure, Model, ModelError};
use crate::numeric::least_squares_slope;
use crate::operators::{
    cd_rho_constant_d, cd_rho_sampled, default_test_fields, gamma_sq, integral_criterion_check,
    OperatorError,
};
use crate::pde::{
    assemble, invariant_measure, semigroup_evolve, solve_fokker_planck, step_plan, PdeError,
    Propagator, Scheme, SolveOptions, Stepper,
};
use crate::phi::{
    beckner_functional, make_phi, phi_entropy, refined_functional, PhiError, PhiFunction, PhiKind,
};

/// Tolerance on margins of inequality and decay checks.
pub const INEQUALITY_TOL: f64 = 1e-6;
/// Tolerance on the relative discrepancy of derivative identities.
pub const IDENTITY_TOL: f64 = 1e-3;
/// Tolerance on the duality residual.
pub const DUALITY_TOL: f64 = 1e-10;
/// Relative excess over the bound that flags a decay report.
pub const DECAY_VIOLATION_TOL: f64 = 1e-9;
/// Entropy values below this are treated as zero in fits.
pub const ENTROPY_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("check {check} needs {what}")]
    Missing { check: CheckId, what: &'static str },
    #[error("check {check} does not apply: {reason}")]
    NotApplicable { check: CheckId, reason: String },
    #[error("unknown check id `{0}`")]
    UnknownCheck(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Phi(#[from] PhiError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CheckId {
    GlobalPhi,
    Beckner,
    EntropyProduction,
    ExpDecay,
    RefinedLocal,
    RefinedReverse,
    RefinedGlobal,
    BecknerVsRefined,
    IntegralCriterion,
    IsoLocal,
    IsoReverse,
    IsoGlobal,
    IsoSharper,
    RhoZeroRate,
    FpDecay,
    FpDissipation,
    Duality,
}

impl CheckId {
    pub const ALL: [CheckId; 17] = [
        CheckId::GlobalPhi,
        CheckId::Beckner,
        CheckId::EntropyProduction,
        CheckId::ExpDecay,
        CheckId::RefinedLocal,
        CheckId::RefinedReverse,
        CheckId::RefinedGlobal,
        CheckId::BecknerVsRefined,
        CheckId::IntegralCriterion,
        CheckId::IsoLocal,
        CheckId::IsoReverse,
        CheckId::IsoGlobal,
        CheckId::IsoSharper,
        CheckId::RhoZeroRate,
        CheckId::FpDecay,
        CheckId::FpDissipation,
        CheckId::Duality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckId::GlobalPhi => "GLOBAL_PHI",
            CheckId::Beckner => "BECKNER",
            CheckId::EntropyProduction => "ENTROPY_PRODUCTION",
            CheckId::ExpDecay => "EXP_DECAY",
            CheckId::RefinedLocal => "REFINED_LOCAL",
            CheckId::RefinedReverse => "REFINED_REVERSE",
            CheckId::RefinedGlobal => "REFINED_GLOBAL",
            CheckId::BecknerVsRefined => "BECKNER_VS_REFINED",
            CheckId::IntegralCriterion => "INTEGRAL_CRITERION",
            CheckId::IsoLocal => "ISO_LOCAL",
            CheckId::IsoReverse => "ISO_REVERSE",
            CheckId::IsoGlobal => "ISO_GLOBAL",
            CheckId::IsoSharper => "ISO_SHARPER",
            CheckId::RhoZeroRate => "RHO_ZERO_RATE",
            CheckId::FpDecay => "FP_DECAY",
            CheckId::FpDissipation => "FP_DISSIPATION",
            CheckId::Duality => "DUALITY",
        }
    }

    /// The inequality or identity being evaluated, as `lhs ≤ rhs`.
    pub fn statement(self) -> &'static str {
        match self {
            CheckId::GlobalPhi => "Ent_μ^Φ(f) ≤ (1/(2ρ)) μ(Φ''(f) Γ(f))",
            CheckId::Beckner => "(μ(g²) − μ(g^{2/p})^p)/(p−1) ≤ (2/(pρ)) μ(Γ(g))",
            CheckId::EntropyProduction => {
                "d/dt Ent_μ^Φ(P_t f) = −μ(Φ''(P_t f) Γ(P_t f)); lhs = relative discrepancy"
            }
            CheckId::ExpDecay => "Ent_μ^Φ(P_t f) ≤ e^{−t/C} Ent_μ^Φ(f)",
            CheckId::RefinedLocal => {
                "(P_t(f^p) − (P_t f)^p (P_t(f^p)/(P_t f)^p)^{2/p−1})/(p−1)² ≤ ((1−e^{−2ρt})/ρ) P_t(f^{p−2} Γ(f))"
            }
            CheckId::RefinedReverse => {
                "((e^{2ρt}−1)/ρ) ((P_t f)^p/P_t(f^p))^{2/p−1} (P_t f)^{p−2} Γ(P_t f) ≤ (P_t(f^p) − (P_t f)^p (P_t(f^p)/(P_t f)^p)^{2/p−1})/(p−1)²"
            }
            CheckId::RefinedGlobal => {
                "(p²/(p−1)²)(μ(g²) − μ(g^{2/p})^p (μ(g²)/μ(g^{2/p})^p)^{2/p−1}) ≤ (4/ρ) μ(Γ(g))"
            }
            CheckId::BecknerVsRefined => {
                "(μ(g²) − μ(g^{2/p})^p)/(p−1) ≤ (p/(2(p−1)²))(μ(g²) − μ(g^{2/p})^p (μ(g²)/μ(g^{2/p})^p)^{2/p−1})"
            }
            CheckId::IntegralCriterion => {
                "ρ μ(g^{(2−p)/(p−1)} Γ(g)) ≤ μ(g^{(2−p)/(p−1)} Γ₂(g))"
            }
            CheckId::IsoLocal => {
                "Ent_{P_t}^Φ(f) ≤ (1/Φ''(P_t f)) log(1 + ((1−e^{−2ρt})/(2ρ)) Φ''(P_t f) P_t(Φ''(f) Γ(f))), Φ = −U"
            }
            CheckId::IsoReverse => {
                "(1/Φ''(P_t f)) log(1 + ((e^{2ρt}−1)/(2ρ)) Φ''(P_t f)² Γ(P_t f)) ≤ Ent_{P_t}^Φ(f), Φ = −U"
            }
            CheckId::IsoGlobal => {
                "Ent_μ^Φ(f) ≤ (1/Φ''(μ(f))) log(1 + (Φ''(μ(f))/(2ρ)) μ(Φ''(f) Γ(f))), Φ = −U"
            }
            CheckId::IsoSharper => {
                "(1/Φ''(μ(f))) log(1 + (Φ''(μ(f))/(2ρ)) μ(Φ''(f) Γ(f))) ≤ (1/(2ρ)) μ(Φ''(f) Γ(f)), Φ = −U"
            }
            CheckId::RhoZeroRate => {
                "|H'(t)| ≤ |H'(0)|/(1 + αt), H(t) = Ent_μ^{Φ_p}(P_t f), α = ((2−p)/p)|H'(0)|/H(0)"
            }
            CheckId::FpDecay => "Ent_μ^Φ(u_t/u_∞) ≤ e^{−t/C} Ent_μ^Φ(u_0/u_∞)",
            CheckId::FpDissipation => {
                "d/dt Ent_μ^Φ(u_t/u_∞) = −∫ Φ''(u_t/u_∞) Γ(u_t/u_∞) dμ; lhs = relative discrepancy"
            }
            CheckId::Duality => "max |u_t − e^{−V} P_t(e^V u_0)| over the core; lhs = residual",
        }
    }

    pub fn is_local(self) -> bool {
        matches!(
            self,
            CheckId::RefinedLocal | CheckId::RefinedReverse | CheckId::IsoLocal | CheckId::IsoReverse
        )
    }

    pub fn default_tolerance(self) -> f64 {
        match self {
            CheckId::EntropyProduction | CheckId::FpDissipation => IDENTITY_TOL,
            CheckId::Duality => DUALITY_TOL,
            _ => INEQUALITY_TOL,
        }
    }
}

impl fmt::Display for CheckId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckId {
    type Err = VerifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_uppercase().replace('-', "_");
        CheckId::ALL
            .iter()
            .copied()
            .find(|c| c.name() == t)
            .ok_or_else(|| VerifyError::UnknownCheck(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckContext {
    pub model: String,
    pub grid: Grid,
    pub rho: f64,
    pub phi: Option<String>,
    pub p: Option<f64>,
    pub t: Option<f64>,
    pub function: Option<String>,
    pub dt: f64,
    pub scheme: Scheme,
    /// Node of the worst margin, for pointwise checks.
    pub node: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub id: CheckId,
    pub statement: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub context: CheckContext,
    pub notes: Vec<String>,
}

impl CheckResult {
    fn new(id: CheckId, lhs: f64, rhs: f64, tolerance: f64, context: CheckContext) -> Self {
        let margin = rhs - lhs;
        CheckResult {
            id,
            statement: id.statement(),
            lhs,
            rhs,
            margin,
            tolerance,
            pass: margin >= -tolerance,
            context,
            notes: Vec::new(),
        }
    }

    fn note(mut self, s: impl Into<String>) -> Self {
        self.notes.push(s.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RhoSource {
    ConstantD,
    Sampled,
    Supplied,
}

/// Everything the checks share: the assembled operators, the invariant
/// measure and the curvature constant.
#[derive(Debug, Clone)]
pub struct Lab {
    pub label: String,
    pub prop: Propagator,
    pub mu: Measure,
    pub rho: f64,
    pub rho_source: RhoSource,
    /// Time step for all evolutions.
    pub dt: f64,
    /// Scheme for the backward semigroup and derivative identities.
    pub scheme: Scheme,
    /// Scheme for forward decay runs.
    pub fp_scheme: Scheme,
}

impl Lab {
    pub fn new(label: impl Into<String>, model: &Model, grid: &Grid) -> Result<Lab, VerifyError> {
        let dm = discretize_model(model, grid)?;
        let (rho, rho_source) = if dm.constant_diffusion {
            (cd_rho_constant_d(model, grid)?.rho, RhoSource::ConstantD)
        } else {
            (cd_rho_sampled(&dm, &default_test_fields(grid))?.rho, RhoSource::Sampled)
        };
        let prop = assemble(&dm)?;
        let mu = invariant_measure(&prop)?;
        Ok(Lab {
            label: label.into(),
            prop,
            mu,
            rho,
            rho_source,
            dt: 1e-3,
            scheme: Scheme::CrankNicolson,
            fp_scheme: Scheme::ImplicitEuler,
        })
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self.rho_source = RhoSource::Supplied;
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn grid(&self) -> &Grid {
        self.prop.grid()
    }

    fn context(&self) -> CheckContext {
        CheckContext {
            model: self.label.clone(),
            grid: *self.grid(),
            rho: self.rho,
            phi: None,
            p: None,
            t: None,
            function: None,
            dt: self.dt,
            scheme: self.scheme,
            node: None,
        }
    }

    /// `u_∞ · (0.6 + 0.4 tanh(2 (x1 − c1)/w1))`, a smooth non-equilibrium density.
    pub fn default_initial_density(&self) -> Field {
        let g = *self.grid();
        let c = 0.5 * (g.lower[0] + g.upper[0]);
        let w = 0.5 * (g.upper[0] - g.lower[0]);
        let dens = self.mu.density();
        Field::from_vec(
            g,
            (0..g.node_count())
                .map(|i| dens[i] * (0.6 + 0.4 * (2.0 * (g.node(i)[0] - c) / w).tanh()))
                .collect(),
        )
    }

    /// `μ(Φ''(f) Γ(f))`.
    pub fn dissipation(&self, phi: &PhiFunction, f: &Field) -> Result<f64, VerifyError> {
        let g = gamma_sq(self.prop.model(), f)?;
        let v: Vec<f64> = (0..f.len()).map(|i| phi.second(f[i]) * g[i]).collect();
        Ok(self.mu.integrate_values(&v))
    }
}

/// Ingredients for a single check; unused ones are ignored.
#[derive(Debug, Clone, Default)]
pub struct CheckInput {
    pub phi: Option<PhiFunction>,
    pub p: Option<f64>,
    pub f: Option<Field>,
    pub function_label: Option<String>,
    pub t: Option<f64>,
    /// Sample times for decay checks.
    pub times: Vec<f64>,
    pub u0: Option<Field>,
    /// Φ-entropy constant; defaults to `1/(2ρ)`.
    pub c: Option<f64>,
}

impl CheckInput {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn phi(mut self, phi: PhiFunction) -> Self {
        self.phi = Some(phi);
        self
    }

    pub fn p(mut self, p: f64) -> Self {
        self.p = Some(p);
        self
    }

    pub fn f(mut self, f: Field, label: impl Into<String>) -> Self {
        self.f = Some(f);
        self.function_label = Some(label.into());
        self
    }

    pub fn t(mut self, t: f64) -> Self {
        self.t = Some(t);
        self
    }

    pub fn times(mut self, times: Vec<f64>) -> Self {
        self.times = times;
        self
    }

    pub fn u0(mut self, u0: Field) -> Self {
        self.u0 = Some(u0);
        self
    }

    pub fn c(mut self, c: f64) -> Self {
        self.c = Some(c);
        self
    }
}

fn need<'a, T>(v: &'a Option<T>, check: CheckId, what: &'static str) -> Result<&'a T, VerifyError> {
    v.as_ref().ok_or(VerifyError::Missing { check, what })
}

fn need_positive_rho(lab: &Lab, check: CheckId) -> Result<f64, VerifyError> {
    if lab.rho > 0.0 {
        Ok(lab.rho)
    } else {
        Err(VerifyError::NotApplicable {
            check,
            reason: format!("needs ρ > 0, have ρ = {}", lab.rho),
        })
    }
}

fn need_power(input: &CheckInput, check: CheckId, open: bool) -> Result<f64, VerifyError> {
    let p = input
        .p
        .or_else(|| input.phi.as_ref().and_then(|f| f.power()))
        .ok_or(VerifyError::Missing { check, what: "an exponent p" })?;
    let ok = if open { p > 1.0 && p < 2.0 } else { p > 1.0 && p <= 2.0 };
    if ok {
        Ok(p)
    } else {
        Err(PhiError::ExponentOutOfRange {
            p,
            range: if open { "]1, 2[" } else { "]1, 2]" },
        }
        .into())
    }
}

fn check_positive(f: &Field) -> Result<(), VerifyError> {
    match f.values().iter().position(|&v| !(v > 0.0)) {
        None => Ok(()),
        Some(index) => Err(PhiError::NonPositive {
            index,
            value: f[index],
        }
        .into()),
    }
}

fn iso_phi() -> PhiFunction {
    make_phi(PhiKind::GaussIsoperimetry).expect("built-in")
}

/// `(1 − e^{−2ρt})/ρ`, or `2t` when `ρ = 0`.
pub fn local_coefficient(rho: f64, t: f64) -> f64 {
    if rho.abs() < 1e-14 {
        2.0 * t
    } else {
        -(-2.0 * rho * t).exp_m1() / rho
    }
}

/// `(e^{2ρt} − 1)/ρ`, or `2t` when `ρ = 0`.
pub fn reverse_coefficient(rho: f64, t: f64) -> f64 {
    if rho.abs() < 1e-14 {
        2.0 * t
    } else {
        (2.0 * rho * t).exp_m1() / rho
    }
}

/// Which local inequality and its parameter.
#[derive(Debug, Clone)]
enum LocalKind {
    Refined { p: f64, reverse: bool },
    Iso { reverse: bool },
}

impl LocalKind {
    fn from_check(id: CheckId, input: &CheckInput) -> Result<LocalKind, VerifyError> {
        match id {
            CheckId::RefinedLocal | CheckId::RefinedReverse => Ok(LocalKind::Refined {
                p: need_power(input, id, false)?,
                reverse: id == CheckId::RefinedReverse,
            }),
            CheckId::IsoLocal | CheckId::IsoReverse => Ok(LocalKind::Iso {
                reverse: id == CheckId::IsoReverse,
            }),
            _ => Err(VerifyError::NotApplicable {
                check: id,
                reason: "not a local inequality".into(),
            }),
        }
    }

    /// Functions that must be carried by the semigroup.
    fn seeds(&self, lab: &Lab, f: &Field) -> Result<Vec<Field>, VerifyError> {
        let g = gamma_sq(lab.prop.model(), f)?;
        match *self {
            LocalKind::Refined { p, .. } => {
                check_positive(f)?;
                Ok(vec![
                    f.map(|v| v.powf(p)),
                    f.clone(),
                    f.zip_map(&g, |v, gv| v.powf(p - 2.0) * gv)?,
                ])
            }
            LocalKind::Iso { .. } => {
                let phi = iso_phi();
                phi.check_range(f)?;
                Ok(vec![
                    f.map(|v| phi.value(v)),
                    f.clone(),
                    f.zip_map(&g, |v, gv| phi.second(v) * gv)?,
                ])
            }
        }
    }

    /// Per-node `(lhs, rhs)` on the core from the evolved seeds.
    fn sides(&self, lab: &Lab, t: f64, evolved: &[Field]) -> Result<Vec<(usize, f64, f64)>, VerifyError> {
        let grid = lab.grid();
        let rho = lab.rho;
        let core = grid.core_nodes();
        let a = &evolved[0];
        let b = &evolved[1];
        let c = &evolved[2];
        match *self {
            LocalKind::Refined { p, reverse } => {
                let gpt = if reverse { Some(gamma_sq(lab.prop.model(), b)?) } else { None };
                let s = 2.0 - 2.0 / p;
                Ok(core
                    .into_iter()
                    .map(|i| {
                        let r = a[i].ln() - p * b[i].ln();
                        let bracket = -a[i] * (-s * r).exp_m1() / ((p - 1.0) * (p - 1.0));
                        if let Some(g) = &gpt {
                            let lhs = reverse_coefficient(rho, t)
                                * (-(2.0 / p - 1.0) * r).exp()
                                * b[i].powf(p - 2.0)
                                * g[i];
                            (i, lhs, bracket)
                        } else {
                            (i, bracket, local_coefficient(rho, t) * c[i])
                        }
                    })
                    .collect())
            }
            LocalKind::Iso { reverse } => {
                let phi = iso_phi();
                let gpt = if reverse { Some(gamma_sq(lab.prop.model(), b)?) } else { None };
                Ok(core
                    .into_iter()
                    .map(|i| {
                        let ent = a[i] - phi.value(b[i]);
                        let s = phi.second(b[i]);
                        if let Some(g) = &gpt {
                            let lhs = (0.5 * reverse_coefficient(rho, t) * s * s * g[i]).ln_1p() / s;
                            (i, lhs, ent)
                        } else {
                            let rhs = (0.5 * local_coefficient(rho, t) * s * c[i]).ln_1p() / s;
                            (i, ent, rhs)
                        }
                    })
                    .collect())
            }
        }
    }
}

fn worst(sides: &[(usize, f64, f64)]) -> (usize, f64, f64) {
    *sides
        .iter()
        .min_by(|x, y| (x.2 - x.1).total_cmp(&(y.2 - y.1)))
        .expect("core is non-empty")
}

/// `H(t) = Ent_μ^Φ(P_t f)` at every step up to `t_end`, with the step used.
fn semigroup_entropy_series(
    lab: &Lab,
    phi: &PhiFunction,
    f: &Field,
    t_end: f64,
    scheme: Scheme,
) -> Result<(f64, Vec<f64>, Vec<Field>), VerifyError> {
    let (n, dt) = step_plan(t_end, lab.dt)?;
    let stepper = Stepper::backward(&lab.prop, dt, scheme)?;
    let mut v = f.values().to_vec();
    let mut hs = Vec::with_capacity(n + 1);
    let mut fields = Vec::with_capacity(n + 1);
    for k in 0..=n {
        if k > 0 {
            stepper.step(&mut v);
        }
        let field = Field::new(*lab.grid(), v.clone())?;
        hs.push(phi_entropy(&lab.mu, phi, &field)?);
        fields.push(field);
    }
    Ok((dt, hs, fields))
}

/// Ratio `u/u_∞`; nodes where `u_∞` vanishes carry weight zero and get 1.
fn relative_density(u: &Field, u_inf: &Field) -> Field {
    Field::from_vec(
        *u.grid(),
        (0..u.len())
            .map(|i| if u_inf[i] > 0.0 { u[i] / u_inf[i] } else { 1.0 })
            .collect(),
    )
}

fn default_decay_times(t: Option<f64>) -> Vec<f64> {
    let t_end = t.unwrap_or(1.0);
    (1..=10).map(|k| t_end * k as f64 / 10.0).collect()
}

/// Evaluates one check.
pub fn run_check(lab: &Lab, id: CheckId, input: &CheckInput) -> Result<CheckResult, VerifyError> {
    let mut ctx = lab.context();
    ctx.phi = input.phi.as_ref().map(|p| p.label.clone());
    ctx.p = input.p;
    ctx.t = input.t;
    ctx.function = input.function_label.clone();
    let tol = id.default_tolerance();
    let mu = &lab.mu;
    let dm = lab.prop.model();
    match id {
        CheckId::GlobalPhi => {
            let rho = need_positive_rho(lab, id)?;
            let phi = need(&input.phi, id, "Φ")?;
            let f = need(&input.f, id, "a test function")?;
            let lhs = phi_entropy(mu, phi, f)?;
            let rhs = lab.dissipation(phi, f)? / (2.0 * rho);
            Ok(CheckResult::new(id, lhs, rhs, tol, ctx))
        }
        CheckId::Beckner => {
            let rho = need_positive_rho(lab, id)?;
            let p = need_power(input, id, false)?;
            ctx.p = Some(p);
            let g = need(&input.f, id, "a test function")?;
            let lhs = beckner_functional(mu, g, p)?;
            let rhs = 2.0 / (p * rho) * mu.integrate(&gamma_sq(dm, g)?)?;
            Ok(CheckResult::new(id, lhs, rhs, tol, ctx))
        }
        CheckId::RefinedGlobal => {
            let rho = need_positive_rho(lab, id)?;
            let p = need_power(input, id, false)?;
            ctx.p = Some(p);
            let g = need(&input.f, id, "a test function")?;
            let lhs = 2.0 * p * refined_functional(mu, g, p)?;
            let rhs = 4.0 / rho * mu.integrate(&gamma_sq(dm, g)?)?;
            let r = CheckResult::new(id, lhs, rhs, tol, ctx);
            Ok(if p == 2.0 { r.note(P2_NOTE) } else { r })
        }
        CheckId::BecknerVsRefined => {
            let p = need_power(input, id, false)?;
            ctx.p = Some(p);
            let g = need(&input.f, id, "a test function")?;
            let lhs = beckner_functional(mu, g, p)?;
            let rhs = refined_functional(mu, g, p)?;
            Ok(CheckResult::new(id, lhs, rhs, tol, ctx))
        }
        CheckId::IntegralCriterion => {
            let p = need_power(input, id, true)?;
            ctx.p = Some(p);
            let g = need(&input.f, id, "a test function")?;
            let margin = integral_criterion_check(dm, mu, g, p, lab.rho)?;
            // margin = μ(wΓ₂) − ρ μ(wΓ); split it back into the two sides
            let rhs_plus = integral_criterion_check(dm, mu, g, p, 0.0)?;
            Ok(CheckResult::new(id, rhs_plus - margin, rhs_plus, tol, ctx))
        }
        CheckId::EntropyProduction => {
            let phi = need(&input.phi, id, "Φ")?;
            let f = need(&input.f, id, "a test function")?;
            let t = input.t.unwrap_or(0.5);
            ctx.t = Some(t);
            let (n, dt) = step_plan(t, lab.dt)?;
            if n == 0 {
                return Err(VerifyError::NotApplicable {
                    check: id,
                    reason: "needs t > 0".into(),
                });
            }
            ctx.dt = dt;
            let times = [t - dt, t, t + dt];
            let ev = semigroup_evolve(&lab.prop, std::slice::from_ref(f), &times, dt, lab.scheme)?;
            let h: Vec<f64> = ev
                .iter()
                .map(|fs| phi_entropy(mu, phi, &fs[0]))
                .collect::<Result<_, _>>()?;
            let dh = (h[2] - h[0]) / (2.0 * dt);
            let diss = lab.dissipation(phi, &ev[1][0])?;
            let rel = (dh + diss).abs() / diss.abs();
            Ok(CheckResult::new(id, rel, 0.0, tol, ctx)
                .note(format!("dH/dt = {dh:.12e}, -dissipation = {:.12e}", -diss)))
        }
        CheckId::ExpDecay => {
            let phi = need(&input.phi, id, "Φ")?;
            let f = need(&input.f, id, "a test function")?;
            let c = match input.c {
                Some(c) => c,
                None => 1.0 / (2.0 * need_positive_rho(lab, id)?),
            };
            let times = if input.times.is_empty() {
                default_decay_times(input.t)
            } else {
                input.times.clone()
            };
            let t_end = times.iter().copied().fold(0.0, f64::max);
            let (dt, hs, _) = semigroup_entropy_series(lab, phi, f, t_end, lab.scheme)?;
            ctx.dt = dt;
            let h0 = hs[0];
            let (t, lhs, rhs) = times
                .iter()
                .map(|&t| {
                    let k = ((t / dt).round() as usize).min(hs.len() - 1);
                    (t, hs[k], (-t / c).exp() * h0)
                })
                .min_by(|x, y| (x.2 - x.1).total_cmp(&(y.2 - y.1)))
                .expect("at least one time");
            ctx.t = Some(t);
            Ok(CheckResult::new(id, lhs, rhs, tol, ctx).note(format!("C = {c}")))
        }
        CheckId::RefinedLocal | CheckId::RefinedReverse | CheckId::IsoLocal | CheckId::IsoReverse => {
            let t = *need(&input.t, id, "a time t")?;
            let f = need(&input.f, id, "a test function")?;
            let rows = local_inequality_scan(lab, id, f, input, &[t])?;
            let row = &rows[0];
            ctx.p = row.p;
            ctx.node = Some(row.node.clone());
            let r = CheckResult::new(id, row.lhs, row.rhs, tol, ctx);
            Ok(if row.p == Some(2.0) { r.note(P2_NOTE) } else { r })
        }
        CheckId::IsoGlobal | CheckId::IsoSharper => {
            let rho = need_positive_rho(lab, id)?;
            let f = need(&input.f, id, "a test function")?;
            let phi = iso_phi();
            ctx.phi = Some(phi.label.clone());
            let ent = phi_entropy(mu, &phi, f)?;
            let s = phi.second(mu.integrate(f)?);
            let diss = lab.dissipation(&phi, f)?;
            let iso = (s / (2.0 * rho) * diss).ln_1p() / s;
            if id == CheckId::IsoGlobal {
                Ok(CheckResult::new(id, ent, iso, tol, ctx))
            } else {
                Ok(CheckResult::new(id, iso, diss / (2.0 * rho), tol, ctx))
            }
        }
        CheckId::RhoZeroRate => {
            if lab.rho < 0.0 {
                return Err(VerifyError::NotApplicable {
                    check: id,
                    reason: format!("needs CD(0,∞), have ρ = {}", lab.rho),
                });
            }
            let p = need_power(input, id, false)?;
            ctx.p = Some(p);
            let f = need(&input.f, id, "a test function")?;
            check_positive(f)?;
            let phi = make_phi(PhiKind::Power(p))?;
            ctx.phi = Some(phi.label.clone());
            let times = if input.times.is_empty() {
                (0..=100).map(|k| k as f64 * 1e-2).collect()
            } else {
                input.times.clone()
            };
            let t_end = times.iter().copied().fold(0.0, f64::max);
            let (dt, hs, _) = semigroup_entropy_series(lab, &phi, f, t_end, lab.scheme)?;
            ctx.dt = dt;
            let n = hs.len() - 1;
            if n < 2 {
                return Err(VerifyError::NotApplicable {
                    check: id,
                    reason: "needs at least two steps".into(),
                });
            }
            let deriv = |k: usize| {
                if k == 0 {
                    (-3.0 * hs[0] + 4.0 * hs[1] - hs[2]) / (2.0 * dt)
                } else if k == n {
                    (3.0 * hs[n] - 4.0 * hs[n - 1] + hs[n - 2]) / (2.0 * dt)
                } else {
                    (hs[k + 1] - hs[k - 1]) / (2.0 * dt)
                }
            };
            let d0 = deriv(0).abs();
            let alpha = (2.0 - p) / p * d0 / hs[0];
            let (t, lhs, rhs) = times
                .iter()
                .map(|&t| {
                    let k = ((t / dt).round() as usize).min(n);
                    (t, deriv(k).abs(), d0 / (1.0 + alpha * t))
                })
                .min_by(|x, y| (x.2 - x.1).total_cmp(&(y.2 - y.1)))
                .expect("at least one time");
            ctx.t = Some(t);
            Ok(CheckResult::new(id, lhs, rhs, tol, ctx).note(format!("alpha = {alpha:.6e}")))
        }
        CheckId::FpDecay => {
            let phi = need(&input.phi, id, "Φ")?;
            let u0 = input.u0.clone().unwrap_or_else(|| lab.default_initial_density());
            let c = match input.c {
                Some(c) => c,
                None => 1.0 / (2.0 * need_positive_rho(lab, id)?),
            };
            let times = if input.times.is_empty() {
                default_decay_times(input.t)
            } else {
                input.times.clone()
            };
            let series = fp_entropy_series(lab, phi, &u0, &times, lab.fp_scheme)?;
            ctx.dt = series.dt;
            let h0 = series.entropy[0];
            let (t, lhs, rhs) = series
                .times
                .iter()
                .zip(&series.entropy)
                .skip(1)
                .map(|(&t, &h)| (t, h, (-t / c).exp() * h0))
                .min_by(|x, y| (x.2 - x.1).total_cmp(&(y.2 - y.1)))
                .ok_or(VerifyError::Missing { check: id, what: "positive sample times" })?;
            ctx.t = Some(t);
            Ok(CheckResult::new(id, lhs, rhs, tol, ctx).note(format!("C = {c}")))
        }
        CheckId::FpDissipation => {
            let phi = need(&input.phi, id, "Φ")?;
            let u0 = input.u0.clone().unwrap_or_else(|| lab.default_initial_density());
            let t = input.t.unwrap_or(0.5);
            let (n, dt) = step_plan(t, lab.dt)?;
            if n == 0 {
                return Err(VerifyError::NotApplicable {
                    check: id,
                    reason: "needs t > 0".into(),
                });
            }
            ctx.t = Some(t);
            ctx.dt = dt;
            ctx.scheme = Scheme::CrankNicolson;
            let mut opts = SolveOptions::new(t + dt, dt, Scheme::CrankNicolson);
            opts.snapshots = vec![t - dt, t, t + dt];
            let traj = solve_fokker_planck(&lab.prop, &u0, &opts)?;
            let u_inf = lab.mu.density();
            let pick = |target: f64| {
                let k = traj
                    .times
                    .iter()
                    .position(|&s| (s - target).abs() < 0.5 * dt)
                    .expect("snapshot requested");
                relative_density(&traj.snapshots[k], &u_inf)
            };
            let (h_minus, h_mid, h_plus) = (pick(t - dt), pick(t), pick(t + dt));
            let e_minus = phi_entropy(mu, phi, &h_minus)?;
            let e_plus = phi_entropy(mu, phi, &h_plus)?;
            let dh = (e_plus - e_minus) / (2.0 * dt);
            let diss = lab.dissipation(phi, &h_mid)?;
            let rel = (dh + diss).abs() / diss.abs();
            Ok(CheckResult::new(id, rel, 0.0, tol, ctx)
                .note(format!("dH/dt = {dh:.12e}, -dissipation = {:.12e}", -diss)))
        }
        CheckId::Duality => {
            let v = lab.prop.shifted_potential().ok_or(VerifyError::NotApplicable {
                check: id,
                reason: "needs a gradient-mode model".into(),
            })?;
            if dm.perturbation.is_some() {
                return Err(VerifyError::NotApplicable {
                    check: id,
                    reason: "the relation requires F = 0".into(),
                });
            }
            let u0 = input.u0.clone().unwrap_or_else(|| lab.default_initial_density());
            let t = input.t.unwrap_or(0.5);
            ctx.t = Some(t);
            let traj = solve_fokker_planck(&lab.prop, &u0, &SolveOptions::new(t, lab.dt, lab.fp_scheme))?;
            ctx.dt = traj.dt;
            ctx.scheme = lab.fp_scheme;
            let mass0 = u0.mass();
            let lifted = Field::from_vec(
                *lab.grid(),
                (0..u0.len()).map(|i| v[i].exp() * u0[i] / mass0).collect(),
            );
            let pt = crate::pde::semigroup_apply_with(&lab.prop, &lifted, t, lab.dt, lab.fp_scheme)?;
            let ut = traj.last();
            let (node, res) = lab
                .grid()
                .core_nodes()
                .into_iter()
                .map(|i| (i, (ut[i] - (-v[i]).exp() * pt[i]).abs()))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .expect("core is non-empty");
            ctx.node = Some(lab.grid().node_point(node));
            Ok(CheckResult::new(id, res, 0.0, tol, ctx))
        }
    }
}

const P2_NOTE: &str = "p = 2 lies outside ]1, 2[, the range in which the refined inequalities are stated";

/// Worst margin over the core at one time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanRow {
    pub t: f64,
    pub p: Option<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub worst_margin: f64,
    /// Largest margin over the core, a measure of how far from sharp the
    /// inequality is at this time.
    pub max_margin: f64,
    pub node: Vec<f64>,
}

/// Worst core margins of a local inequality at each of `times` (ascending,
/// multiples of the lab step).
pub fn local_inequality_scan(
    lab: &Lab,
    id: CheckId,
    f: &Field,
    input: &CheckInput,
    times: &[f64],
) -> Result<Vec<ScanRow>, VerifyError> {
    let kind = LocalKind::from_check(id, input)?;
    let seeds = kind.seeds(lab, f)?;
    let evolved = semigroup_evolve(&lab.prop, &seeds, times, lab.dt, lab.scheme)?;
    let p = match kind {
        LocalKind::Refined { p, .. } => Some(p),
        LocalKind::Iso { .. } => None,
    };
    times
        .iter()
        .zip(&evolved)
        .map(|(&t, ev)| {
            let sides = kind.sides(lab, t, ev)?;
            let (i, lhs, rhs) = worst(&sides);
            let max_margin = sides.iter().map(|s| s.2 - s.1).fold(f64::NEG_INFINITY, f64::max);
            Ok(ScanRow {
                t,
                p,
                lhs,
                rhs,
                worst_margin: rhs - lhs,
                max_margin,
                node: lab.grid().node_point(i),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropySeries {
    pub dt: f64,
    pub times: Vec<f64>,
    pub entropy: Vec<f64>,
    pub dissipation: Vec<f64>,
}

/// `Ent_μ^Φ(u_t/u_∞)` and `∫ Φ''Γ dμ` at the requested times (plus `t = 0`).
pub fn fp_entropy_series(
    lab: &Lab,
    phi: &PhiFunction,
    u0: &Field,
    times: &[f64],
    scheme: Scheme,
) -> Result<EntropySeries, VerifyError> {
    let t_end = times.iter().copied().fold(0.0, f64::max);
    let mut opts = SolveOptions::new(t_end, lab.dt, scheme);
    opts.snapshots = times.to_vec();
    let traj = solve_fokker_planck(&lab.prop, u0, &opts)?;
    let u_inf = lab.mu.density();
    let mut entropy = Vec::with_capacity(traj.times.len());
    let mut dissipation = Vec::with_capacity(traj.times.len());
    for u in &traj.snapshots {
        let h = relative_density(u, &u_inf);
        entropy.push(phi_entropy(&lab.mu, phi, &h)?);
        dissipation.push(lab.dissipation(phi, &h)?);
    }
    Ok(EntropySeries {
        dt: traj.dt,
        times: traj.times,
        entropy,
        dissipation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayMode {
    /// `H(t) = Ent_μ^Φ(P_t f)`.
    Semigroup,
    /// `H(t) = Ent_μ^Φ(u_t/u_∞)`.
    FokkerPlanck,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub mode: DecayMode,
    pub phi: String,
    pub times: Vec<f64>,
    pub entropy: Vec<f64>,
    /// `H(0) e^{−t/C}`, when a constant is available.
    pub bound: Option<Vec<f64>>,
    pub dissipation: Vec<f64>,
    pub c: Option<f64>,
    /// `1/C`.
    pub theoretical_rate: Option<f64>,
    /// Least-squares slope of `−log H` over samples with `H > 1e-13`.
    pub fitted_rate: Option<f64>,
    pub violation: bool,
    pub max_relative_excess: f64,
    pub degenerate: bool,
}

impl DecayReport {
    pub const CSV_HEADER: &'static str = "t,entropy,bound,dissipation";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            let b = self
                .bound
                .as_ref()
                .map(|b| format!("{:.17e}", b[k]))
                .unwrap_or_default();
            s.push_str(&format!(
                "{t:.17e},{:.17e},{b},{:.17e}\n",
                self.entropy[k], self.dissipation[k]
            ));
        }
        s
    }
}

/// Entropy decay along the semigroup (`source = f`) or the forward equation
/// (`source = u0`), sampled every `interval` up to `t_end`. The constant `C`
/// defaults to `1/(2ρ)` when `ρ > 0`; with `ρ ≤ 0` and no `C`, no bound and
/// no exponential fit are reported.
pub fn decay_report(
    lab: &Lab,
    phi: &PhiFunction,
    mode: DecayMode,
    source: &Field,
    t_end: f64,
    interval: f64,
    c: Option<f64>,
) -> Result<DecayReport, VerifyError> {
    let c = c.or_else(|| (lab.rho > 0.0).then(|| 1.0 / (2.0 * lab.rho)));
    let n = (t_end / interval + 1e-9).floor() as usize;
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * interval).collect();
    let (times, entropy, dissipation) = match mode {
        DecayMode::Semigroup => {
            let (dt, hs, fields) = semigroup_entropy_series(lab, phi, source, t_end, lab.scheme)?;
            let mut d = Vec::with_capacity(times.len());
            let mut h = Vec::with_capacity(times.len());
            for &t in &times {
                let k = ((t / dt).round() as usize).min(hs.len() - 1);
                h.push(hs[k]);
                d.push(lab.dissipation(phi, &fields[k])?);
            }
            (times, h, d)
        }
        DecayMode::FokkerPlanck => {
            let s = fp_entropy_series(lab, phi, source, &times, lab.fp_scheme)?;
            (s.times, s.entropy, s.dissipation)
        }
    };
    let h0 = entropy[0];
    let degenerate = !(h0 > ENTROPY_FLOOR);
    let bound = c.map(|c| times.iter().map(|t| h0 * (-t / c).exp()).collect::<Vec<_>>());
    let mut max_excess: f64 = 0.0;
    if let (Some(b), false) = (&bound, degenerate) {
        for (h, bb) in entropy.iter().zip(b) {
            max_excess = max_excess.max((h - bb) / h0);
        }
    }
    let fitted_rate = if degenerate || c.is_none() {
        None
    } else {
        let (ts, logs): (Vec<f64>, Vec<f64>) = times
            .iter()
            .zip(&entropy)
            .filter(|(_, &h)| h > ENTROPY_FLOOR)
            .map(|(&t, &h)| (t, h.ln()))
            .unzip();
        least_squares_slope(&ts, &logs).map(|s| -s)
    };
    Ok(DecayReport {
        mode,
        phi: phi.label.clone(),
        times,
        entropy,
        bound,
        dissipation,
        c,
        theoretical_rate: c.map(|c| 1.0 / c),
        fitted_rate,
        violation: max_excess > DECAY_VIOLATION_TOL,
        max_relative_excess: max_excess,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatteryRange {
    /// Values in `[1 − A, 1 + A]` with `A ∈ [0.2, 0.8]`.
    Positive,
    /// Values in `[0.05, 0.95]`.
    UnitInterval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub label: String,
    pub field: Field,
}

/// Seeded test functions cycling through affine, quadratic, smoothed-step
/// and bump profiles along random directions, rescaled into `range`.
pub fn battery(grid: &Grid, size: usize, seed: u64, range: BatteryRange) -> Vec<TestFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = grid.dim;
    let center: Vec<f64> = (0..dim).map(|k| 0.5 * (grid.lower[k] + grid.upper[k])).collect();
    let half = (0..dim)
        .map(|k| 0.5 * (grid.upper[k] - grid.lower[k]))
        .fold(0.0, f64::max);
    (0..size)
        .map(|idx| {
            let dir: Vec<f64> = if dim == 1 {
                vec![if rng.gen_bool(0.5) { 1.0 } else { -1.0 }]
            } else {
                let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                vec![a.cos(), a.sin()]
            };
            let family = idx % 4;
            let s0: f64 = rng.gen_range(-0.3..0.3);
            let width: f64 = rng.gen_range(0.1..0.3);
            let amp: f64 = rng.gen_range(0.2..0.8);
            let (name, shape): (&str, Box<dyn Fn(f64) -> f64>) = match family {
                0 => ("affine", Box::new(|x| x)),
                1 => ("quadratic", Box::new(move |x| (x - s0) * (x - s0))),
                2 => ("step", Box::new(move |x| ((x - s0) / width).tanh())),
                _ => (
                    "bump",
                    Box::new(move |x| (-(x - s0) * (x - s0) / (2.0 * width * width)).exp()),
                ),
            };
            let raw: Vec<f64> = (0..grid.node_count())
                .map(|i| {
                    let x = grid.node(i);
                    let xi: f64 = (0..dim).map(|k| dir[k] * (x[k] - center[k])).sum::<f64>() / half;
                    shape(xi)
                })
                .collect();
            let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mid = 0.5 * (lo + hi);
            let rad = 0.5 * (hi - lo);
            let values: Vec<f64> = raw
                .iter()
                .map(|v| {
                    let s = (v - mid) / rad;
                    match range {
                        BatteryRange::Positive => 1.0 + amp * s,
                        BatteryRange::UnitInterval => 0.5 + 0.45 * (0.5 + 0.5 * amp / 0.8) * s,
                    }
                })
                .collect();
            TestFunction {
                label: format!("{name}-{idx}"),
                field: Field::from_vec(*grid, values),
            }
        })
        .collect()
}

/// What a verification suite runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteConfig {
    pub checks: Vec<CheckId>,
    pub phis: Vec<PhiKind>,
    pub ps: Vec<f64>,
    pub seed: u64,
    pub battery_size: usize,
    pub local_times: Vec<f64>,
    pub production_time: f64,
    pub decay_t_end: f64,
    pub sample_interval: f64,
    /// Φ-entropy constant for the decay checks; `1/(2ρ)` when absent.
    pub c: Option<f64>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            checks: CheckId::ALL.to_vec(),
            phis: vec![PhiKind::Variance, PhiKind::Boltzmann, PhiKind::Power(1.5)],
            ps: vec![1.1, 1.3, 1.5, 1.7, 1.9],
            seed: 1,
            battery_size: 20,
            local_times: vec![0.05, 0.1, 0.2],
            production_time: 0.5,
            decay_t_end: 1.0,
            sample_interval: 0.1,
            c: None,
        }
    }
}

/// Runs every configured check over the battery. Checks that do not apply to
/// the model (for instance ρ-dependent bounds with ρ ≤ 0) are skipped and
/// listed in the second return value.
pub fn run_suite(
    lab: &Lab,
    cfg: &SuiteConfig,
) -> Result<(Vec<CheckResult>, Vec<String>), VerifyError> {
    let grid = *lab.grid();
    let pos = battery(&grid, cfg.battery_size, cfg.seed, BatteryRange::Positive);
    let unit = battery(&grid, cfg.battery_size, cfg.seed, BatteryRange::UnitInterval);
    let phis: Vec<PhiFunction> = cfg
        .phis
        .iter()
        .map(|&k| make_phi(k))
        .collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    let decay_times: Vec<f64> = {
        let n = (cfg.decay_t_end / cfg.sample_interval + 1e-9).floor() as usize;
        (1..=n).map(|k| k as f64 * cfg.sample_interval).collect()
    };
    let mut push = |r: Result<CheckResult, VerifyError>, out: &mut Vec<CheckResult>| -> Result<(), VerifyError> {
        match r {
            Ok(r) => out.push(r),
            Err(e @ VerifyError::NotApplicable { .. }) => {
                let s = e.to_string();
                if !skipped.contains(&s) {
                    skipped.push(s);
                }
            }
            Err(e) => return Err(e),
        }
        Ok(())
    };
    let family_for = |phi: &PhiFunction| {
        if phi.kind == PhiKind::GaussIsoperimetry {
            &unit
        } else {
            &pos
        }
    };
    let with_c = |i: CheckInput| match cfg.c {
        Some(c) => i.c(c),
        None => i,
    };
    for &id in &cfg.checks {
        match id {
            CheckId::GlobalPhi => {
                for phi in &phis {
                    for tf in family_for(phi) {
                        let inp = CheckInput::new().phi(phi.clone()).f(tf.field.clone(), &tf.label);
                        push(run_check(lab, id, &inp), &mut out)?;
                    }
                }
            }
            CheckId::ExpDecay => {
                for phi in &phis {
                    for tf in family_for(phi) {
                        let inp = with_c(
                            CheckInput::new()
                                .phi(phi.clone())
                                .f(tf.field.clone(), &tf.label)
                                .times(decay_times.clone()),
                        );
                        push(run_check(lab, id, &inp), &mut out)?;
                    }
                }
            }
            CheckId::EntropyProduction => {
                for phi in &phis {
                    let tf = &family_for(phi)[0];
                    let inp = CheckInput::new()
                        .phi(phi.clone())
                        .f(tf.field.clone(), &tf.label)
                        .t(cfg.production_time);
                    push(run_check(lab, id, &inp), &mut out)?;
                }
            }
            CheckId::Beckner | CheckId::RefinedGlobal | CheckId::BecknerVsRefined | CheckId::IntegralCriterion => {
                for &p in &cfg.ps {
                    if id == CheckId::IntegralCriterion && p >= 2.0 {
                        continue;
                    }
                    for tf in &pos {
                        let inp = CheckInput::new().p(p).f(tf.field.clone(), &tf.label);
                        push(run_check(lab, id, &inp), &mut out)?;
                    }
                }
            }
            CheckId::RefinedLocal | CheckId::RefinedReverse => {
                for &p in &cfg.ps {
                    for tf in &pos {
                        let inp = CheckInput::new().p(p);
                        let rows = local_inequality_scan(lab, id, &tf.field, &inp, &cfg.local_times)?;
                        out.extend(rows.into_iter().map(|row| scan_result(lab, id, &tf.label, row)));
                    }
                }
            }
            CheckId::IsoLocal | CheckId::IsoReverse => {
                for tf in &unit {
                    let rows = local_inequality_scan(lab, id, &tf.field, &CheckInput::new(), &cfg.local_times)?;
                    out.extend(rows.into_iter().map(|row| scan_result(lab, id, &tf.label, row)));
                }
            }
            CheckId::IsoGlobal | CheckId::IsoSharper => {
                for tf in &unit {
                    let inp = CheckInput::new().f(tf.field.clone(), &tf.label);
                    push(run_check(lab, id, &inp), &mut out)?;
                }
            }
            CheckId::RhoZeroRate => {
                for &p in &cfg.ps {
                    for tf in pos.iter().take(4) {
                        let inp = CheckInput::new().p(p).f(tf.field.clone(), &tf.label);
                        push(run_check(lab, id, &inp), &mut out)?;
                    }
                }
            }
            CheckId::FpDecay => {
                for phi in phis.iter().filter(|p| p.kind != PhiKind::GaussIsoperimetry) {
                    let inp = with_c(CheckInput::new().phi(phi.clone()).times(decay_times.clone()));
                    push(run_check(lab, id, &inp), &mut out)?;
                }
            }
            CheckId::FpDissipation => {
                for phi in phis.iter().filter(|p| p.kind != PhiKind::GaussIsoperimetry) {
                    let inp = CheckInput::new().phi(phi.clone()).t(cfg.production_time);
                    push(run_check(lab, id, &inp), &mut out)?;
                }
            }
            CheckId::Duality => {
                push(run_check(lab, id, &CheckInput::new().t(cfg.production_time)), &mut out)?;
            }
        }
    }
    Ok((out, skipped))
}

fn scan_result(lab: &Lab, id: CheckId, label: &str, row: ScanRow) -> CheckResult {
    let mut ctx = lab.context();
    ctx.p = row.p;
    ctx.t = Some(row.t);
    ctx.function = Some(label.to_string());
    ctx.node = Some(row.node.clone());
    if matches!(id, CheckId::IsoLocal | CheckId::IsoReverse) {
        ctx.phi = Some(PhiKind::GaussIsoperimetry.to_string());
    }
    let r = CheckResult::new(id, row.lhs, row.rhs, id.default_tolerance(), ctx);
    if row.p == Some(2.0) {
        r.note(P2_NOTE)
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou_lab(cells: usize) -> Lab {
        let m = Model::gradient(1, &["1"], "x1^2/2", None).unwrap();
        let g = Grid::new(&[-6.0], &[6.0], &[cells]).unwrap();
        Lab::new("ou", &m, &g).unwrap()
    }

    fn x_field(lab: &Lab) -> Field {
        Field::from_fn(*lab.grid(), |p| p[0]).unwrap()
    }

    #[test]
    fn check_ids_round_trip() {
        for id in CheckId::ALL {
            assert_eq!(id.name().parse::<CheckId>().unwrap(), id);
            assert_eq!(
                serde_json::to_string(&id).unwrap(),
                format!("\"{}\"", id.name())
            );
        }
        assert!("NOPE".parse::<CheckId>().is_err());
    }

    #[test]
    fn sharp_poincare_on_linear_function() {
        let lab = ou_lab(512);
        let var = make_phi(PhiKind::Variance).unwrap();
        let r = run_check(&lab, CheckId::GlobalPhi, &CheckInput::new().phi(var).f(x_field(&lab), "x")).unwrap();
        assert!((r.lhs - 1.0).abs() < 1e-6, "{r:?}");
        assert!((r.rhs - 1.0).abs() < 1e-12);
        assert!(r.margin.abs() <= 2e-2);
        assert!(r.pass);
    }

    #[test]
    fn wrong_rho_breaks_exponential_decay() {
        let lab = ou_lab(256).with_rho(5.0);
        let var = make_phi(PhiKind::Variance).unwrap();
        let r = run_check(&lab, CheckId::ExpDecay, &CheckInput::new().phi(var).f(x_field(&lab), "x")).unwrap();
        assert!(!r.pass, "{r:?}");
    }

    #[test]
    fn weaker_rho_increases_margins() {
        let lab = ou_lab(256);
        let weaker = lab.clone().with_rho(lab.rho - 0.1);
        let g = battery(lab.grid(), 4, 3, BatteryRange::Positive);
        for tf in &g {
            let inp = CheckInput::new().p(1.5).f(tf.field.clone(), &tf.label);
            for id in [CheckId::Beckner, CheckId::RefinedGlobal, CheckId::IntegralCriterion] {
                let a = run_check(&lab, id, &inp).unwrap();
                let b = run_check(&weaker, id, &inp).unwrap();
                assert!(b.margin > a.margin, "{id}");
            }
            let a = run_check(&lab, CheckId::RefinedLocal, &inp.clone().t(0.1)).unwrap();
            let b = run_check(&weaker, CheckId::RefinedLocal, &inp.clone().t(0.1)).unwrap();
            assert!(b.margin > a.margin);
        }
    }

    #[test]
    fn decay_report_degenerate_and_csv() {
        let lab = ou_lab(128);
        let b = make_phi(PhiKind::Boltzmann).unwrap();
        let u_inf = lab.mu.density();
        let rep = decay_report(&lab, &b, DecayMode::FokkerPlanck, &u_inf, 0.5, 0.1, None).unwrap();
        assert!(rep.degenerate);
        assert!(rep.fitted_rate.is_none());
        let csv = rep.to_csv();
        assert!(csv.starts_with("t,entropy,bound,dissipation\n"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn variance_decay_of_linear_function() {
        let lab = ou_lab(512);
        let var = make_phi(PhiKind::Variance).unwrap();
        let rep = decay_report(&lab, &var, DecayMode::Semigroup, &x_field(&lab), 1.0, 0.1, None).unwrap();
        for (t, h) in rep.times.iter().zip(&rep.entropy) {
            assert!((h / (-2.0 * t).exp() - 1.0).abs() < 0.02);
        }
        assert!((rep.fitted_rate.unwrap() - 2.0).abs() < 0.02);
    }

    #[test]
    fn battery_is_seeded_and_in_range() {
        let g = Grid::new(&[-6.0], &[6.0], &[128]).unwrap();
        let a = battery(&g, 20, 11, BatteryRange::Positive);
        let b = battery(&g, 20, 11, BatteryRange::Positive);
        assert_eq!(a, b);
        assert_ne!(a, battery(&g, 20, 12, BatteryRange::Positive));
        for tf in &a {
            assert!(tf.field.min() >= 0.2 - 1e-12 && tf.field.max() <= 1.8 + 1e-12);
        }
        for tf in battery(&g, 20, 11, BatteryRange::UnitInterval) {
            assert!(tf.field.min() >= 0.05 - 1e-12 && tf.field.max() <= 0.95 + 1e-12);
        }
        let g2 = Grid::new(&[-3.0, -3.0], &[3.0, 3.0], &[16, 16]).unwrap();
        assert_eq!(battery(&g2, 8, 1, BatteryRange::Positive).len(), 8);
    }

    #[test]
    fn local_checks_vanish_as_t_shrinks() {
        let lab = ou_lab(512);
        let f = Field::from_fn(*lab.grid(), |p| 1.0 + 0.5 * (p[0] / 0.8).tanh()).unwrap();
        let rows = local_inequality_scan(&lab, CheckId::RefinedLocal, &f, &CheckInput::new().p(1.5), &[0.05, 0.1, 0.2]).unwrap();
        for r in &rows {
            assert!(r.worst_margin >= -1e-6, "{r:?}");
        }
        assert!(rows[0].max_margin < rows[1].max_margin && rows[1].max_margin < rows[2].max_margin);
    }

    #[test]
    fn inputs_are_validated() {
        let lab = ou_lab(64);
        let e = run_check(&lab, CheckId::GlobalPhi, &CheckInput::new()).unwrap_err();
        assert!(matches!(e, VerifyError::Missing { .. }));
        let neg = Field::constant(*lab.grid(), -1.0);
        let e = run_check(&lab, CheckId::Beckner, &CheckInput::new().p(1.5).f(neg, "neg")).unwrap_err();
        assert!(matches!(e, VerifyError::Phi(PhiError::NonPositive { .. })));
        let e = run_check(&lab, CheckId::Beckner, &CheckInput::new().p(2.5).f(x_field(&lab), "x")).unwrap_err();
        assert!(matches!(e, VerifyError::Phi(PhiError::ExponentOutOfRange { .. })));
    }
}
