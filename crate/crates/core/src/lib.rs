//! Numerical laboratory for Φ-entropy inequalities of diffusion semigroups
//! and the long-time behaviour of linear Fokker-Planck equations.
//!
//! Layers, bottom-up: [`expr`] parses and differentiates model expressions,
//! [`model`] holds grids, fields and measures, [`operators`] applies `L`, `Γ`
//! and `Γ₂`, [`phi`] provides the entropy generators and functionals, [`pde`]
//! discretizes the forward and backward equations, [`verify`] evaluates the
//! inequalities, and [`cli`] wires everything to config files and reports.

pub mod cli;
pub mod expr;
pub mod linalg;
pub mod model;
pub mod numeric;
pub mod operators;
pub mod pde;
pub mod phi;
pub mod verify;

pub use expr::{Expression, Jet2};
pub use model::{gibbs_measure, Field, Grid, Measure, Model};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Expr(#[from] expr::ExprError),
    #[error(transparent)]
    Eval(#[from] expr::EvalFault),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Operator(#[from] operators::OperatorError),
    #[error(transparent)]
    Phi(#[from] phi::PhiError),
    #[error(transparent)]
    Pde(#[from] pde::PdeError),
    #[error(transparent)]
    Verify(#[from] verify::VerifyError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
