//! Simulator for a transformer with a ReLU MLP embedding and a single linear
//! attention layer, pretrained in two stages on Gaussian single-index
//! regression tasks and evaluated on in-context learning.
//!
//! Numerical code is generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases below fix the scalar type.

pub mod baselines;
pub mod diagnostics;
pub mod experiment;
pub mod hermite;
pub mod linalg;
pub mod model;
pub mod pretrain;
pub mod quadrature;
pub mod rng;
pub mod scalar;
pub mod task;

pub use scalar::Real;

pub type ModelParams64 = model::ModelParams<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type Gamma64 = model::Gamma<f64>;
pub type Gamma32 = model::Gamma<f32>;
pub type TaskSpec64 = task::TaskSpec<f64>;
pub type TaskSpec32 = task::TaskSpec<f32>;
pub type Prompt64 = task::Prompt<f64>;
pub type Prompt32 = task::Prompt<f32>;
pub type Stage2Data64 = pretrain::Stage2Data<f64>;
pub type Stage2Data32 = pretrain::Stage2Data<f32>;
pub type ValidationSet64 = experiment::ValidationSet<f64>;
pub type ValidationSet32 = experiment::ValidationSet<f32>;
pub type BasisFit64 = diagnostics::BasisFit<f64>;
pub type BasisFit32 = diagnostics::BasisFit<f32>;
