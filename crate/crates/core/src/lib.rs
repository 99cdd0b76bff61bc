//! Fractional counting for register-based population statistics.
//!
//! Each register record carries a fractional counter `(μ, ξ, θ)`: where the
//! person lives among their listed addresses, whether their true address is
//! unlisted, and whether they belong to the population at all. Counters are
//! initiated from a census-linked core, rolled forward as register updates
//! and coverage surveys arrive, and validated by audit sampling. The
//! `synthworld` module provides synthetic populations with known truth.

pub mod audit;
pub mod counting;
pub mod error;
pub mod features;
pub mod initiate;
pub mod linalg;
pub mod logit;
pub mod model;
pub mod modelfile;
pub mod rolling;
pub mod scalar;
pub mod synthworld;
pub mod treeroll;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type FractionalCounterF64 = counting::FractionalCounter<f64>;
pub type FractionalCounterF32 = counting::FractionalCounter<f32>;
pub type CountEstimateF64 = counting::CountEstimate<f64>;
pub type CountEstimateF32 = counting::CountEstimate<f32>;
pub type ParamStateF64 = model::ParamState<f64>;
pub type ParamStateF32 = model::ParamState<f32>;
pub type ModelStateF64 = model::ModelState<f64>;
pub type ModelStateF32 = model::ModelState<f32>;
pub type InitiationResultF64 = initiate::InitiationResult<f64>;
pub type InitiationResultF32 = initiate::InitiationResult<f32>;
pub type ResidencyStateF64 = rolling::ResidencyState<f64>;
pub type ResidencyStateF32 = rolling::ResidencyState<f32>;
