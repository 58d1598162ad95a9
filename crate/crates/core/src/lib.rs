//! Simulation and estimation of invariant Radon measures of critical
//! stochastic recursions.

// `!(a < b)` is used deliberately so that NaN takes the failing branch.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baseline;
pub mod chains;
pub mod constants;
pub mod ladder;
pub mod measure;
pub mod model;
pub mod real;
pub mod rng;
pub mod stats;

pub use real::{Real, Scaled, StateRange};
pub use rng::{Purpose, RandomStream};

pub type ModelSpec = model::ModelSpec<f64>;
pub type Innovation = model::Innovation<f64>;
pub type ValidationReport = model::ValidationReport<f64>;
pub type ChainState = chains::ChainState<f64>;
pub type LogHistogram = measure::LogHistogram<f64>;
pub type TailProfile = measure::TailProfile<f64>;
pub type MeasureEstimate = measure::MeasureEstimate<f64>;
pub type PsiGrid = constants::PsiGrid<f64>;
pub type ConstantsReport = constants::ConstantsReport<f64>;
pub type KestenBaselineReport = baseline::KestenBaselineReport<f64>;
