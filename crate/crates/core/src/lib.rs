//! Weight-sharing architecture search at desk scale: a small reverse-mode
//! autodiff engine, transformer-style candidate operators, a chain-styled
//! super-net, child samplers, hidden-state alignment, interference analysis,
//! rank correlation and progressive shrinking.

pub mod alignment;
pub mod analysis;
pub mod autodiff;
pub mod ops;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod search;
pub mod supernet;
pub mod tasks;
pub mod trainer;

pub use scalar::Scalar;

/// Double-precision instantiations used throughout the tools.
pub type Tensor = autodiff::Array<f64>;
pub type Net = supernet::SuperNet<f64>;
pub type Params = autodiff::ParamMap<f64>;
pub type Standalone = supernet::ChildNet<f64>;
