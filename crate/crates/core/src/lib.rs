//! Differentiable bias correction of gridded daily precipitation.
//!
//! A small parameter network reads raw model precipitation, its recent lags,
//! a wet-day indicator and static terrain attributes, and emits per-cell,
//! per-day coefficients of a strictly increasing softplus-basis transform.
//! The network is trained by reverse-mode differentiation through a
//! composite quantile / rainy-day / spatial-similarity objective.
//!
//! Besides the learned corrector the crate ships classical quantile-mapping
//! baselines, an extremes / spatial-structure / trend evaluation suite and a
//! synthetic climate generator with a known injected bias.

// `!(x > 0.0)` style guards are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod encoders;
pub mod error;
pub mod gridio;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod synth;
pub mod training;
pub mod transform;

pub use error::{Error, Result};
pub use gridio::{AttributeField, GridField, NeighborGraph};
