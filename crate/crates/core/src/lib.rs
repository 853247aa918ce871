//! Adaptive gradient prediction at desk scale: a small f64 training engine,
//! a shared gradient predictor, the phase scheduler, and analytic timing,
//! pipeline and energy models.

// Range checks are written `!(x >= 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod energy;
pub mod error;
pub mod costmodel;
pub mod data;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod pipesim;
pub mod predictor;
pub mod rng;
pub mod scheduler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
