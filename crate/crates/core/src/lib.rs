// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod autodiff;
pub mod cmd;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ppm;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
