pub mod autodiff;
pub mod error;
pub mod formats;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod polsar;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
