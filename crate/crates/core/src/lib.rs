pub mod autodiff;
pub mod cbf;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod ftg;
pub mod np;
pub mod sim;

pub use error::{Error, Result};
