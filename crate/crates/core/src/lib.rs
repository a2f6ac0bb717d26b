pub mod data;
pub mod diagnostics;
pub mod dlm;
pub mod erm;
pub mod error;
pub mod expr;
pub mod harness;
pub mod linalg;
pub mod moments;
pub mod perturb_sim;
pub mod qp;
pub mod rng;
pub mod stats;
pub mod summary;
pub mod test_functions;

pub use error::{Error, Result};
