pub mod cate;
pub mod cli;
pub mod dml;
pub mod double_lasso;
pub mod error;
pub mod learners;
pub mod linalg;
pub mod penalized;
pub mod rng;
pub mod sensitivity;
pub mod sim;
pub mod stats;
pub mod weak_id;

pub use error::{Error, Result};
