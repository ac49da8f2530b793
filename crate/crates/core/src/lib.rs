pub mod covariance;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod pls;
pub mod spatrf;
pub mod synthetic;
pub mod ukpls;
pub mod varimp;

pub use error::{Error, Result};
