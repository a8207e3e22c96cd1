pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod netmodel;
pub mod ingest;
pub mod demand;
pub mod subset;
pub mod estimator;
pub mod baselines;
pub mod evaluate;
