pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod artifact;
pub mod corpus;
pub mod decoding;
pub mod defense;
pub mod harness;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod transfer;
pub mod tuner;
