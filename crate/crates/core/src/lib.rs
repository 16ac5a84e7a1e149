//! Multi-turn dialog generation laboratory.

pub mod attention;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod perturb;
pub mod training;

pub use error::{Error, Result};
