//! Offline learning of a single policy that performs well on average over a
//! population of contextual linear MDPs.

pub mod envgen;
pub mod harness;
pub mod error;
pub mod exact;
pub mod io;
pub mod model;
pub mod learners;
pub mod ppe;

pub use error::{Error, Result};
