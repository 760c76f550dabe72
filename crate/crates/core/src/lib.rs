//! Neural temporal point processes: encoders, intensity and cumulative
//! intensity decoders, exact likelihoods, a Hawkes oracle, and a
//! deterministic training harness.

pub mod ad;
pub mod dataio;
pub mod decoders;
pub mod encoders;
pub mod harness;
pub mod hawkes;
pub mod likelihood;
pub mod model;
pub mod monotonic;
pub mod nn;

mod error;

pub use ad::Tensor;
pub use error::{Error, Result};
pub use likelihood::{Event, EventSequence, Task};
