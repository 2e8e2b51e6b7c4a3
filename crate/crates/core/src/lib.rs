//! Streaming transducer laboratory: block-processing attention encoder with
//! domain-conditioned context, alignment-restricted transducer loss, and a
//! chunked decode runtime that measures accuracy, emission latency and
//! real-time factor on synthetic two-domain speech.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod lattice;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod predictor;
pub mod registry;
pub mod runtime;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
