//! Joint recognition of (subject, predicate, object) triplets from detected
//! object pairs: a triplet CRF with exact and mean-field inference, the same
//! updates unrolled into trainable inference units, spatial-mask features,
//! the surrounding detection pipeline, synthetic data generation, and the
//! evaluation metrics.

pub mod data;
pub mod drnet;
pub mod error;
pub mod eval;
pub mod numkit;
pub mod pipeline;
pub mod relmodel;
pub mod spatial;
pub mod verify;

pub use error::{Error, Result};
