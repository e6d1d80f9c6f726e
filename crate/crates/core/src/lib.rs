//! Online speculative decoding at desk scale.
//!
//! A small trainable draft model proposes tokens, a frozen target model
//! verifies them with the exact accept/reject/residual rule, and the draft
//! is distilled online on the positions where it was corrected.

pub mod analysis;
pub mod config;
pub mod distill;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod model;
pub mod report;
pub mod rng;
pub mod specdecode;
pub mod workload;

pub use error::{Error, Result};
pub use rng::SeededRng;
