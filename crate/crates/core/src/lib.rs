//! Log anomaly detection with parameter-efficient fine-tuning.
//!
//! Raw logs are mined into log keys by a fixed-depth parse tree
//! ([`drain`]), cut into fixed-length key windows ([`sequencer`]) and
//! classified by a small decoder-only transformer ([`transformer`]) that is
//! adapted either with low-rank updates on its attention projections or with
//! a stacked adapter head on its frozen output ([`peft`], [`trainer`]).

pub mod autodiff;
pub mod drain;
pub mod error;
pub mod metrics;
pub mod params;
pub mod peft;
pub mod rng;
pub mod sequencer;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
