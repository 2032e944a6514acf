//! Region-aware preference optimization for facial-coefficient regression.
//!
//! The crate covers a synthetic world of faces and noisy labels, a factorized
//! token policy, region-split comparison tasks with a consistency filter, a
//! preference discriminator, and an iterative DPO loop.

pub mod artifact;
pub mod coeffs;
pub mod config;
pub mod discriminator;
pub mod dpo;
pub mod error;
pub mod facerender;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod prefdata;
pub mod rng;
pub mod synthworld;

pub use coeffs::{ActionVocabulary, CoefficientSet, Region};
pub use error::{Error, Result};
