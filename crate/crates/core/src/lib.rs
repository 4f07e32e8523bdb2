//! AC-CovidNet: an attention-gated PEPX convolutional network for 3-class
//! chest X-ray classification, trained in two stages — first the encoder and
//! projection head under a supervised contrastive loss, then a classifier
//! head under cross entropy with the encoder frozen.
//!
//! Everything runs in double precision on the CPU with hand-written forward
//! and backward passes, which keeps the whole pipeline verifiable against
//! finite-difference and brute-force oracles at desk scale.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::FeatureMap;
