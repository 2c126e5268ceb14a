//! Prototype-guided adaptation of batch-normalization statistics.
//!
//! A corruption identification module (CIM) maps each test image to a
//! corruption type; a codebook keeps one set of BN statistics per type and
//! updates the selected set from the test batches it receives.

pub mod checkpoint;
pub mod cim;
pub mod codebook;
pub mod config;
pub mod corruption;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{PanError, Result};
pub use tensor::Tensor;
