//! Virtual try-on diffusion lab: a desk-scale single-stage conditional
//! diffusion system with disentangled conditioning encoders, progressive
//! resolution training, person-feature finetuning, and a procedurally
//! generated paired try-on dataset.

pub mod arch;
pub mod attrs;
pub mod cli;
pub mod cond;
pub mod diffusion;
pub mod error;
pub mod finetune;
pub mod graph;
pub mod imgio;
pub mod metrics;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod train;

pub use error::{Result, VtoError};
