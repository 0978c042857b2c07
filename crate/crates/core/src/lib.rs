//! One-shot quantization-aware fine-tuning of a layer-wise mixed-precision
//! supernet.
//!
//! A full-precision toy language model is quantized at several bit-widths
//! per layer. Each (layer, bit-width) slot gets its own group-tied low-rank
//! adapter, so training one subnet never perturbs another bit-width. A
//! resource-balanced sampler spreads training over all average bit-widths,
//! and a correlation-guided two-phase search picks subnets under bit budgets.
//!
//! - [`tensor`]: matrices, seeded streams, tensor files
//! - [`quant`]: group-wise round-to-nearest quantization
//! - [`adapter`]: group-tied adapters and their merge into zero factors
//! - [`supernet`]: the mixed-precision model, forward/backward along one path
//! - [`sampler`]: uniform and resource-balanced configuration samplers
//! - [`train`]: corpus, pretraining and one-shot supernet training
//! - [`search`]: constrained sampling, correlation shrinking, subnet search
//! - [`harness`]: experiment configuration, pipeline stages and reports
//!
//! The `parallel` feature (on by default) runs batch evaluation and large
//! matrix products on rayon; without it the same code runs sequentially with
//! identical results.

pub mod adapter;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod par;
pub mod quant;
pub mod sampler;
pub mod search;
pub mod supernet;
pub mod tensor;
pub mod train;

pub use error::{QfaError, Result};
