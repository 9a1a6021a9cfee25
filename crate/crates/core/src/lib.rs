//! Diverse sequence generation with a discrete target encoder.
//!
//! A target encoder maps each training target to a distribution over `N`
//! latent domains; the decoder is fed the matching domain embedding in place
//! of its start symbol. At inference one hypothesis is generated per domain.
//! The crate also carries the baselines (sampling, beam search, hard-EM
//! mixture of experts), multi-reference BLEU with its quality and diversity
//! derivatives, a synthetic one-to-many translation corpus and the
//! training-throughput benchmark.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod graph;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::{Graph, Gradients, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
