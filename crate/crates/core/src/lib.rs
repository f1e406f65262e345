//! Core algorithms for data-aware expert offloading in mixture-of-experts
//! serving.
//!
//! The crate is `no_std` and only needs `alloc`. Everything here is a pure
//! function of its inputs and an explicit seed: the dense numeric kernel, a
//! small switch-routed MoE classifier with exact gradients, the sparse-attention
//! LSTM that predicts expert activations ahead of inference, the two-tier
//! residency planner with FIFO eviction, and the sparsity probes used to measure
//! cross-token dependence of routing decisions.
//!
//! IO, threads, clocks, file formats and the command line live in the `sida`
//! companion crate.
#![no_std]

extern crate alloc;

pub mod corpus;
pub mod error;
pub mod model;
pub mod numkit;
pub mod offload;
pub mod predictor;
pub mod probe;

pub use error::{Error, Result};
