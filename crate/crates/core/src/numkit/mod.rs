//! Dense numeric kernel shared by the MoE model and the activation predictor.
//!
//! Everything is `f64`, row-major, and deterministic. Gradients for every
//! differentiable primitive live next to the forward pass so the networks
//! built on top can backpropagate by hand.

mod activations;
mod gradcheck;
pub(crate) mod matrix;
mod optim;
mod rng;
pub(crate) mod select;

pub use activations::{
    log_sum_exp, relu, sigmoid, softmax, softmax_backward, softmax_in_place, sparsemax,
    sparsemax_backward, sparsemax_in_place, sparsemax_threshold, ProbVector,
};
pub use gradcheck::{grad_check, GradCheck};
pub use matrix::{Matrix, ParamSet};
pub use optim::AdamW;
pub use rng::Rng;
pub use select::{argmax, topk};
