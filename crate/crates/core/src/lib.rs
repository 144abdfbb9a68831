//! Representer-point explanations for classifiers with a linear last layer.
//!
//! Given penultimate-layer features `f_i`, the last layer `Θ₁` is fitted with
//! an L2 penalty to a certified stationary point. At such a point every
//! pre-activation prediction splits exactly into per-training-point terms
//! `α_i f_iᵀ f_t`, where `α_i = −(1/2λn) ∂L_i/∂Φ_i`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod dataset;
pub mod debug_sim;
pub mod error;
pub mod influence;
pub mod numerics;
pub mod representer;
pub mod rpmx;
pub mod solver;
pub mod synth;
pub mod toy_net;

pub use error::{Error, Result};
pub use numerics::DenseMatrix;
