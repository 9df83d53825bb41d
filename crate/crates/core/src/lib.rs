//! Contact-aware dexterous manipulation stack.
//!
//! Tactile point-cloud force and center-of-pressure estimation, a tactile
//! position controller on top of hand kinematics, a conditional-VAE
//! behavior-cloning policy with action chunking, and a deterministic
//! quasi-static syringe-press simulator with its evaluation suites.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod action;
pub mod config;
pub mod controller;
pub mod episode;
pub mod error;
pub mod eval;
pub mod expert;
pub mod hand;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod tactile;

pub use error::{Error, Result};
