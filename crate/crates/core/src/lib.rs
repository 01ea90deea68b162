// SPDX-License-Identifier: MIT OR Apache-2.0

//! Task adaptation by rotating attention-head outputs.
//!
//! A small decoder-only transformer ([`model`]) exposes a hook on the
//! concatenated head outputs of each attention block. [`intervention`]
//! supplies block-diagonal rotations (and a per-head rescaling baseline) for
//! that hook, [`objectives`] turns a handful of labelled examples into a
//! scalar score, and [`bayesopt`] searches the angles with a Gaussian process
//! whose covariance is the infinite-width deep ReLU network kernel.
//! [`memlab`] checks the OV-circuit algebra behind the method on single-layer
//! models, [`analysis`] provides logit-lens and unembedding diagnostics, and
//! [`taskforge`] generates synthetic tasks with planted spurious associations.

pub mod analysis;
pub mod bayesopt;
pub mod intervention;
pub mod linalg;
pub mod memlab;
pub mod model;
pub mod objectives;
pub mod taskforge;
