//! Structure-faithful machine unlearning on small differentiable models.
//!
//! The crate builds a complete desk-scale benchmark: synthetic datasets and
//! forget splits ([`datakit`]), a reverse-mode differentiation core
//! ([`diffcore`]), an extractor/projector/classifier model family
//! ([`model`]), fixed semantic anchors ([`anchor`]), adversarial surrogate
//! probes ([`probe`]), the structure-preservation losses ([`structloss`]),
//! StructGuard plus baseline unlearners ([`unlearn`]) and the evaluation
//! harness ([`harness`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchor;
pub mod datakit;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod model;
pub mod probe;
pub mod rng;
pub mod structloss;
pub mod unlearn;

pub use error::{Error, Result};
