//! Restrictive hierarchical semantic segmentation.
//!
//! Any dense multiclass backbone can be wrapped so that it predicts a class
//! tree one level at a time: root classes through independent sigmoids, child
//! classes through a softmax over each parent's children composed with the
//! parent probability. The crate covers the label space ([`hierarchy`]), data
//! preparation ([`dataprep`]), the probability composition and its gradients
//! ([`composition`]), the hierarchical losses ([`losses`]), a small
//! hand-differentiated network stack ([`nn`], [`model`]), evaluation
//! ([`metrics`]), training ([`trainer`]) and synthetic datasets ([`synthetic`]).

pub mod composition;
pub mod error;
pub mod dataprep;
pub mod hierarchy;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
