//! Robust dataset learning.
//!
//! Learns a training set on which ordinary (natural) training produces an
//! adversarially robust classifier, by unrolling one gradient step of the
//! classifier and descending the adversarial loss of the result with respect
//! to the data. The crate also carries a numerical check-suite for the
//! strong/weak feature model in which the effect can be shown exactly with
//! linear soft-margin SVMs.

pub mod attacks;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod learn;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
