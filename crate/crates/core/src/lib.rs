//! Bag-aggregated contrastive distillation of small MLP encoders.
//!
//! A teacher embedding space is turned into bags of related instances
//! (k-nearest neighbors, spherical k-means or labels). A student is then
//! trained so that both an augmented view of each anchor and a view of a
//! bag-mate agree with the teacher's key for the anchor under InfoNCE against
//! a memory bank of past keys.

pub mod augment;
pub mod bagging;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod membank;
pub mod nets;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
