//! Flexible activation steering with backtracking.
//!
//! The pipeline has two stages. Anchoring fits a classifier to every
//! attention head's last-token activations, keeps the `k` heads with the best
//! validation accuracy and turns each classifier into a steering direction.
//! Generation then tracks the mean deviation probability of those heads after
//! every token; on the first detection it rolls the cache back `s` tokens and
//! regenerates the rest of the response with the directions added to the
//! heads' outputs at a strength proportional to the detected deviation.

pub mod anchoring;
pub mod bridge;
pub mod controller;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod model;
pub mod synthetic;
pub mod vocab;

mod files;

pub use error::{Error, Result};
