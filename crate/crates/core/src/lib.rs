//! Bi-level context-aware kernel networks for multi-label image annotation.
//!
//! The representation of a grid cell is refined by a stack of geometric
//! context layers whose weights are learnable directional adjacency matrices;
//! pooled image maps then pass through semantic context layers whose weight
//! is a learnable image-level adjacency. A one-vs-rest hinge head sits on
//! top, and the whole stack is trained by alternating classifier fits with
//! gradient descent on the context matrices over frozen sparsity supports.

pub mod cli;
pub mod context;
pub mod dataset;
pub mod error;
pub mod features;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod network;
pub mod pipeline;
pub mod svm;
pub mod train;

pub use error::{Error, Result};
pub use linalg::{BoolMatrix, Matrix};
