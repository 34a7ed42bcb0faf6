//! Self-supervised representation learning with multi-segment softmax codes.
//!
//! Two augmented views of each sample pass through a shared encoder and
//! projector. The projector output is split into segments, each normalized
//! to a distribution over its units, and trained with a masked joint-entropy
//! term that spreads a batch evenly over units plus an invariance term that
//! makes the two views agree.
//!
//! Gradients come from a small reverse-mode tape in [`diffcore`]; everything
//! is seeded and runs single-threaded, so identical inputs reproduce every
//! number bit for bit.

pub mod coder;
pub mod data;
pub mod diagnostics;
pub mod diffcore;
pub mod error;
pub mod loss;
pub mod model;
pub mod trainer;

pub use coder::{ProbCode, SegmentConfig};
pub use error::{Error, Result};
pub use loss::LossBreakdown;
