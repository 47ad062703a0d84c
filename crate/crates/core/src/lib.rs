//! Temporal action parsing toolkit.
//!
//! Frame features are refined by stacked pattern-attention units
//! ([`model`]), trained with a within/across sub-action agreement loss plus
//! an action classification loss ([`losses`]), and parsed into sub-action
//! start frames from transitions of each frame's most-attended pattern
//! ([`parsing`]). [`metrics`] scores predicted starts against ground truth at
//! absolute and relative tolerances; [`baselines`] holds k-means and
//! temporal-convolution parsers for comparison.

pub mod baselines;
pub mod data;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod parsing;
pub mod types;

pub use error::{Error, Result};

pub use types::{ParseResult, Segmentation};
