//! Open-set semi-supervised learning at desk scale.
//!
//! A dual-head MLP (K-way class head plus a scalar OOD head) is trained by
//! alternating between Adam updates of the network parameters and direct
//! reassignment of per-sample OOD scores on the unlabeled pool. An Otsu
//! threshold over the score histogram selects the unlabeled samples treated
//! as in-distribution each epoch; only those feed the semi-supervised loss.

pub mod curriculum;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
