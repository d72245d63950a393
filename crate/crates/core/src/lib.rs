//! Class-incremental learning with multi-granularity regularized re-balancing.
//!
//! A small MLP learns classes that arrive in phases. Each phase trains on new
//! data plus a bounded exemplar memory with a class-balanced loss, distills
//! from the previous phase's frozen model, regularizes towards hierarchy-derived
//! soft labels, and finally retrains the classifier on a held-out balanced set.

pub mod data;
pub mod error;
pub mod experiment;
pub mod hierarchy;
pub mod losses;
pub mod memory;
pub mod network;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};

/// Index of a class in the dataset's label space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub usize);

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
