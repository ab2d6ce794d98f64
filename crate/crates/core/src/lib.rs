//! Core numerics for distributed M-estimation.
//!
//! Everything in this crate is pure computation over owned values: dense
//! linear algebra, the criterion models and their derivatives, the local
//! Newton solver, the aggregation estimators (simple averaging, resampled
//! averaging, one-step update, sandwich covariance) and the message codec
//! shared by every transport. It builds without `std` (only `alloc` is
//! needed); IO, randomness and networking live in the `onestep` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod estimators;
pub mod linalg;
pub mod model;
pub mod solver;
pub mod special;
pub mod wire;

pub use estimators::{AggregationInput, EstimatorError, GradHess, MachineReport, SandwichCovariance};
pub use linalg::{Definiteness, LinalgError, Matrix, Vector};
pub use model::{Criterion, Evaluation, ModelError, ModelSpec, Sample, Shard};
pub use solver::{SolveConfig, SolveError, SolveResult};
pub use wire::{Message, MessageKind, Payload, Round, WireError};

/// Identifier of a worker machine. Workers are numbered `1..=k`; `0` is
/// reserved for the coordinator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MachineId(pub u32);

impl MachineId {
    pub const COORDINATOR: MachineId = MachineId(0);
}

impl core::fmt::Display for MachineId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}", self.0)
    }
}
