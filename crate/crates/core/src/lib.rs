//! Co-design of a tendon-driven soft gripper's block-wise stiffness and its
//! grasp pose.
//!
//! The crate is organised as a pipeline:
//!
//! * [`geometry`] builds the two-finger flexure gripper as a tetrahedral mesh
//!   and evaluates signed distances to objects and the ground.
//! * [`tendon`] places tendon waypoints by the uniform-pressure law and turns
//!   a tension into nodal forces.
//! * [`femsim`] time-steps the soft gripper against a rigid object and
//!   reports grasp outcomes.
//! * [`posegen`] samples and refines grasp poses.
//! * [`datagen`] runs simulator episodes in bulk and persists training records.
//! * [`surrogate`] is the differentiable network standing in for the simulator.
//! * [`codesign`] optimises stiffness and selects poses through the surrogate.
//! * [`pipeline`] and [`report`] glue the stages together for the CLI.

pub mod codesign;
pub mod datagen;
pub mod error;
pub mod exec;
pub mod femsim;
pub mod geometry;
pub mod pipeline;
pub mod posegen;
pub mod report;
pub mod seed;
pub mod surrogate;
pub mod tendon;

pub use error::{Error, Result};

/// Number of independently stiffened blocks across both fingers.
pub const NUM_BLOCKS: usize = 22;

/// Lowest admissible block Young's modulus (Pa).
pub const E_MIN: f64 = 0.7e6;

/// Highest admissible block Young's modulus (Pa).
pub const E_MAX: f64 = 24.0e6;
