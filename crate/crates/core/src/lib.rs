//! Simulation and control of a thruster-assisted bipedal robot with
//! planar walking, reference-governed ground-force allocation and
//! model-predictive jumping.

// Negated comparisons deliberately reject NaN in validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod numerics;
pub mod parallel;
pub mod contact;
pub mod gait;
pub mod reduced_models;
pub mod control;
pub mod erg;
pub mod mpc;
pub mod harness;
