//! Trajectory tracking for a quadrotor flying close to walls, with a
//! near-wall suction model folded into a factor-graph MPC.

// `!(x > 0.0)` style checks are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod controller;
pub mod dynamics;
pub mod factors;
pub mod identification;
pub mod manifold;
pub mod sim;
pub mod solver;
pub mod suction;

pub use dynamics::{ControlInput, VehicleParams};
pub use manifold::State;
pub use suction::{PlaneFrame, SuctionParams};
