//! Context-guided point-goal navigation laboratory.
//!
//! A 2D kinematic simulator over occupancy grids, context-map construction and
//! corruption, classical planners, a small autodiff core with the recurrent
//! attention policy built on it, PPO training and an evaluation harness.

pub mod context;
pub mod episodes;
pub mod fixtures;
pub mod eval;
pub mod geometry;
pub mod kinematics;
pub mod nn;
pub mod planners;
pub mod policy;
pub mod sim;
pub mod training;
pub mod world;

pub use geometry::{normalize_angle, Point};
