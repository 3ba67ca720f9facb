//! Kinetic transport in non-convex domains: backward exit times, grazing
//! classification, hard-potential collision operators, mild solutions of the
//! linearized Boltzmann equation and jump measurements on the solutions.

pub mod collision_ops;
pub mod geometry;
pub mod jump_lab;
pub mod mild_solver;
pub mod phase_topology;
pub mod quadrature;
pub mod trajectories;

pub use geometry::{ImplicitDomain, Vec3};
