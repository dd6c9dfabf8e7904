//! Eco-driving for a connected vehicle on a signalized route under bounded
//! localization noise: plant and observer simulation, data-driven robust
//! controllable sets and cost-to-go, a convex MPC with tightened constraints,
//! and closed-loop training/evaluation harnesses.

pub mod energy;
pub mod geometry;
mod linalg;
pub mod lp;
pub mod plant;

pub mod config;
pub mod controller;
pub mod learning;
pub mod qp;
pub mod sim;
pub mod traffic;
