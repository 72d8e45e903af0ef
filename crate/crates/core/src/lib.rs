//! Quadruped locomotion control: convex MPC over a lumped-mass model feeding
//! a whole-body impulse controller, validated in a deterministic rigid-body
//! simulator.

pub mod command;
pub mod controller;
pub mod dynamics;
pub mod footstep;
pub mod gait;
pub mod harness;
pub mod model;
pub mod mpc;
pub mod qp;
pub mod sim;
pub mod spatial;
pub mod wbic;
