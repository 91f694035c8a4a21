//! Closed-loop dual-hormone artificial pancreas: plant and control models,
//! continuous-discrete EKF, maximum-likelihood identification, switching
//! NMPC with safety heuristics, and a virtual-trial harness.
//!
//! The crate is `no_std` and needs only `alloc`; file formats, the CLI and
//! parallel execution live in the `dualap` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod cdekf;
pub mod dosing;
pub mod error;
pub mod model_ctrl;
pub mod model_sim;
pub mod nmpc;
pub mod numerics;
pub mod optim;
pub mod sysid;
pub mod trial;
pub mod units;

pub use error::{Error, Result};
