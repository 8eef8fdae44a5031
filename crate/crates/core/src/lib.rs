//! Simulation and analysis toolkit for linear-optical quantum teleportation
//! over a lossy free-space link.

pub mod coincidence;
pub mod error;
pub mod experiment;
pub mod fockoptics;
pub mod linkmodel;
pub mod qstate;
pub mod tags;
pub mod tomography;

pub use error::{Error, Result};
