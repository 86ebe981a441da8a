//! Photonic-control co-design for neutral-atom gates.
//!
//! The crate models a photonic integrated circuit (PIC) that shapes the Raman
//! beams of a small neutral-atom register, simulates the resulting qubit
//! dynamics, and optimizes the voltage schedules driving the modulators.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffengine;
pub mod e2e;
pub mod error;
pub mod harness;
pub mod hwmodel;
pub mod linalg;
pub mod ppo;
pub mod qsim;
pub mod report;
pub mod sade_adam;
pub mod schedule;

pub use error::{QocError, Result};
