//! Verifiable round-robin token scheduling for smart-home device networks.
//!
//! A hub circulates a constant-size encrypted token around a ring of
//! devices. Commands travel inside the token as RSA time-lock puzzles, so a
//! device cannot actuate before it has done the prescribed number of
//! sequential squarings, and the owner can check the work cheaply through
//! the totient. Because every hop carries an identical-looking frame, a
//! passive listener learns nothing about which device acted or when.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod adversary;
pub mod cli;
pub mod crypto;
pub mod protocol;
pub mod schedule;
pub mod simnet;
pub mod token;

/// Identifier of a home device. The hub is never a `DeviceId`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceId(pub u32);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "D{}", self.0)
    }
}

/// Simulated time in microseconds.
pub type Micros = u64;
