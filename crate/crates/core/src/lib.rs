// SPDX-License-Identifier: Apache-2.0

//! Reference security monitor for enclave isolation on a simulated
//! multiprocessor, with a measurement and attestation stack and a harness
//! that drives an adversarial OS against it.

pub mod attestation;
pub mod crypto;
pub mod error;
pub mod harness;
pub mod machine;
pub mod manifest;
pub mod measurement;
pub mod monitor;
pub mod resource;
pub mod statehash;
pub mod types;

pub use error::{Error, Result};
pub use monitor::{ApiCall, ApiResult, ApiValue, Caller, MonitorOptions, SecurityMonitor};
