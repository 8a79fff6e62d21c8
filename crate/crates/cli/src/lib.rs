// SPDX-License-Identifier: Apache-2.0

//! Command-line front end for the sanctorum monitor: scenario runner,
//! offline measurement, bundle verification and state exploration.

pub mod commands;
pub mod measure;

pub use commands::execute;
