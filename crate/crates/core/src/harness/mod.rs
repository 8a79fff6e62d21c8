// SPDX-License-Identifier: Apache-2.0

//! Drives a monitor from outside: an OS and enclave simulator, scenario
//! scripts, invariant checks, state-space exploration and interleavings.

pub mod action;
pub mod corpus;
pub mod explore;
pub mod fuzz;
pub mod interleave;
pub mod invariants;
pub mod loader;
pub mod scenario;
pub mod trace;

pub use action::{Action, Outcome};
pub use corpus::{defective_manifest, random_manifest, CorpusEntry, Defect};
pub use fuzz::{interrupt_injection, interrupt_injection_with, InjectionReport};
pub use explore::{explore, ExplorationReport, ExploreConfig, ExploreError};
pub use interleave::{check_atomicity, InterleaveError, Script};
pub use invariants::{check_state, check_step, Invariant, Violation};
pub use loader::{load_manifest, LoadError, Placement};
pub use scenario::{run_scenario, RunOptions, RunReport, Scenario, ScenarioError};
pub use trace::{Trace, TraceEvent};
