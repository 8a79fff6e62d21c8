// SPDX-License-Identifier: Apache-2.0

//! Breadth-first exploration of every state reachable from boot within a
//! depth bound, with the invariant set checked on every state and every
//! transition.
//!
//! The OS may issue any call the action alphabet below can express; each
//! running enclave may issue any enclave call. Arguments are drawn from a
//! small fixed vocabulary so the reachable set stays finite: two enclave
//! slots in the metadata arena, the built-in images, every memory region,
//! and one nonzero data word.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::harness::action::{apply, Action};
use crate::harness::invariants::{check_state, check_step, Invariant, Violation};
use crate::harness::loader::{staging_page, Placement};
use crate::machine::{ConfigError, MachineConfig};
use crate::monitor::{ApiCall, EnclaveState, MonitorOptions, Mutation, SecurityMonitor, ThreadState};
use crate::resource::{ResourceId, ResourceState};
use crate::statehash::fingerprint;
use crate::types::{EnclaveId, FaultKind, PhysAddr, ProtectionDomain, ThreadId};

/// Value written by actors. Any nonzero word will do.
pub const DATA_WORD: u64 = 0x5a5a;
/// Launchable images.
pub const IMAGES: [&str; 2] = ["app0", "signing"];

#[derive(Debug, Clone)]
pub struct ExploreConfig {
    pub config_name: String,
    pub config: MachineConfig,
    pub options: MonitorOptions,
    pub max_depth: usize,
    /// Cap on distinct states; exceeding it aborts the run.
    pub budget: usize,
    /// Stop at the first violating state instead of exploring the full bound.
    pub stop_on_violation: bool,
}

impl ExploreConfig {
    pub fn minimal(max_depth: usize) -> Self {
        ExploreConfig {
            config_name: "minimal".into(),
            config: MachineConfig::minimal(),
            options: MonitorOptions::default(),
            max_depth,
            budget: 2_000_000,
            stop_on_violation: false,
        }
    }

    pub fn with_mutation(mut self, m: Mutation) -> Self {
        self.options.mutations.insert(m);
        self
    }
}

/// A violation and the shortest action sequence reaching it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counterexample {
    pub violation: Violation,
    pub actions: Vec<Action>,
}

impl Counterexample {
    pub fn depth(&self) -> usize {
        self.actions.len()
    }

    /// A scenario file that replays the counterexample.
    pub fn to_scenario(&self, config_name: &str, mutations: &BTreeSet<Mutation>) -> String {
        let mut s = String::new();
        writeln!(s, "# counterexample: {}", self.violation).unwrap();
        writeln!(s, "machine {config_name}").unwrap();
        for m in mutations {
            writeln!(s, "mutation {m}").unwrap();
        }
        for a in &self.actions {
            writeln!(s, "{}", a.render()).unwrap();
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplorationReport {
    pub states_visited: usize,
    pub transitions: usize,
    /// Deepest level that produced a new state.
    pub depth: usize,
    /// First counterexample found for each violated invariant.
    pub violations: Vec<Counterexample>,
}

impl ExplorationReport {
    pub fn violated(&self, invariant: Invariant) -> Option<&Counterexample> {
        self.violations.iter().find(|c| c.violation.invariant == invariant)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExploreError {
    #[error("state budget of {budget} exceeded at depth {depth}")]
    BudgetExceeded { budget: usize, depth: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Metadata slot `k` (0 or 1): enclave, its first thread, a spare thread.
fn slot(arena: PhysAddr, k: u64) -> (EnclaveId, ThreadId, ThreadId) {
    let base = arena.0 + k * 0x1000;
    (EnclaveId(base), ThreadId(base + 0x800), ThreadId(base + 0xc00))
}

fn memory_units(sm: &SecurityMonitor) -> Vec<ResourceId> {
    sm.machine().backend.units().into_iter().map(ResourceId::from).collect()
}

/// Every action enabled in `sm`. Actions that are certain to be rejected
/// for a reason independent of their arguments are left out.
pub fn alphabet(sm: &SecurityMonitor) -> Vec<Action> {
    let mut out = Vec::new();
    let arena = sm.metadata_arena().base;
    let units = memory_units(sm);
    let live: Vec<EnclaveId> = sm
        .enclaves()
        .iter()
        .filter(|(_, e)| e.state != EnclaveState::Deleted)
        .map(|(eid, _)| *eid)
        .collect();
    let record = |id: &ResourceId| sm.resources().get(id).copied();

    // Launches into a free slot take the highest OS-owned unit.
    let os_unit = units
        .iter()
        .rev()
        .find(|u| record(u).is_some_and(|r| r.owner == ProtectionDomain::UntrustedOS && r.state == ResourceState::Owned));
    for k in 0..2 {
        let (eid, tid, _) = slot(arena, k);
        let free = !sm.enclaves().contains_key(&eid) && !sm.threads().contains_key(&tid);
        if let (true, Some(unit)) = (free, os_unit) {
            if staging_page(sm, &[*unit]).is_some() {
                for image in IMAGES {
                    out.push(Action::Launch {
                        image: image.to_string(),
                        placement: Placement {
                            eid,
                            tids: vec![tid],
                            units: vec![*unit],
                        },
                    });
                }
            }
        }
    }

    let os = |call| Action::Os(call);
    for unit in &units {
        let Some(r) = record(unit) else { continue };
        match r.state {
            ResourceState::Owned if r.owner == ProtectionDomain::UntrustedOS => {
                out.push(os(ApiCall::BlockResource(*unit)));
                let pa = sm.machine().backend.unit_range(unit.memory_unit().unwrap()).unwrap().base;
                out.push(Action::OsWrite(pa, DATA_WORD));
            }
            ResourceState::Blocked => out.push(os(ApiCall::CleanResource(*unit))),
            ResourceState::Clean => {
                out.push(os(ApiCall::GrantResource(*unit, ProtectionDomain::UntrustedOS)));
                for e in &live {
                    out.push(os(ApiCall::GrantResource(*unit, ProtectionDomain::Enclave(*e))));
                }
            }
            ResourceState::Offered(ProtectionDomain::UntrustedOS) => out.push(os(ApiCall::AcceptResource(*unit))),
            _ => {}
        }
    }

    for (tid, t) in sm.threads() {
        let Some(r) = record(&ResourceId::Thread(*tid)) else { continue };
        match r.state {
            ResourceState::Blocked => out.push(os(ApiCall::CleanResource(ResourceId::Thread(*tid)))),
            ResourceState::Clean => {
                for e in &live {
                    out.push(os(ApiCall::GrantResource(ResourceId::Thread(*tid), ProtectionDomain::Enclave(*e))));
                }
            }
            _ => {}
        }
        if let (Some(eid), ThreadState::Assigned) = (t.owner, t.state) {
            if sm.enclave(eid).is_some_and(|e| e.state == EnclaveState::Initialized) {
                for c in sm.machine().cores() {
                    if c.current_domain == ProtectionDomain::UntrustedOS {
                        out.push(os(ApiCall::EnterEnclave { eid, tid: *tid, core: c.id }));
                    }
                }
            }
        }
        if t.state == ThreadState::Scheduled && sm.mutated(Mutation::SkipThreadBusyCheck) {
            if let Some(eid) = t.owner {
                for c in sm.machine().cores() {
                    if c.current_domain == ProtectionDomain::UntrustedOS {
                        out.push(os(ApiCall::EnterEnclave { eid, tid: *tid, core: c.id }));
                    }
                }
            }
        }
    }

    for k in 0..2 {
        let (eid, _, spare) = slot(arena, k);
        let Some(e) = sm.enclave(eid) else { continue };
        if e.state != EnclaveState::Deleted {
            out.push(os(ApiCall::DeleteEnclave(eid)));
        }
        // Extending a sealed enclave must fail; a missing check shows here.
        if e.state == EnclaveState::Initialized && !sm.threads().contains_key(&spare) {
            out.push(os(ApiCall::CreateThread {
                eid,
                tid: spare,
                entry_point: e.evrange.base,
                fault_handlers: Default::default(),
            }));
        }
    }

    for c in sm.machine().cores() {
        let ProtectionDomain::Enclave(eid) = c.current_domain else { continue };
        let Some(e) = sm.enclave(eid) else { continue };
        let core = c.id;
        let call = |call| Action::Core(core, call);
        let base = e.evrange.base;
        out.push(Action::SetRegisters(core, DATA_WORD));
        out.push(Action::CoreWrite(core, base, DATA_WORD));
        out.push(Action::Interrupt(core));
        out.push(Action::Fault(core, FaultKind::PageFault));
        out.push(call(ApiCall::ExitEnclave));
        out.push(call(ApiCall::ResumeAex));
        out.push(call(ApiCall::ResumeFromFault));
        out.push(call(ApiCall::AcceptMail {
            index: 0,
            sender: ProtectionDomain::SecurityMonitor,
        }));
        for other in &live {
            out.push(call(ApiCall::AcceptMail {
                index: 0,
                sender: ProtectionDomain::Enclave(*other),
            }));
            out.push(call(ApiCall::SendMail {
                recipient: *other,
                message: b"hi".to_vec(),
            }));
        }
        out.push(call(ApiCall::GetMail(0)));
        out.push(call(ApiCall::GetAttestationKey));
        for unit in &units {
            let Some(r) = record(unit) else { continue };
            if r.owner == ProtectionDomain::Enclave(eid) && r.state == ResourceState::Owned {
                out.push(call(ApiCall::BlockResource(*unit)));
            }
            if r.state == ResourceState::Offered(ProtectionDomain::Enclave(eid)) {
                out.push(call(ApiCall::AcceptResource(*unit)));
            }
        }
        for tid in sm.threads().keys() {
            let Some(r) = record(&ResourceId::Thread(*tid)) else { continue };
            if r.state == ResourceState::Offered(ProtectionDomain::Enclave(eid)) {
                out.push(call(ApiCall::AcceptThread {
                    tid: *tid,
                    entry_point: base,
                    fault_handlers: Default::default(),
                }));
            }
            if r.owner == ProtectionDomain::Enclave(eid) && r.state == ResourceState::Owned && Some(*tid) != c.current_thread {
                out.push(call(ApiCall::BlockResource(ResourceId::Thread(*tid))));
            }
        }
    }
    out
}

struct Node {
    parent: usize,
    action: Option<Action>,
}

fn path(nodes: &[Node], mut index: usize) -> Vec<Action> {
    let mut out = Vec::new();
    while let Some(a) = &nodes[index].action {
        out.push(a.clone());
        index = nodes[index].parent;
    }
    out.reverse();
    out
}

/// Explores every state reachable within `cfg.max_depth` actions.
pub fn explore(cfg: &ExploreConfig) -> Result<ExplorationReport, ExploreError> {
    let boot = SecurityMonitor::boot(cfg.config.clone(), cfg.options.clone())?;
    let images = BTreeMap::new();
    let mut nodes = vec![Node {
        parent: 0,
        action: None,
    }];
    let mut visited: HashSet<u128> = HashSet::new();
    visited.insert(fingerprint(&boot));
    let mut report = ExplorationReport {
        states_visited: 1,
        transitions: 0,
        depth: 0,
        violations: Vec::new(),
    };
    let mut seen_invariants = BTreeSet::new();
    let mut record = |report: &mut ExplorationReport, violations: Vec<Violation>, actions: &dyn Fn() -> Vec<Action>| {
        for v in violations {
            if seen_invariants.insert(v.invariant) {
                report.violations.push(Counterexample {
                    violation: v,
                    actions: actions(),
                });
            }
        }
    };

    let initial = check_state(&boot);
    if !initial.is_empty() {
        record(&mut report, initial, &Vec::new);
        return Ok(report);
    }

    let mut frontier = vec![(0usize, boot)];
    for depth in 1..=cfg.max_depth {
        let mut next = Vec::new();
        for (index, sm) in &frontier {
            for action in alphabet(sm) {
                let mut post = sm.clone();
                apply(&mut post, &action, &images);
                report.transitions += 1;
                let step = check_step(sm, &post);
                let fresh = visited.insert(fingerprint(&post));
                if !fresh && step.is_empty() {
                    continue;
                }
                nodes.push(Node {
                    parent: *index,
                    action: Some(action),
                });
                let node = nodes.len() - 1;
                let mut violations = step;
                if fresh {
                    report.states_visited += 1;
                    report.depth = depth;
                    if report.states_visited > cfg.budget {
                        return Err(ExploreError::BudgetExceeded { budget: cfg.budget, depth });
                    }
                    violations.extend(check_state(&post));
                }
                if !violations.is_empty() {
                    record(&mut report, violations, &|| path(&nodes, node));
                    if cfg.stop_on_violation {
                        return Ok(report);
                    }
                    continue;
                }
                if fresh && depth < cfg.max_depth {
                    next.push((node, post));
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    Ok(report)
}
