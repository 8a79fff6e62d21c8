// SPDX-License-Identifier: Apache-2.0

//! Loads a manifest into a live monitor the way an OS would.

use thiserror::Error;

use crate::error::Error;
use crate::manifest::{Manifest, ManifestOp};
use crate::monitor::{ApiCall, ApiValue, Caller, SecurityMonitor, THREAD_METADATA_SIZE};
use crate::resource::{ResourceId, ResourceState};
use crate::types::{Digest, EnclaveId, PhysAddr, ProtectionDomain, ThreadId};

/// Where an enclave goes: its metadata slots and the memory units it gets.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Placement {
    pub eid: EnclaveId,
    /// Thread metadata slots, one per `thread` directive. Missing slots are
    /// taken from free monitor memory.
    pub tids: Vec<ThreadId>,
    /// Units handed to the enclave. OS-owned units are blocked and cleaned first.
    pub units: Vec<ResourceId>,
}

/// A load that the monitor refused.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{step} failed: {error}")]
pub struct LoadError {
    pub step: String,
    /// Index of the failing manifest operation, if the failure was in one.
    pub op_index: Option<usize>,
    pub error: Error,
}

impl LoadError {
    /// Loading rule the failure reports, as the offline tool names it.
    pub fn rule(&self) -> Option<&'static str> {
        self.error.load_rule()
    }
}

fn step_err(step: impl Into<String>, op_index: Option<usize>) -> impl FnOnce(Error) -> LoadError {
    let step = step.into();
    move |error| LoadError { step, op_index, error }
}

/// Highest OS-owned page outside `exclude`, for staging page contents.
pub fn staging_page(sm: &SecurityMonitor, exclude: &[ResourceId]) -> Option<PhysAddr> {
    let machine = sm.machine();
    let page = machine.page_size();
    (0..machine.config().page_count()).rev().map(|p| PhysAddr(p * page)).find(|pa| {
        let unit = machine.backend.unit_of(*pa);
        if unit.is_some_and(|u| exclude.contains(&u.into())) {
            return false;
        }
        match unit.and_then(|u| sm.resources().get(&u.into())) {
            Some(r) => r.owner == ProtectionDomain::UntrustedOS && r.state == ResourceState::Owned,
            None => machine.backend.accessible_by(*pa) == Some(ProtectionDomain::UntrustedOS),
        }
    })
}

/// Creates, populates and seals an enclave from `manifest`. Returns the
/// measurement reported by `init_enclave`. Stops at the first refused call,
/// leaving the effects of earlier calls in place.
pub fn load_manifest(sm: &mut SecurityMonitor, manifest: &Manifest, placement: &Placement) -> Result<Digest, LoadError> {
    let os = Caller::OS;
    let eid = placement.eid;
    sm.call(
        os,
        ApiCall::CreateEnclave {
            eid,
            evrange: manifest.evrange,
            mailbox_count: manifest.mailbox_count,
        },
    )
    .map_err(step_err("create_enclave", None))?;

    for unit in &placement.units {
        let rec = sm.resources().get(unit).copied();
        if rec.is_some_and(|r| r.owner == ProtectionDomain::UntrustedOS && r.state == ResourceState::Owned) {
            sm.call(os, ApiCall::BlockResource(*unit))
                .map_err(step_err(format!("block_resource {unit}"), None))?;
        }
        if sm.resources().get(unit).is_some_and(|r| r.state == ResourceState::Blocked) {
            sm.call(os, ApiCall::CleanResource(*unit))
                .map_err(step_err(format!("clean_resource {unit}"), None))?;
        }
        sm.call(os, ApiCall::GrantResource(*unit, ProtectionDomain::Enclave(eid)))
            .map_err(step_err(format!("grant_resource {unit}"), None))?;
    }

    let pages = sm.enclave_pages(eid);
    let page_size = sm.machine().page_size();
    let staging = staging_page(sm, &placement.units).ok_or(LoadError {
        step: "staging".into(),
        op_index: None,
        error: Error::OutOfEnclaveMemory,
    })?;
    let mut tids = placement.tids.iter().copied();

    let mut result = Ok(());
    for (i, op) in manifest.ops.iter().enumerate() {
        let outcome = match op {
            ManifestOp::PageTable { vaddr } => sm
                .call(os, ApiCall::AllocatePageTable { eid, vaddr: *vaddr })
                .map_err(step_err("allocate_page_table", Some(i))),
            ManifestOp::Load {
                vaddr, phys, perms, ..
            } => {
                let Some(contents) = manifest.page_contents(op, page_size) else {
                    result = Err(LoadError {
                        step: "load_page".into(),
                        op_index: Some(i),
                        error: Error::BadArgument,
                    });
                    break;
                };
                sm.machine_mut()
                    .memory
                    .write(staging, &contents, ProtectionDomain::UntrustedOS);
                // An index past the enclave's memory names a page it does not own.
                let dest = pages
                    .get(*phys as usize)
                    .map_or(staging, |ppn| PhysAddr(ppn * page_size));
                sm.call(
                    os,
                    ApiCall::LoadPage {
                        eid,
                        vaddr: *vaddr,
                        src: staging,
                        dest,
                        perms: *perms,
                    },
                )
                .map_err(step_err("load_page", Some(i)))
            }
            ManifestOp::Thread {
                entry_point,
                fault_handlers,
            } => {
                let tid = tids
                    .next()
                    .or_else(|| sm.free_metadata_slot(THREAD_METADATA_SIZE).map(|a| ThreadId(a.0)))
                    .ok_or(LoadError {
                        step: "create_thread".into(),
                        op_index: Some(i),
                        error: Error::BadAddress,
                    })?;
                sm.call(
                    os,
                    ApiCall::CreateThread {
                        eid,
                        tid,
                        entry_point: *entry_point,
                        fault_handlers: fault_handlers.clone(),
                    },
                )
                .map_err(step_err("create_thread", Some(i)))
            }
        };
        if let Err(e) = outcome {
            result = Err(e);
            break;
        }
    }
    let staging_ppn = staging.0 / page_size;
    sm.machine_mut().memory.zero_range(staging_ppn, 1);
    result?;

    match sm.call(os, ApiCall::InitEnclave(eid)).map_err(step_err("init_enclave", None))? {
        ApiValue::Measurement(d) => Ok(d),
        other => unreachable!("init_enclave returned {other:?}"),
    }
}
