// SPDX-License-Identifier: Apache-2.0

//! Generic resource API: block, clean, grant, accept.

use super::{Caller, EnclaveState, Mailbox, Mutation, SecurityMonitor, ThreadMetadata, ThreadState};
use crate::error::{Error, Result};
use crate::resource::{ResourceId, ResourceState};
use crate::types::ProtectionDomain;

impl SecurityMonitor {
    pub(super) fn block_resource(&mut self, caller: &Caller, id: ResourceId) -> Result<()> {
        let rec = *self.resources.get(&id).ok_or(Error::NoSuchResource)?;
        if rec.owner != caller.domain {
            return Err(Error::NotOwner);
        }
        if rec.state != ResourceState::Owned {
            return Err(Error::WrongState);
        }
        match id {
            ResourceId::Core(core) => {
                let running = self.machine.core(core).ok_or(Error::NoSuchResource)?.current_domain;
                if running != ProtectionDomain::UntrustedOS {
                    return Err(Error::InUse);
                }
            }
            ResourceId::Thread(tid) => {
                let thread = self.threads.get_mut(&tid).ok_or(Error::NoSuchResource)?;
                if thread.state == ThreadState::Scheduled {
                    return Err(Error::InUse);
                }
                thread.state = ThreadState::Blocked;
            }
            _ => {}
        }
        self.resources.get_mut(&id).unwrap().state = ResourceState::Blocked;
        Ok(())
    }

    pub(super) fn clean_resource(&mut self, caller: &Caller, id: ResourceId) -> Result<()> {
        Self::require_os(caller)?;
        let rec = *self.resources.get(&id).ok_or(Error::NoSuchResource)?;
        if rec.state != ResourceState::Blocked {
            return Err(Error::WrongState);
        }
        let former = rec.owner.enclave();
        match id {
            ResourceId::Region(_) | ResourceId::Interval(_) => {
                let unit = id.memory_unit().unwrap();
                let range = self.machine.backend.unit_range(unit).expect("unit has a range");
                let page = self.machine.page_size();
                if !self.mutated(Mutation::SkipScrub) {
                    self.machine
                        .memory
                        .zero_range(range.base.0 / page, range.len / page);
                }
                if !self.mutated(Mutation::SkipTlbShootdown) {
                    self.machine.tlb_shootdown(range);
                }
                if let Some(eid) = former {
                    self.machine.unmap_range(eid, range);
                    if let Some(e) = self.enclaves.get_mut(&eid) {
                        e.page_table_pages
                            .retain(|ppn| !range.contains(crate::types::PhysAddr(ppn * page)));
                    }
                }
            }
            ResourceId::Core(core) => self.machine.clean_core(core),
            ResourceId::Thread(tid) => {
                if let Some(e) = former.and_then(|eid| self.enclaves.get_mut(&eid)) {
                    e.threads.remove(&tid);
                }
                self.threads.insert(tid, ThreadMetadata::zeroed(tid));
            }
            ResourceId::Mailbox { eid, index } => {
                if let Some(e) = self.enclaves.get_mut(&eid) {
                    e.mailboxes[index as usize] = Mailbox::default();
                }
            }
        }
        let rec = self.resources.get_mut(&id).unwrap();
        rec.owner = ProtectionDomain::UntrustedOS;
        rec.state = ResourceState::Clean;
        if let Some(unit) = id.memory_unit() {
            self.sync_grant(unit);
        }
        if let Some(eid) = former {
            self.maybe_free_enclave(eid);
        }
        Ok(())
    }

    pub(super) fn grant_resource(&mut self, caller: &Caller, id: ResourceId, to: ProtectionDomain) -> Result<()> {
        Self::require_os(caller)?;
        let rec = *self.resources.get(&id).ok_or(Error::NoSuchResource)?;
        if rec.state != ResourceState::Clean {
            return Err(Error::WrongState);
        }
        let target = match to {
            ProtectionDomain::SecurityMonitor => return Err(Error::BadArgument),
            ProtectionDomain::UntrustedOS => None,
            ProtectionDomain::Enclave(eid) => match self.enclaves.get(&eid) {
                Some(e) if e.state != EnclaveState::Deleted => Some(e.state),
                _ => return Err(Error::NoSuchDomain),
            },
        };
        match (id, target) {
            (ResourceId::Mailbox { .. }, _) => return Err(Error::BadArgument),
            (ResourceId::Core(_), Some(_)) => return Err(Error::BadArgument),
            (ResourceId::Thread(_), None) => return Err(Error::BadArgument),
            _ => {}
        }
        if target == Some(EnclaveState::Initialized) && !self.options().allow_post_init_accept {
            return Err(Error::WrongState);
        }
        let rec = self.resources.get_mut(&id).unwrap();
        // A loading enclave cannot run to accept anything, so memory granted
        // to it is owned on the spot.
        if target == Some(EnclaveState::Loading) && id.memory_unit().is_some() {
            rec.owner = to;
            rec.state = ResourceState::Owned;
        } else {
            rec.state = ResourceState::Offered(to);
        }
        if let Some(unit) = id.memory_unit() {
            self.sync_grant(unit);
        }
        Ok(())
    }

    pub(super) fn accept_resource(&mut self, caller: &Caller, id: ResourceId) -> Result<()> {
        let rec = *self.resources.get(&id).ok_or(Error::NoSuchResource)?;
        if rec.state != ResourceState::Offered(caller.domain) {
            return Err(Error::NotOffered);
        }
        if matches!(id, ResourceId::Thread(_)) {
            // Threads need an entry point: see accept_thread.
            return Err(Error::BadArgument);
        }
        let rec = self.resources.get_mut(&id).unwrap();
        rec.owner = caller.domain;
        rec.state = ResourceState::Owned;
        if let Some(unit) = id.memory_unit() {
            self.sync_grant(unit);
        }
        Ok(())
    }

    pub fn owner_of(&self, id: ResourceId) -> Result<(ProtectionDomain, ResourceState)> {
        let rec = self.resources.get(&id).ok_or(Error::NoSuchResource)?;
        Ok((rec.owner, rec.state))
    }

    /// Releases a deleted enclave's metadata once it holds nothing.
    pub(super) fn maybe_free_enclave(&mut self, eid: crate::types::EnclaveId) {
        let Some(e) = self.enclaves.get(&eid) else {
            return;
        };
        if e.state != EnclaveState::Deleted {
            return;
        }
        let domain = ProtectionDomain::Enclave(eid);
        if self.resources.held_by(domain).next().is_some() {
            return;
        }
        for index in 0..e.mailbox_count {
            self.resources.remove(&ResourceId::Mailbox { eid, index });
        }
        self.enclaves.remove(&eid);
        self.machine.remove_space(eid);
    }
}
