// SPDX-License-Identifier: Apache-2.0

//! Enclave and thread metadata and their lifecycles.

use std::collections::BTreeSet;

use super::{
    enclave_metadata_size, Caller, Mailbox, Mutation, SecurityMonitor, MAX_MAILBOXES, THREAD_METADATA_SIZE,
};
use crate::error::{Error, OrderRule, Result};
use crate::machine::Access;
use crate::measurement::{MeasurementRecord, MeasurementState};
use crate::resource::{ResourceId, ResourceRecord, ResourceState};
use crate::types::{
    AccessKind, CoreId, Digest, EnclaveId, FaultHandlers, Perms, PhysAddr, ProtectionDomain, RegisterFile,
    ThreadId, VirtAddr, VirtRange, AEX_FLAG_REGISTER, REGISTER_COUNT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EnclaveState {
    Loading,
    Initialized,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EnclaveMetadata {
    pub eid: EnclaveId,
    pub state: EnclaveState,
    pub evrange: VirtRange,
    pub mailbox_count: u32,
    pub measurement: MeasurementState,
    pub final_measurement: Option<Digest>,
    pub threads: BTreeSet<ThreadId>,
    pub mailboxes: Vec<Mailbox>,
    /// Highest physical page consumed by loading so far.
    pub load_cursor: Option<u64>,
    pub data_loaded: bool,
    pub page_table_pages: BTreeSet<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ThreadState {
    Created,
    Assigned,
    Scheduled,
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ThreadMetadata {
    pub tid: ThreadId,
    pub owner: Option<EnclaveId>,
    pub state: ThreadState,
    pub core: Option<CoreId>,
    pub entry_point: VirtAddr,
    pub fault_handlers: FaultHandlers,
    pub aex_present: bool,
    pub aex_state: RegisterFile,
    pub aex_pc: u64,
    pub fault_state: RegisterFile,
    pub fault_pc: u64,
    pub in_fault_handler: bool,
}

impl ThreadMetadata {
    pub fn zeroed(tid: ThreadId) -> Self {
        ThreadMetadata {
            tid,
            owner: None,
            state: ThreadState::Created,
            core: None,
            entry_point: VirtAddr(0),
            fault_handlers: FaultHandlers::new(),
            aex_present: false,
            aex_state: [0; REGISTER_COUNT],
            aex_pc: 0,
            fault_state: [0; REGISTER_COUNT],
            fault_pc: 0,
            in_fault_handler: false,
        }
    }

    /// True if every slot other than the id holds its reset value.
    pub fn is_zeroed(&self) -> bool {
        *self == Self::zeroed(self.tid)
    }
}

fn in_range(evrange: &VirtRange, entry: VirtAddr, handlers: &FaultHandlers) -> bool {
    evrange.contains(entry) && handlers.values().all(|h| evrange.contains(*h))
}

impl SecurityMonitor {
    fn enclave_for_loading(&self, eid: EnclaveId) -> Result<&super::EnclaveMetadata> {
        let e = self.enclaves.get(&eid).ok_or(Error::NoSuchEnclave)?;
        match e.state {
            EnclaveState::Loading => Ok(e),
            EnclaveState::Initialized if self.mutated(Mutation::SkipSealCheck) => Ok(e),
            _ => Err(Error::WrongState),
        }
    }

    pub(super) fn create_enclave(
        &mut self,
        caller: &Caller,
        eid: EnclaveId,
        evrange: VirtRange,
        mailbox_count: u32,
    ) -> Result<()> {
        Self::require_os(caller)?;
        self.check_metadata_slot(eid.addr(), enclave_metadata_size(mailbox_count.min(MAX_MAILBOXES)))?;
        let page = self.machine.page_size();
        let aligned = evrange.base.is_aligned(page) && evrange.len.is_multiple_of(page);
        if !aligned || evrange.len == 0 || evrange.base.0.checked_add(evrange.len).is_none() {
            return Err(Error::BadArgument);
        }
        if mailbox_count > MAX_MAILBOXES {
            return Err(Error::BadArgument);
        }
        let measurement = MeasurementState::new().extended(&MeasurementRecord::Create {
            evrange,
            mailbox_count,
            sm_image_hash: self.platform.identity.sm_image_hash(),
            capabilities: self.capabilities(),
        });
        self.enclaves.insert(
            eid,
            EnclaveMetadata {
                eid,
                state: EnclaveState::Loading,
                evrange,
                mailbox_count,
                measurement,
                final_measurement: None,
                threads: BTreeSet::new(),
                mailboxes: vec![Mailbox::default(); mailbox_count as usize],
                load_cursor: None,
                data_loaded: false,
                page_table_pages: BTreeSet::new(),
            },
        );
        for index in 0..mailbox_count {
            self.resources.insert(
                ResourceId::Mailbox { eid, index },
                ResourceRecord::owned(ProtectionDomain::Enclave(eid)),
            );
        }
        self.machine.install_space(eid, evrange);
        Ok(())
    }

    fn check_vaddr(&self, eid: EnclaveId, vaddr: VirtAddr) -> Result<()> {
        let e = &self.enclaves[&eid];
        if !vaddr.is_aligned(self.machine.page_size()) || !e.evrange.contains(vaddr) {
            return Err(Error::BadArgument);
        }
        Ok(())
    }

    pub(super) fn allocate_page_table(&mut self, caller: &Caller, eid: EnclaveId, vaddr: VirtAddr) -> Result<()> {
        Self::require_os(caller)?;
        let e = self.enclave_for_loading(eid)?;
        self.check_vaddr(eid, vaddr)?;
        if e.data_loaded {
            return Err(Error::OrderViolation(OrderRule::TablesAfterData));
        }
        let cursor = e.load_cursor;
        let ppn = self
            .enclave_pages(eid)
            .into_iter()
            .find(|p| cursor.is_none_or(|c| *p > c))
            .ok_or(Error::OutOfEnclaveMemory)?;
        let e = self.enclaves.get_mut(&eid).unwrap();
        e.load_cursor = Some(ppn);
        e.page_table_pages.insert(ppn);
        e.measurement.extend(&MeasurementRecord::PageTableAlloc { vaddr });
        Ok(())
    }

    pub(super) fn load_page(
        &mut self,
        caller: &Caller,
        eid: EnclaveId,
        vaddr: VirtAddr,
        src: PhysAddr,
        dest: PhysAddr,
        perms: Perms,
    ) -> Result<()> {
        Self::require_os(caller)?;
        let e = self.enclave_for_loading(eid)?;
        let cursor = e.load_cursor;
        self.check_vaddr(eid, vaddr)?;
        let page = self.machine.page_size();
        if !src.is_aligned(page) || !dest.is_aligned(page) {
            return Err(Error::BadArgument);
        }
        if self
            .machine
            .check_access(ProtectionDomain::UntrustedOS, src, AccessKind::Read)
            .map_err(|_| Error::BadArgument)?
            == Access::Denied
        {
            return Err(Error::BadArgument);
        }
        let owned = self
            .unit_record(dest)
            .is_some_and(|(_, r)| r.owner == ProtectionDomain::Enclave(eid) && r.state == ResourceState::Owned);
        if !owned {
            return Err(Error::BadArgument);
        }
        let space = self.machine.space(eid).expect("enclave has an address space");
        if space.table.mapping.contains_key(&(vaddr.0 / page)) {
            return Err(Error::AliasViolation);
        }
        let dest_ppn = dest.0 / page;
        if cursor.is_some_and(|c| dest_ppn <= c) {
            return Err(Error::OrderViolation(OrderRule::Descending));
        }
        let contents = self.machine.memory.read_page(src.0 / page);
        self.machine
            .memory
            .write_page(dest_ppn, &contents, ProtectionDomain::Enclave(eid));
        self.machine.map_enclave_page(eid, vaddr.0 / page, dest_ppn, perms);
        let e = self.enclaves.get_mut(&eid).unwrap();
        e.load_cursor = Some(dest_ppn);
        e.data_loaded = true;
        e.measurement.extend(&MeasurementRecord::LoadPage {
            vaddr,
            perms,
            contents: &contents,
        });
        Ok(())
    }

    pub(super) fn share_memory(&mut self, caller: &Caller, eid: EnclaveId, pa: PhysAddr) -> Result<()> {
        Self::require_os(caller)?;
        let e = self.enclaves.get(&eid).ok_or(Error::NoSuchEnclave)?;
        if e.state != EnclaveState::Loading {
            return Err(Error::WrongState);
        }
        if !pa.is_aligned(self.machine.page_size()) || pa.0 >= self.machine.config().phys_memory_bytes {
            return Err(Error::BadArgument);
        }
        let os_owned = match self.unit_record(pa) {
            Some((_, r)) => r.owner == ProtectionDomain::UntrustedOS && r.state == ResourceState::Owned,
            None => self.machine.backend.owner_of(pa) == ProtectionDomain::UntrustedOS,
        };
        if !os_owned {
            return Err(Error::NotOwner);
        }
        let ppn = self.machine.ppn(pa);
        self.machine.share_page(eid, ppn);
        Ok(())
    }

    pub(super) fn create_thread(
        &mut self,
        caller: &Caller,
        eid: EnclaveId,
        tid: ThreadId,
        entry_point: VirtAddr,
        fault_handlers: &FaultHandlers,
    ) -> Result<()> {
        Self::require_os(caller)?;
        let e = self.enclave_for_loading(eid)?;
        if !in_range(&e.evrange, entry_point, fault_handlers) {
            return Err(Error::BadArgument);
        }
        self.check_metadata_slot(tid.addr(), THREAD_METADATA_SIZE)?;
        self.threads.insert(
            tid,
            ThreadMetadata {
                owner: Some(eid),
                state: ThreadState::Assigned,
                entry_point,
                fault_handlers: fault_handlers.clone(),
                ..ThreadMetadata::zeroed(tid)
            },
        );
        self.resources.insert(
            ResourceId::Thread(tid),
            ResourceRecord::owned(ProtectionDomain::Enclave(eid)),
        );
        let e = self.enclaves.get_mut(&eid).unwrap();
        e.threads.insert(tid);
        e.measurement.extend(&MeasurementRecord::CreateThread {
            entry_point,
            fault_handlers,
        });
        Ok(())
    }

    pub(super) fn init_enclave(&mut self, caller: &Caller, eid: EnclaveId) -> Result<Digest> {
        Self::require_os(caller)?;
        let e = self.enclaves.get_mut(&eid).ok_or(Error::NoSuchEnclave)?;
        if e.state != EnclaveState::Loading {
            return Err(Error::WrongState);
        }
        if e.threads.is_empty() {
            return Err(Error::NoThreads);
        }
        let digest = e.measurement.peek();
        e.final_measurement = Some(digest);
        e.state = EnclaveState::Initialized;
        Ok(digest)
    }

    pub(super) fn enter_enclave(&mut self, caller: &Caller, eid: EnclaveId, tid: ThreadId, core: CoreId) -> Result<()> {
        Self::require_os(caller)?;
        let core_state = self.machine.core(core).ok_or(Error::BadArgument)?;
        let e = self.enclaves.get(&eid).ok_or(Error::NoSuchEnclave)?;
        if e.state != EnclaveState::Initialized {
            return Err(Error::WrongState);
        }
        let t = self.threads.get(&tid).ok_or(Error::NoSuchResource)?;
        if t.owner != Some(eid) {
            return Err(Error::NotOwner);
        }
        match t.state {
            ThreadState::Assigned => {}
            ThreadState::Scheduled if self.mutated(Mutation::SkipThreadBusyCheck) => {}
            ThreadState::Scheduled => return Err(Error::ThreadBusy),
            _ => return Err(Error::WrongState),
        }
        let core_free = core_state.current_domain == ProtectionDomain::UntrustedOS
            && self.resources.get(&ResourceId::Core(core)) == Some(&ResourceRecord::owned(ProtectionDomain::UntrustedOS));
        if !core_free {
            return Err(Error::CoreBusy);
        }
        let (entry, aex_present) = (t.entry_point, t.aex_present);
        self.machine.clean_core(core);
        let c = self.machine.core_mut(core).unwrap();
        c.current_domain = ProtectionDomain::Enclave(eid);
        c.current_thread = Some(tid);
        c.pc = entry.0;
        c.set_register(AEX_FLAG_REGISTER, u64::from(aex_present));
        let t = self.threads.get_mut(&tid).unwrap();
        t.state = ThreadState::Scheduled;
        t.core = Some(core);
        Ok(())
    }

    /// Deschedules the thread on `core` and returns the core to the OS.
    fn deschedule(&mut self, core: CoreId, tid: ThreadId) {
        let t = self.threads.get_mut(&tid).unwrap();
        t.state = ThreadState::Assigned;
        t.core = None;
        t.in_fault_handler = false;
        self.machine.clean_core(core);
    }

    pub(super) fn exit_enclave(&mut self, caller: &Caller) -> Result<()> {
        let (_, core, tid) = self.running(caller).map_err(|_| Error::NotInEnclave)?;
        self.threads.get_mut(&tid).unwrap().aex_present = false;
        self.deschedule(core, tid);
        Ok(())
    }

    /// Asynchronous enclave exit: saves the thread's registers, flags the
    /// thread, and cleans the core before anything is delegated to the OS.
    pub fn aex(&mut self, core: CoreId) -> Result<()> {
        let c = self.machine.core(core).ok_or(Error::BadArgument)?;
        let (ProtectionDomain::Enclave(_), Some(tid)) = (c.current_domain, c.current_thread) else {
            return Err(Error::NotInEnclave);
        };
        let (regs, pc) = (c.registers, c.pc);
        let skip_save = self.mutated(Mutation::SkipAexSave);
        let t = self.threads.get_mut(&tid).unwrap();
        if !skip_save {
            t.aex_state = regs;
            t.aex_pc = pc;
        }
        t.aex_present = true;
        if self.mutated(Mutation::SkipCoreClean) {
            let t = self.threads.get_mut(&tid).unwrap();
            t.state = ThreadState::Assigned;
            t.core = None;
            t.in_fault_handler = false;
            let c = self.machine.core_mut(core).unwrap();
            c.current_domain = ProtectionDomain::UntrustedOS;
            c.current_thread = None;
        } else {
            self.deschedule(core, tid);
        }
        Ok(())
    }

    pub(super) fn delete_enclave(&mut self, caller: &Caller, eid: EnclaveId) -> Result<()> {
        Self::require_os(caller)?;
        let e = self.enclaves.get(&eid).ok_or(Error::NoSuchEnclave)?;
        if e.state == EnclaveState::Deleted {
            return Err(Error::NoSuchEnclave);
        }
        let scheduled = self
            .threads
            .values()
            .any(|t| t.owner == Some(eid) && t.state == ThreadState::Scheduled);
        if scheduled {
            return Err(Error::ThreadsScheduled);
        }
        let domain = ProtectionDomain::Enclave(eid);
        let ids: Vec<ResourceId> = self.resources.iter().map(|(id, _)| *id).collect();
        for id in ids {
            let rec = self.resources.get_mut(&id).unwrap();
            if rec.owner == domain && rec.state == ResourceState::Owned {
                rec.state = ResourceState::Blocked;
                if let ResourceId::Thread(tid) = id {
                    self.threads.get_mut(&tid).unwrap().state = ThreadState::Blocked;
                }
            } else if rec.state == ResourceState::Offered(domain) {
                rec.owner = ProtectionDomain::UntrustedOS;
                rec.state = ResourceState::Clean;
                if let Some(unit) = id.memory_unit() {
                    self.sync_grant(unit);
                }
            }
        }
        self.enclaves.get_mut(&eid).unwrap().state = EnclaveState::Deleted;
        self.maybe_free_enclave(eid);
        Ok(())
    }

    pub(super) fn accept_thread(
        &mut self,
        caller: &Caller,
        tid: ThreadId,
        entry_point: VirtAddr,
        fault_handlers: &FaultHandlers,
    ) -> Result<()> {
        let (eid, _, _) = self.running(caller)?;
        let rec = self.resources.get(&ResourceId::Thread(tid)).ok_or(Error::NoSuchResource)?;
        if rec.state != ResourceState::Offered(caller.domain) {
            return Err(Error::NotOffered);
        }
        if !in_range(&self.enclaves[&eid].evrange, entry_point, fault_handlers) {
            return Err(Error::BadArgument);
        }
        *self.resources.get_mut(&ResourceId::Thread(tid)).unwrap() = ResourceRecord::owned(caller.domain);
        self.threads.insert(
            tid,
            ThreadMetadata {
                owner: Some(eid),
                state: ThreadState::Assigned,
                entry_point,
                fault_handlers: fault_handlers.clone(),
                ..ThreadMetadata::zeroed(tid)
            },
        );
        self.enclaves.get_mut(&eid).unwrap().threads.insert(tid);
        Ok(())
    }

    /// Maps a page the enclave accepted after initialization into its range.
    pub(super) fn map_page(&mut self, caller: &Caller, vaddr: VirtAddr, pa: PhysAddr, perms: Perms) -> Result<()> {
        let (eid, _, _) = self.running(caller)?;
        self.check_vaddr(eid, vaddr)?;
        let page = self.machine.page_size();
        if !pa.is_aligned(page) {
            return Err(Error::BadArgument);
        }
        let owned = self
            .unit_record(pa)
            .is_some_and(|(_, r)| r.owner == caller.domain && r.state == ResourceState::Owned);
        if !owned {
            return Err(Error::NotOwner);
        }
        let ppn = pa.0 / page;
        if self.enclaves[&eid].page_table_pages.contains(&ppn) {
            return Err(Error::BadArgument);
        }
        let table = &self.machine.space(eid).expect("enclave has an address space").table;
        if table.mapping.contains_key(&(vaddr.0 / page)) || table.mapping.values().any(|(p, _)| *p == ppn) {
            return Err(Error::AliasViolation);
        }
        self.machine.map_enclave_page(eid, vaddr.0 / page, ppn, perms);
        Ok(())
    }

    pub(super) fn resume_aex(&mut self, caller: &Caller) -> Result<()> {
        let (_, core, tid) = self.running(caller)?;
        let t = self.threads.get_mut(&tid).unwrap();
        if !t.aex_present {
            return Err(Error::WrongState);
        }
        let (regs, pc) = (t.aex_state, t.aex_pc);
        t.aex_present = false;
        t.aex_state = [0; REGISTER_COUNT];
        t.aex_pc = 0;
        let c = self.machine.core_mut(core).unwrap();
        c.set_registers(regs);
        c.pc = pc;
        Ok(())
    }

    pub(super) fn resume_from_fault(&mut self, caller: &Caller) -> Result<()> {
        let (_, core, tid) = self.running(caller)?;
        let t = self.threads.get_mut(&tid).unwrap();
        if !t.in_fault_handler {
            return Err(Error::WrongState);
        }
        let (regs, pc) = (t.fault_state, t.fault_pc);
        t.in_fault_handler = false;
        t.fault_state = [0; REGISTER_COUNT];
        t.fault_pc = 0;
        let c = self.machine.core_mut(core).unwrap();
        c.set_registers(regs);
        c.pc = pc;
        Ok(())
    }
}
