// SPDX-License-Identifier: Apache-2.0

//! Deterministic abstract machine: cores, physical memory, address
//! translation, TLBs and the isolation backend.
//!
//! The machine is a passive store. It enforces what hardware enforces
//! (access checks on page walks, DMA filtering) and nothing else; every
//! ownership change is programmed by the monitor.

mod backend;
mod config;
mod memory;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

pub use backend::{Grant, IsolationBackend, MemoryUnit};
pub use config::{BackendConfig, ConfigError, MachineConfig, KIB, MIB};
pub use memory::{PageFrame, PhysicalMemory};

use crate::error::{Error, Result};
use crate::types::{
    AccessKind, CoreId, EnclaveId, Perms, PhysAddr, PhysRange, ProtectionDomain, RegisterFile,
    ThreadId, VirtAddr, VirtRange, REGISTER_COUNT,
};

/// Outcome of a hardware access check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Allowed,
    Denied,
}

/// Architectural and microarchitectural state of one core.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CoreState {
    pub id: CoreId,
    pub registers: RegisterFile,
    pub pc: u64,
    pub current_domain: ProtectionDomain,
    pub current_thread: Option<ThreadId>,
    pub microarch_dirty: bool,
    /// Domains whose values sit in the register file since the last clean.
    /// Model bookkeeping for the invariant checker.
    pub register_taint: BTreeSet<ProtectionDomain>,
}

impl CoreState {
    pub fn fresh(id: CoreId) -> Self {
        CoreState {
            id,
            registers: [0; REGISTER_COUNT],
            pc: 0,
            current_domain: ProtectionDomain::UntrustedOS,
            current_thread: None,
            microarch_dirty: false,
            register_taint: BTreeSet::new(),
        }
    }

    pub fn registers_zero(&self) -> bool {
        self.registers.iter().all(|r| *r == 0) && self.pc == 0
    }

    /// Overwrites the register file on behalf of the domain running on the core.
    pub fn set_registers(&mut self, regs: RegisterFile) {
        self.registers = regs;
        if regs.iter().any(|r| *r != 0) {
            self.register_taint.insert(self.current_domain);
        }
    }

    pub fn set_register(&mut self, index: usize, value: u64) {
        self.registers[index] = value;
        if value != 0 {
            self.register_taint.insert(self.current_domain);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TlbEntry {
    pub ppn: u64,
    pub perms: Perms,
}

/// Per-core cache of completed page walks, keyed by (domain, virtual page).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Tlb {
    entries: BTreeMap<(ProtectionDomain, u64), TlbEntry>,
}

impl Tlb {
    pub fn entries(&self) -> impl Iterator<Item = (ProtectionDomain, u64, TlbEntry)> + '_ {
        self.entries.iter().map(|((d, vpn), e)| (*d, *vpn, *e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries_for(&self, domain: ProtectionDomain) -> usize {
        self.entries.keys().filter(|(d, _)| *d == domain).count()
    }
}

/// Flat virtual-to-physical page map.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PageTable {
    pub owner: ProtectionDomain,
    pub mapping: BTreeMap<u64, (u64, Perms)>,
}

/// Per-enclave translation state: the private range, its page table, and
/// the OS pages explicitly shared with the enclave.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EnclaveSpace {
    pub evrange: VirtRange,
    pub table: PageTable,
    pub shared: BTreeSet<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Machine {
    config: Arc<MachineConfig>,
    pub memory: PhysicalMemory,
    pub backend: IsolationBackend,
    cores: Vec<CoreState>,
    tlbs: Vec<Tlb>,
    spaces: BTreeMap<EnclaveId, EnclaveSpace>,
}

impl Machine {
    pub fn new(config: MachineConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Machine {
            memory: PhysicalMemory::new(config.page_size, config.page_count()),
            backend: IsolationBackend::boot(&config),
            cores: (0..config.core_count).map(|i| CoreState::fresh(CoreId(i))).collect(),
            tlbs: vec![Tlb::default(); config.core_count],
            spaces: BTreeMap::new(),
            config: Arc::new(config),
        })
    }

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn page_size(&self) -> u64 {
        self.config.page_size
    }

    pub fn cores(&self) -> &[CoreState] {
        &self.cores
    }

    pub fn core(&self, id: CoreId) -> Option<&CoreState> {
        self.cores.get(id.0)
    }

    pub fn core_mut(&mut self, id: CoreId) -> Option<&mut CoreState> {
        self.cores.get_mut(id.0)
    }

    pub fn tlb(&self, id: CoreId) -> &Tlb {
        &self.tlbs[id.0]
    }

    pub fn space(&self, eid: EnclaveId) -> Option<&EnclaveSpace> {
        self.spaces.get(&eid)
    }

    pub fn spaces(&self) -> impl Iterator<Item = (EnclaveId, &EnclaveSpace)> {
        self.spaces.iter().map(|(k, v)| (*k, v))
    }

    pub fn ppn(&self, pa: PhysAddr) -> u64 {
        pa.0 / self.config.page_size
    }

    pub fn page_addr(&self, ppn: u64) -> PhysAddr {
        PhysAddr(ppn * self.config.page_size)
    }

    fn check_range(&self, pa: PhysAddr) -> Result<()> {
        if pa.0 >= self.config.phys_memory_bytes {
            Err(Error::AddressOutOfRange(pa))
        } else {
            Ok(())
        }
    }

    /// Owner of `pa` per the isolation backend. Exactly one owner per page.
    pub fn backend_owner_of(&self, pa: PhysAddr) -> Result<ProtectionDomain> {
        self.check_range(pa)?;
        Ok(self.backend.owner_of(pa))
    }

    /// Hardware access check. DMA carries OS-equivalent rights.
    pub fn check_access(&self, domain: ProtectionDomain, pa: PhysAddr, kind: AccessKind) -> Result<Access> {
        self.check_range(pa)?;
        let domain = if kind == AccessKind::Dma {
            ProtectionDomain::UntrustedOS
        } else {
            domain
        };
        if domain == ProtectionDomain::SecurityMonitor {
            return Ok(Access::Allowed);
        }
        let holder = self.backend.accessible_by(pa);
        if holder == Some(domain) {
            return Ok(Access::Allowed);
        }
        if let ProtectionDomain::Enclave(eid) = domain {
            let shared = self
                .spaces
                .get(&eid)
                .is_some_and(|s| s.shared.contains(&self.ppn(pa)));
            if shared && holder == Some(ProtectionDomain::UntrustedOS) {
                return Ok(Access::Allowed);
            }
        }
        Ok(Access::Denied)
    }

    /// Translates `va` for whatever domain is active on `core`, filling the TLB.
    ///
    /// Enclave accesses inside evrange walk the enclave's private table;
    /// everything else walks the OS table, which identity-maps physical memory.
    pub fn translate(&mut self, core: CoreId, va: VirtAddr, kind: AccessKind) -> Result<PhysAddr> {
        let page = self.config.page_size;
        let (vpn, offset) = (va.0 / page, va.0 % page);
        let domain = self
            .cores
            .get(core.0)
            .ok_or(Error::BadArgument)?
            .current_domain;
        if let Some(hit) = self.tlbs[core.0].entries.get(&(domain, vpn)) {
            if !hit.perms.allows(kind) {
                return Err(Error::PageFault(va));
            }
            return Ok(PhysAddr(hit.ppn * page + offset));
        }
        let private = domain
            .enclave()
            .and_then(|eid| self.spaces.get(&eid))
            .filter(|s| s.evrange.contains(va));
        let (ppn, perms) = match private {
            Some(space) => *space.table.mapping.get(&vpn).ok_or(Error::PageFault(va))?,
            None if vpn < self.memory.page_count() => (vpn, Perms::RWX),
            None => return Err(Error::PageFault(va)),
        };
        if !perms.allows(kind) {
            return Err(Error::PageFault(va));
        }
        let pa = PhysAddr(ppn * page + offset);
        if self.check_access(domain, pa, kind)? == Access::Denied {
            return Err(Error::PageFault(va));
        }
        self.tlbs[core.0]
            .entries
            .insert((domain, vpn), TlbEntry { ppn, perms });
        self.cores[core.0].microarch_dirty = true;
        Ok(pa)
    }

    /// Loads a machine word through the core's active translation.
    pub fn core_read(&mut self, core: CoreId, va: VirtAddr) -> Result<u64> {
        let pa = self.translate(core, VirtAddr(va.0 & !7), AccessKind::Read)?;
        Ok(self.memory.read_u64(pa))
    }

    /// Stores a machine word through the core's active translation.
    pub fn core_write(&mut self, core: CoreId, va: VirtAddr, value: u64) -> Result<()> {
        let pa = self.translate(core, VirtAddr(va.0 & !7), AccessKind::Write)?;
        let writer = self.cores[core.0].current_domain;
        self.memory.write_u64(pa, value, writer);
        Ok(())
    }

    pub fn dma_read(&self, pa: PhysAddr) -> Result<Option<u64>> {
        let pa = PhysAddr(pa.0 & !7);
        Ok(match self.check_access(ProtectionDomain::UntrustedOS, pa, AccessKind::Dma)? {
            Access::Allowed => Some(self.memory.read_u64(pa)),
            Access::Denied => None,
        })
    }

    pub fn dma_write(&mut self, pa: PhysAddr, value: u64) -> Result<Access> {
        let pa = PhysAddr(pa.0 & !7);
        let verdict = self.check_access(ProtectionDomain::UntrustedOS, pa, AccessKind::Dma)?;
        if verdict == Access::Allowed {
            self.memory.write_u64(pa, value, ProtectionDomain::UntrustedOS);
        }
        Ok(verdict)
    }

    /// Scrubs a core: registers and pc zeroed, private caches and TLB
    /// flushed, ownership returned to the OS.
    pub fn clean_core(&mut self, core: CoreId) {
        let c = &mut self.cores[core.0];
        *c = CoreState::fresh(c.id);
        self.tlbs[core.0] = Tlb::default();
    }

    /// Evicts every TLB entry, on every core, that targets `range`.
    pub fn tlb_shootdown(&mut self, range: PhysRange) {
        if range.is_empty() {
            return;
        }
        let page = self.config.page_size;
        for tlb in &mut self.tlbs {
            tlb.entries
                .retain(|_, e| !range.contains(PhysAddr(e.ppn * page)));
        }
    }

    pub fn install_space(&mut self, eid: EnclaveId, evrange: VirtRange) {
        self.spaces.insert(
            eid,
            EnclaveSpace {
                evrange,
                table: PageTable {
                    owner: ProtectionDomain::Enclave(eid),
                    mapping: BTreeMap::new(),
                },
                shared: BTreeSet::new(),
            },
        );
    }

    pub fn remove_space(&mut self, eid: EnclaveId) {
        self.spaces.remove(&eid);
    }

    pub fn map_enclave_page(&mut self, eid: EnclaveId, vpn: u64, ppn: u64, perms: Perms) {
        if let Some(space) = self.spaces.get_mut(&eid) {
            space.table.mapping.insert(vpn, (ppn, perms));
        }
    }

    pub fn share_page(&mut self, eid: EnclaveId, ppn: u64) {
        if let Some(space) = self.spaces.get_mut(&eid) {
            space.shared.insert(ppn);
        }
    }

    /// Drops every private mapping of `eid` that targets `range`.
    pub fn unmap_range(&mut self, eid: EnclaveId, range: PhysRange) {
        let page = self.config.page_size;
        if let Some(space) = self.spaces.get_mut(&eid) {
            space
                .table
                .mapping
                .retain(|_, (ppn, _)| !range.contains(PhysAddr(*ppn * page)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enclave_machine() -> (Machine, EnclaveId) {
        let mut m = Machine::new(MachineConfig::desk()).unwrap();
        let eid = EnclaveId(0x1000);
        let e = ProtectionDomain::Enclave(eid);
        m.backend.set_grant(MemoryUnit::Region(2), Grant { owner: e, enabled: true });
        m.install_space(eid, VirtRange::new(0x40_0000, 16 * 4096));
        (m, eid)
    }

    #[test]
    fn monitor_has_unrestricted_access() {
        let m = Machine::new(MachineConfig::desk()).unwrap();
        for pa in [0u64, 0x1_0000, 0x7_fff8] {
            assert_eq!(
                m.check_access(ProtectionDomain::SecurityMonitor, PhysAddr(pa), AccessKind::Write).unwrap(),
                Access::Allowed
            );
        }
    }

    #[test]
    fn os_denied_enclave_memory_and_dma_denied_monitor_memory() {
        let (m, _) = enclave_machine();
        assert_eq!(
            m.check_access(ProtectionDomain::UntrustedOS, PhysAddr(0x2_0040), AccessKind::Read).unwrap(),
            Access::Denied
        );
        assert_eq!(
            m.check_access(ProtectionDomain::UntrustedOS, PhysAddr(0x100), AccessKind::Dma).unwrap(),
            Access::Denied
        );
        assert_eq!(
            m.check_access(ProtectionDomain::SecurityMonitor, PhysAddr(0x2_0040), AccessKind::Dma).unwrap(),
            Access::Denied,
            "DMA carries OS rights regardless of the nominal domain"
        );
        assert_eq!(
            m.check_access(ProtectionDomain::UntrustedOS, PhysAddr(0x8_0000), AccessKind::Read),
            Err(Error::AddressOutOfRange(PhysAddr(0x8_0000)))
        );
    }

    #[test]
    fn translate_private_and_shared() {
        let (mut m, eid) = enclave_machine();
        let e = ProtectionDomain::Enclave(eid);
        m.map_enclave_page(eid, 0x400, 0x27, Perms::RW);
        m.share_page(eid, 0x35);
        let core = CoreId(0);
        m.core_mut(core).unwrap().current_domain = e;
        assert_eq!(
            m.translate(core, VirtAddr(0x40_0010), AccessKind::Read).unwrap(),
            PhysAddr(0x27 * 4096 + 0x10)
        );
        assert_eq!(
            m.translate(core, VirtAddr(0x35 * 4096 + 8), AccessKind::Write).unwrap(),
            PhysAddr(0x35 * 4096 + 8),
            "outside evrange walks the OS table into the shared buffer"
        );
        assert_eq!(
            m.translate(core, VirtAddr(0x40_1000), AccessKind::Read),
            Err(Error::PageFault(VirtAddr(0x40_1000)))
        );
        assert_eq!(
            m.translate(core, VirtAddr(0x36 * 4096), AccessKind::Read),
            Err(Error::PageFault(VirtAddr(0x36 * 4096))),
            "unshared OS memory is off limits"
        );
        assert_eq!(m.tlb(core).entries_for(e), 2);
    }

    #[test]
    fn clean_core_is_idempotent_and_matches_fresh() {
        let (mut m, eid) = enclave_machine();
        let e = ProtectionDomain::Enclave(eid);
        for (i, vpn) in [0x400u64, 0x401, 0x402].into_iter().enumerate() {
            m.map_enclave_page(eid, vpn, 0x20 + i as u64, Perms::RW);
        }
        let core = CoreId(1);
        {
            let c = m.core_mut(core).unwrap();
            c.current_domain = e;
            c.current_thread = Some(ThreadId(0x3000));
            c.set_register(0, 5);
            c.set_register(1, 9);
        }
        for vpn in [0x400u64, 0x401, 0x402] {
            m.translate(core, VirtAddr(vpn * 4096), AccessKind::Read).unwrap();
        }
        assert_eq!(m.tlb(core).entries_for(e), 3);
        m.clean_core(core);
        assert_eq!(m.tlb(core).entries_for(e), 0);
        assert_eq!(m.core(core).unwrap(), &CoreState::fresh(core));
        let before = m.clone();
        m.clean_core(core);
        assert_eq!(m, before);
    }

    #[test]
    fn shootdown_evicts_range_on_all_cores() {
        let mut m = Machine::new(MachineConfig::desk()).unwrap();
        for core in [CoreId(0), CoreId(1)] {
            m.translate(core, VirtAddr(0x3_0000), AccessKind::Read).unwrap();
            m.translate(core, VirtAddr(0x4_0000), AccessKind::Read).unwrap();
        }
        let before = m.clone();
        m.tlb_shootdown(PhysRange::new(0x3_0000, 0));
        assert_eq!(m, before, "empty range is a no-op");
        m.tlb_shootdown(PhysRange::new(0x3_0000, 0x1_0000));
        for core in [CoreId(0), CoreId(1)] {
            assert_eq!(m.tlb(core).len(), 1);
        }
    }
}
