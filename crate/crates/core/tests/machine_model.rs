// SPDX-License-Identifier: Apache-2.0

mod common;

use common::run_ok;
use proptest::prelude::*;
use sanctorum::machine::{Access, BackendConfig, ConfigError, Grant, Machine, MachineConfig, MemoryUnit, KIB, MIB};
use sanctorum::types::{AccessKind, CoreId, PhysAddr, PhysRange, ProtectionDomain, VirtAddr};
use sanctorum::Error;

#[test]
fn sanctum_layout_has_64_regions_of_32_mib() {
    let m = Machine::new(MachineConfig::sanctum()).unwrap();
    let units = m.backend.units();
    assert_eq!(units.len(), 64);
    for (i, u) in units.iter().enumerate() {
        let r = m.backend.unit_range(*u).unwrap();
        assert_eq!(r, PhysRange::new(i as u64 * 32 * MIB, 32 * MIB));
    }
    assert_eq!(m.config().phys_memory_bytes, 2048 * MIB);
    assert_eq!(m.backend.owner_of(PhysAddr(0)), ProtectionDomain::SecurityMonitor);
    assert_eq!(m.backend.owner_of(PhysAddr(32 * MIB)), ProtectionDomain::UntrustedOS);
}

#[test]
fn config_validation() {
    let bad = [
        (MachineConfig::region_based(0, 4, 16 * KIB, 4 * KIB), ConfigError::NoCores),
        (MachineConfig::region_based(1, 4, 16 * KIB, 3000), ConfigError::BadPageSize(3000)),
        (MachineConfig::region_based(1, 0, 16 * KIB, 4 * KIB), ConfigError::NoRegions),
        (
            MachineConfig::region_based(1, 4, 6 * KIB, 4 * KIB),
            ConfigError::RegionNotPageMultiple {
                page: 4 * KIB,
                region: 6 * KIB,
            },
        ),
    ];
    for (cfg, want) in bad {
        assert_eq!(Machine::new(cfg).unwrap_err(), want);
    }
    let mut mismatch = MachineConfig::desk();
    mismatch.phys_memory_bytes += 4 * KIB;
    assert!(matches!(mismatch.validate(), Err(ConfigError::MemorySizeMismatch { .. })));

    let overlapping = MachineConfig::interval_based(
        1,
        64 * KIB,
        4 * KIB,
        8 * KIB,
        vec![PhysRange::new(8 * KIB, 8 * KIB), PhysRange::new(12 * KIB, 8 * KIB)],
    );
    assert!(matches!(overlapping.validate(), Err(ConfigError::OverlappingIntervals(..))));
    let unaligned = MachineConfig::interval_based(1, 64 * KIB, 4 * KIB, 8 * KIB, vec![PhysRange::new(9 * KIB, 4 * KIB)]);
    assert!(matches!(unaligned.validate(), Err(ConfigError::UnalignedInterval(_))));
    let outside = MachineConfig::interval_based(1, 64 * KIB, 4 * KIB, 8 * KIB, vec![PhysRange::new(60 * KIB, 8 * KIB)]);
    assert!(matches!(outside.validate(), Err(ConfigError::IntervalOutOfRange(_))));
    let empty = MachineConfig::interval_based(1, 64 * KIB, 4 * KIB, 8 * KIB, vec![PhysRange::new(16 * KIB, 0)]);
    assert!(matches!(empty.validate(), Err(ConfigError::EmptyInterval(_))));
}

#[test]
fn interval_backend_accepts_arbitrary_page_aligned_sizes() {
    let m = Machine::new(MachineConfig::desk_intervals()).unwrap();
    let BackendConfig::IntervalBased { intervals, .. } = &m.config().backend else {
        panic!("interval config expected");
    };
    let sizes: Vec<u64> = intervals.iter().map(|r| r.len).collect();
    assert_eq!(sizes, vec![64 * KIB, 12 * KIB, 100 * KIB, 4 * KIB]);
    assert_eq!(m.backend.units().len(), 4);
    assert_eq!(m.backend.owner_of(PhysAddr(0x100)), ProtectionDomain::SecurityMonitor);
    // Uncovered memory is the OS's and belongs to no unit.
    assert_eq!(m.backend.unit_of(PhysAddr(0x7f000)), None);
    assert_eq!(m.backend.owner_of(PhysAddr(0x7f000)), ProtectionDomain::UntrustedOS);
    assert_ne!(m.config().capabilities(), MachineConfig::desk().capabilities());
}

#[test]
fn enclave_runs_in_an_interval() {
    run_ok(
        "machine desk-intervals
         launch app0 eid=0x1000 tids=0x1800 units=interval:0x28000 => save M
         os owner_of interval:0x28000 => owner:enclave:0x1000:owned
         os read 0x29000 => denied
         dma read 0x29000 => denied
         os read 0x70000 => value:0x0
         let W = measure app0",
    );
}

#[test]
fn measurement_depends_on_platform_capabilities() {
    let a = run_ok("machine desk\nlaunch app0 eid=0x1000 tids=0x1800 units=region:6 => save M");
    let b = run_ok("machine desk-intervals\nlaunch app0 eid=0x1000 tids=0x1800 units=interval:0x28000 => save M");
    let last = |r: &sanctorum::harness::RunReport| r.trace.last().unwrap().result.clone();
    assert_ne!(last(&a), last(&b));
}

fn disabled(m: &mut Machine, unit: MemoryUnit, owner: ProtectionDomain) {
    m.backend.set_grant(unit, Grant { owner, enabled: false });
}

#[test]
fn access_checks_follow_grants() {
    let mut m = Machine::new(MachineConfig::desk()).unwrap();
    let e = ProtectionDomain::Enclave(sanctorum::types::EnclaveId(0x1000));
    let pa = PhysAddr(0x20000);
    assert_eq!(m.check_access(ProtectionDomain::UntrustedOS, pa, AccessKind::Read), Ok(Access::Allowed));
    assert_eq!(m.check_access(e, pa, AccessKind::Read), Ok(Access::Denied));
    disabled(&mut m, MemoryUnit::Region(2), ProtectionDomain::UntrustedOS);
    assert_eq!(m.check_access(ProtectionDomain::UntrustedOS, pa, AccessKind::Read), Ok(Access::Denied));
    assert_eq!(m.check_access(ProtectionDomain::SecurityMonitor, pa, AccessKind::Write), Ok(Access::Allowed));
    m.backend.set_grant(MemoryUnit::Region(2), Grant { owner: e, enabled: true });
    assert_eq!(m.check_access(e, pa, AccessKind::Write), Ok(Access::Allowed));
    assert_eq!(m.check_access(e, pa, AccessKind::Dma), Ok(Access::Denied));
    assert_eq!(
        m.check_access(e, PhysAddr(8 * 64 * KIB), AccessKind::Read),
        Err(Error::AddressOutOfRange(PhysAddr(8 * 64 * KIB)))
    );
}

#[test]
fn translation_fills_tlb_and_shootdown_evicts() {
    let mut m = Machine::new(MachineConfig::desk()).unwrap();
    let (c0, c1) = (CoreId(0), CoreId(1));
    m.core_write(c0, VirtAddr(0x20008), 0xabc).unwrap();
    assert_eq!(m.core_read(c1, VirtAddr(0x2000c)).unwrap(), 0xabc);
    assert_eq!(m.tlb(c0).len(), 1);
    assert_eq!(m.tlb(c1).len(), 1);
    m.core_read(c0, VirtAddr(0x30000)).unwrap();
    assert_eq!(m.tlb(c0).len(), 2);

    m.tlb_shootdown(PhysRange::new(0x20000, 64 * KIB));
    assert_eq!(m.tlb(c0).len(), 1);
    assert!(m.tlb(c1).is_empty());

    // Monitor memory never translates for the OS.
    assert_eq!(m.core_read(c0, VirtAddr(0x1000)), Err(Error::PageFault(VirtAddr(0x1000))));
    assert_eq!(m.core_read(c0, VirtAddr(8 * 64 * KIB)), Err(Error::PageFault(VirtAddr(8 * 64 * KIB))));
}

#[test]
fn stale_tlb_entry_survives_without_shootdown() {
    // The machine does only what hardware does: revoking a grant without a
    // shootdown leaves cached translations usable.
    let mut m = Machine::new(MachineConfig::desk()).unwrap();
    let c = CoreId(0);
    m.core_write(c, VirtAddr(0x20000), 5).unwrap();
    disabled(&mut m, MemoryUnit::Region(2), ProtectionDomain::UntrustedOS);
    assert_eq!(m.core_read(c, VirtAddr(0x20000)), Ok(5));
    m.tlb_shootdown(PhysRange::new(0x20000, 64 * KIB));
    assert_eq!(m.core_read(c, VirtAddr(0x20000)), Err(Error::PageFault(VirtAddr(0x20000))));
}

#[test]
fn clean_core_scrubs_everything() {
    let mut m = Machine::new(MachineConfig::desk()).unwrap();
    let c = CoreId(1);
    m.core_read(c, VirtAddr(0x20000)).unwrap();
    {
        let core = m.core_mut(c).unwrap();
        core.set_register(3, 99);
        core.pc = 0x1234;
        core.current_domain = ProtectionDomain::Enclave(sanctorum::types::EnclaveId(0x1000));
    }
    m.clean_core(c);
    let core = m.core(c).unwrap();
    assert!(core.registers_zero());
    assert_eq!(core.pc, 0);
    assert_eq!(core.current_domain, ProtectionDomain::UntrustedOS);
    assert!(!core.microarch_dirty);
    assert!(m.tlb(c).is_empty());
}

#[test]
fn dma_is_filtered_like_os_access() {
    let mut m = Machine::new(MachineConfig::desk()).unwrap();
    assert_eq!(m.dma_write(PhysAddr(0x20010), 7), Ok(Access::Allowed));
    assert_eq!(m.dma_read(PhysAddr(0x20010)), Ok(Some(7)));
    assert_eq!(m.dma_read(PhysAddr(0x10)), Ok(None));
    disabled(&mut m, MemoryUnit::Region(2), ProtectionDomain::UntrustedOS);
    assert_eq!(m.dma_write(PhysAddr(0x20010), 8), Ok(Access::Denied));
    assert_eq!(m.memory.read_u64(PhysAddr(0x20010)), 7);
}

proptest! {
    #[test]
    fn every_address_has_exactly_one_unit_and_owner(pa in 0u64..512 * KIB) {
        let m = Machine::new(MachineConfig::desk_intervals()).unwrap();
        let pa = PhysAddr(pa);
        let covering: Vec<_> = m
            .backend
            .units()
            .into_iter()
            .filter(|u| m.backend.unit_range(*u).unwrap().contains(pa))
            .collect();
        prop_assert!(covering.len() <= 1);
        prop_assert_eq!(m.backend.unit_of(pa), covering.first().copied());
        let owner = m.backend.owner_of(pa);
        if pa.0 < 64 * KIB {
            prop_assert_eq!(owner, ProtectionDomain::SecurityMonitor);
        } else {
            prop_assert_eq!(owner, ProtectionDomain::UntrustedOS);
        }
    }

    #[test]
    fn memory_roundtrips_words(ppn in 1u64..128, offset in 0u64..512, value: u64) {
        let mut m = Machine::new(MachineConfig::desk()).unwrap();
        let pa = PhysAddr(ppn * 4096 + offset * 8);
        m.memory.write_u64(pa, value, ProtectionDomain::UntrustedOS);
        prop_assert_eq!(m.memory.read_u64(pa), value);
        m.memory.zero_page(ppn);
        prop_assert!(m.memory.is_zero_page(ppn));
    }
}
