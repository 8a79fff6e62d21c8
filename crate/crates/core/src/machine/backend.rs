// SPDX-License-Identifier: Apache-2.0

//! Hardware isolation state programmed by the monitor.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::{BackendConfig, MachineConfig};
use crate::types::{PhysAddr, PhysRange, ProtectionDomain};

/// A unit of isolatable memory: a DRAM region or a declared interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MemoryUnit {
    Region(u32),
    Interval(PhysAddr),
}

impl fmt::Display for MemoryUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemoryUnit::Region(i) => write!(f, "region:{i}"),
            MemoryUnit::Interval(base) => write!(f, "interval:{base}"),
        }
    }
}

/// Owner programmed into the isolation hardware for one memory unit.
///
/// `enabled` is false while the unit is being handed between owners
/// (clean or offered): then only the monitor may touch it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grant {
    pub owner: ProtectionDomain,
    pub enabled: bool,
}

impl Grant {
    const fn live(owner: ProtectionDomain) -> Self {
        Grant {
            owner,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum IsolationBackend {
    Regions {
        region_size: u64,
        grants: Vec<Grant>,
    },
    Intervals {
        sm_interval: PhysRange,
        intervals: Vec<(PhysRange, Grant)>,
    },
}

impl IsolationBackend {
    /// Boot state: monitor memory owned by the monitor, everything else by the OS.
    pub fn boot(config: &MachineConfig) -> Self {
        match &config.backend {
            BackendConfig::RegionBased {
                region_size,
                region_count,
            } => {
                let mut grants = vec![Grant::live(ProtectionDomain::UntrustedOS); *region_count as usize];
                grants[0] = Grant::live(ProtectionDomain::SecurityMonitor);
                IsolationBackend::Regions {
                    region_size: *region_size,
                    grants,
                }
            }
            BackendConfig::IntervalBased {
                sm_interval,
                intervals,
            } => {
                let mut intervals: Vec<_> = intervals
                    .iter()
                    .map(|r| (*r, Grant::live(ProtectionDomain::UntrustedOS)))
                    .collect();
                intervals.sort_by_key(|(r, _)| r.base);
                IsolationBackend::Intervals {
                    sm_interval: *sm_interval,
                    intervals,
                }
            }
        }
    }

    /// Every unit that can change hands.
    pub fn units(&self) -> Vec<MemoryUnit> {
        match self {
            IsolationBackend::Regions { grants, .. } => {
                (0..grants.len() as u32).map(MemoryUnit::Region).collect()
            }
            IsolationBackend::Intervals { intervals, .. } => intervals
                .iter()
                .map(|(r, _)| MemoryUnit::Interval(r.base))
                .collect(),
        }
    }

    pub fn unit_range(&self, unit: MemoryUnit) -> Option<PhysRange> {
        match (self, unit) {
            (IsolationBackend::Regions { region_size, grants }, MemoryUnit::Region(i))
                if (i as usize) < grants.len() =>
            {
                Some(PhysRange::new(u64::from(i) * region_size, *region_size))
            }
            (IsolationBackend::Intervals { intervals, .. }, MemoryUnit::Interval(base)) => intervals
                .iter()
                .find(|(r, _)| r.base == base)
                .map(|(r, _)| *r),
            _ => None,
        }
    }

    /// The unit covering `pa`, if any. SM-interval and uncovered memory have none.
    pub fn unit_of(&self, pa: PhysAddr) -> Option<MemoryUnit> {
        match self {
            IsolationBackend::Regions { region_size, grants } => {
                let idx = pa.0 / region_size;
                (idx < grants.len() as u64).then_some(MemoryUnit::Region(idx as u32))
            }
            IsolationBackend::Intervals { intervals, .. } => intervals
                .iter()
                .find(|(r, _)| r.contains(pa))
                .map(|(r, _)| MemoryUnit::Interval(r.base)),
        }
    }

    pub fn grant(&self, unit: MemoryUnit) -> Option<Grant> {
        match (self, unit) {
            (IsolationBackend::Regions { grants, .. }, MemoryUnit::Region(i)) => {
                grants.get(i as usize).copied()
            }
            (IsolationBackend::Intervals { intervals, .. }, MemoryUnit::Interval(base)) => intervals
                .iter()
                .find(|(r, _)| r.base == base)
                .map(|(_, g)| *g),
            _ => None,
        }
    }

    pub fn set_grant(&mut self, unit: MemoryUnit, grant: Grant) {
        match (self, unit) {
            (IsolationBackend::Regions { grants, .. }, MemoryUnit::Region(i)) => {
                grants[i as usize] = grant;
            }
            (IsolationBackend::Intervals { intervals, .. }, MemoryUnit::Interval(base)) => {
                if let Some((_, g)) = intervals.iter_mut().find(|(r, _)| r.base == base) {
                    *g = grant;
                }
            }
            (_, unit) => panic!("unit {unit} does not belong to this backend"),
        }
    }

    /// Owner of the memory at `pa`. Memory outside every unit defaults to the OS.
    pub fn owner_of(&self, pa: PhysAddr) -> ProtectionDomain {
        if let IsolationBackend::Intervals { sm_interval, .. } = self {
            if sm_interval.contains(pa) {
                return ProtectionDomain::SecurityMonitor;
            }
        }
        match self.unit_of(pa).and_then(|u| self.grant(u)) {
            Some(g) => g.owner,
            None => ProtectionDomain::UntrustedOS,
        }
    }

    /// Domain the hardware currently lets through for `pa` (besides the monitor).
    pub fn accessible_by(&self, pa: PhysAddr) -> Option<ProtectionDomain> {
        if let IsolationBackend::Intervals { sm_interval, .. } = self {
            if sm_interval.contains(pa) {
                return Some(ProtectionDomain::SecurityMonitor);
            }
        }
        match self.unit_of(pa).and_then(|u| self.grant(u)) {
            Some(g) if g.enabled => Some(g.owner),
            Some(_) => None,
            None => Some(ProtectionDomain::UntrustedOS),
        }
    }

    /// Last-level cache partition of `pa`: region-based platforms color the
    /// shared cache by region.
    pub fn cache_partition(&self, pa: PhysAddr) -> Option<u32> {
        match (self, self.unit_of(pa)) {
            (IsolationBackend::Regions { .. }, Some(MemoryUnit::Region(i))) => Some(i),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::EnclaveId;

    #[test]
    fn region_boot_ownership() {
        let b = IsolationBackend::boot(&MachineConfig::desk());
        assert_eq!(b.owner_of(PhysAddr(0x100)), ProtectionDomain::SecurityMonitor);
        assert_eq!(b.owner_of(PhysAddr(0x1_0000)), ProtectionDomain::UntrustedOS);
        assert_eq!(b.units().len(), 8);
        assert_eq!(b.cache_partition(PhysAddr(0x2_0004)), Some(2));
    }

    #[test]
    fn interval_ownership_and_defaults() {
        let cfg = MachineConfig::desk_intervals();
        let mut b = IsolationBackend::boot(&cfg);
        let unit = MemoryUnit::Interval(PhysAddr(160 * 1024));
        let e = ProtectionDomain::Enclave(EnclaveId(0x2000));
        b.set_grant(unit, Grant { owner: e, enabled: true });
        assert_eq!(b.owner_of(PhysAddr(160 * 1024 + 99 * 1024)), e);
        assert_eq!(b.owner_of(PhysAddr(260 * 1024)), ProtectionDomain::UntrustedOS);
        assert_eq!(b.unit_of(PhysAddr(400 * 1024)), None);
        assert_eq!(b.owner_of(PhysAddr(10)), ProtectionDomain::SecurityMonitor);
        assert_eq!(b.unit_range(unit).unwrap().len, 100 * 1024);
    }
}
