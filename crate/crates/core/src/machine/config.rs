// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::PhysRange;

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * KIB;

/// Isolation mechanism used to partition physical memory between domains.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackendConfig {
    /// Fixed-size DRAM regions; region 0 holds the monitor.
    RegionBased { region_size: u64, region_count: u32 },
    /// Arbitrary page-aligned intervals declared at boot. Memory outside
    /// every interval belongs to the OS and cannot change hands.
    IntervalBased {
        sm_interval: PhysRange,
        intervals: Vec<PhysRange>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MachineConfig {
    pub core_count: usize,
    pub phys_memory_bytes: u64,
    pub page_size: u64,
    pub backend: BackendConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("core_count must be positive")]
    NoCores,
    #[error("page size {0:#x} must be a nonzero power of two")]
    BadPageSize(u64),
    #[error("region_count must be positive")]
    NoRegions,
    #[error("page size {page:#x} does not divide region size {region:#x}")]
    RegionNotPageMultiple { page: u64, region: u64 },
    #[error("phys_memory_bytes {actual:#x} != region_count x region_size = {expected:#x}")]
    MemorySizeMismatch { actual: u64, expected: u64 },
    #[error("interval {0} is not page aligned")]
    UnalignedInterval(PhysRange),
    #[error("interval {0} is empty")]
    EmptyInterval(PhysRange),
    #[error("interval {0} exceeds physical memory")]
    IntervalOutOfRange(PhysRange),
    #[error("intervals {0} and {1} overlap")]
    OverlappingIntervals(PhysRange, PhysRange),
    #[error("physical memory size {0:#x} is not page aligned")]
    UnalignedMemory(u64),
}

impl MachineConfig {
    /// Region-based machine with `region_count` regions of `region_size` bytes.
    pub fn region_based(core_count: usize, region_count: u32, region_size: u64, page_size: u64) -> Self {
        Self {
            core_count,
            phys_memory_bytes: region_size * u64::from(region_count),
            page_size,
            backend: BackendConfig::RegionBased {
                region_size,
                region_count,
            },
        }
    }

    /// Desk-scale default: 8 regions of 64 KiB, 4 KiB pages, 2 cores.
    pub fn desk() -> Self {
        Self::region_based(2, 8, 64 * KIB, 4 * KIB)
    }

    /// Smallest configuration used for exhaustive exploration: 4 regions of
    /// four 4 KiB pages, 2 cores.
    pub fn minimal() -> Self {
        Self::region_based(2, 4, 16 * KIB, 4 * KIB)
    }

    /// The MIT Sanctum processor's layout: 64 DRAM regions of 32 MiB.
    pub fn sanctum() -> Self {
        Self::region_based(4, 64, 32 * MIB, 4 * KIB)
    }

    /// Interval-based machine in the style of a PMP platform. The monitor
    /// occupies `[0, sm_bytes)`.
    pub fn interval_based(
        core_count: usize,
        phys_memory_bytes: u64,
        page_size: u64,
        sm_bytes: u64,
        intervals: Vec<PhysRange>,
    ) -> Self {
        Self {
            core_count,
            phys_memory_bytes,
            page_size,
            backend: BackendConfig::IntervalBased {
                sm_interval: PhysRange::new(0, sm_bytes),
                intervals,
            },
        }
    }

    /// Desk-scale interval machine: 512 KiB, 64 KiB monitor interval, and a
    /// handful of intervals of assorted sizes.
    pub fn desk_intervals() -> Self {
        Self::interval_based(
            2,
            512 * KIB,
            4 * KIB,
            64 * KIB,
            vec![
                PhysRange::new(64 * KIB, 64 * KIB),
                PhysRange::new(128 * KIB, 12 * KIB),
                PhysRange::new(160 * KIB, 100 * KIB),
                PhysRange::new(288 * KIB, 4 * KIB),
            ],
        )
    }

    pub fn page_count(&self) -> u64 {
        self.phys_memory_bytes / self.page_size
    }

    /// Memory reserved for the monitor at boot.
    pub fn sm_range(&self) -> PhysRange {
        match &self.backend {
            BackendConfig::RegionBased { region_size, .. } => PhysRange::new(0, *region_size),
            BackendConfig::IntervalBased { sm_interval, .. } => *sm_interval,
        }
    }

    /// Capability bitmask covered by enclave measurements.
    pub fn capabilities(&self) -> u64 {
        const REGION_ISOLATION: u64 = 1 << 0;
        const INTERVAL_ISOLATION: u64 = 1 << 1;
        const CACHE_PARTITIONING: u64 = 1 << 2;
        const DMA_RESTRICTION: u64 = 1 << 3;
        const CORE_CLEANING: u64 = 1 << 4;
        let base = DMA_RESTRICTION | CORE_CLEANING;
        match self.backend {
            BackendConfig::RegionBased { .. } => base | REGION_ISOLATION | CACHE_PARTITIONING,
            BackendConfig::IntervalBased { .. } => base | INTERVAL_ISOLATION,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.core_count == 0 {
            return Err(ConfigError::NoCores);
        }
        if self.page_size == 0 || !self.page_size.is_power_of_two() {
            return Err(ConfigError::BadPageSize(self.page_size));
        }
        if !self.phys_memory_bytes.is_multiple_of(self.page_size) {
            return Err(ConfigError::UnalignedMemory(self.phys_memory_bytes));
        }
        match &self.backend {
            BackendConfig::RegionBased {
                region_size,
                region_count,
            } => {
                if *region_count == 0 {
                    return Err(ConfigError::NoRegions);
                }
                if *region_size == 0 || region_size % self.page_size != 0 {
                    return Err(ConfigError::RegionNotPageMultiple {
                        page: self.page_size,
                        region: *region_size,
                    });
                }
                let expected = region_size * u64::from(*region_count);
                if expected != self.phys_memory_bytes {
                    return Err(ConfigError::MemorySizeMismatch {
                        actual: self.phys_memory_bytes,
                        expected,
                    });
                }
            }
            BackendConfig::IntervalBased {
                sm_interval,
                intervals,
            } => {
                let all: Vec<PhysRange> = std::iter::once(*sm_interval)
                    .chain(intervals.iter().copied())
                    .collect();
                for r in &all {
                    if r.is_empty() {
                        return Err(ConfigError::EmptyInterval(*r));
                    }
                    if r.base.0 % self.page_size != 0 || r.len % self.page_size != 0 {
                        return Err(ConfigError::UnalignedInterval(*r));
                    }
                    if r.end() > self.phys_memory_bytes {
                        return Err(ConfigError::IntervalOutOfRange(*r));
                    }
                }
                for (i, a) in all.iter().enumerate() {
                    if let Some(b) = all[i + 1..].iter().find(|b| a.overlaps(b)) {
                        return Err(ConfigError::OverlappingIntervals(*a, *b));
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self::desk()
    }
}
