// SPDX-License-Identifier: Apache-2.0

//! Identifiers and small value types shared by every layer of the monitor.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Number of general-purpose registers saved on AEX or fault.
pub const REGISTER_COUNT: usize = 32;

/// Register index through which the AEX flag is handed to enclave code on entry (`a0`).
pub const AEX_FLAG_REGISTER: usize = 10;

/// Architectural register file of a core.
pub type RegisterFile = [u64; REGISTER_COUNT];

/// A 32-byte sha3-256 digest.
pub type Digest = [u8; 32];

macro_rules! address_newtype {
    ($name:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
        )]
        pub struct $name(pub u64);

        impl $name {
            pub const fn new(raw: u64) -> Self {
                Self(raw)
            }

            pub const fn raw(self) -> u64 {
                self.0
            }

            pub const fn is_aligned(self, align: u64) -> bool {
                self.0 % align == 0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{:#x}", self.0)
            }
        }

        impl FromStr for $name {
            type Err = std::num::ParseIntError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                parse_u64(s).map(Self)
            }
        }
    };
}

address_newtype!(PhysAddr, "A physical address.");
address_newtype!(VirtAddr, "A virtual address.");
address_newtype!(
    EnclaveId,
    "An enclave id: the physical address of the enclave's metadata structure."
);
address_newtype!(
    ThreadId,
    "A thread id: the physical address of the thread's metadata structure."
);

impl EnclaveId {
    pub const fn addr(self) -> PhysAddr {
        PhysAddr(self.0)
    }
}

impl ThreadId {
    pub const fn addr(self) -> PhysAddr {
        PhysAddr(self.0)
    }
}

/// Index of a processor core.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct CoreId(pub usize);

impl fmt::Display for CoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Parses decimal or `0x`-prefixed hexadecimal integers.
pub fn parse_u64(s: &str) -> Result<u64, std::num::ParseIntError> {
    let s = s.trim().replace('_', "");
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    }
}

/// Owner identity of a machine resource.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum ProtectionDomain {
    SecurityMonitor,
    UntrustedOS,
    Enclave(EnclaveId),
}

impl ProtectionDomain {
    pub fn enclave(self) -> Option<EnclaveId> {
        match self {
            ProtectionDomain::Enclave(eid) => Some(eid),
            _ => None,
        }
    }

    pub fn is_enclave(self) -> bool {
        matches!(self, ProtectionDomain::Enclave(_))
    }
}

impl fmt::Display for ProtectionDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProtectionDomain::SecurityMonitor => f.write_str("sm"),
            ProtectionDomain::UntrustedOS => f.write_str("os"),
            ProtectionDomain::Enclave(eid) => write!(f, "enclave:{eid}"),
        }
    }
}

impl FromStr for ProtectionDomain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sm" => Ok(ProtectionDomain::SecurityMonitor),
            "os" => Ok(ProtectionDomain::UntrustedOS),
            _ => s
                .strip_prefix("enclave:")
                .and_then(|v| v.parse().ok())
                .map(ProtectionDomain::Enclave)
                .ok_or_else(|| format!("bad protection domain `{s}`")),
        }
    }
}

/// Page permissions.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct Perms(u8);

impl Perms {
    pub const NONE: Perms = Perms(0);
    pub const R: Perms = Perms(0b001);
    pub const W: Perms = Perms(0b010);
    pub const X: Perms = Perms(0b100);
    pub const RW: Perms = Perms(0b011);
    pub const RX: Perms = Perms(0b101);
    pub const RWX: Perms = Perms(0b111);

    pub fn from_bits(bits: u8) -> Option<Perms> {
        (bits & !0b111 == 0).then_some(Perms(bits))
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn contains(self, other: Perms) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn allows(self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read | AccessKind::Dma => self.contains(Perms::R),
            AccessKind::Write => self.contains(Perms::W),
            AccessKind::Execute => self.contains(Perms::X),
        }
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            return f.write_str("-");
        }
        for (bit, c) in [(Perms::R, 'r'), (Perms::W, 'w'), (Perms::X, 'x')] {
            if self.contains(bit) {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Perms {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "-" {
            return Ok(Perms::NONE);
        }
        let mut bits = 0;
        for c in s.chars() {
            bits |= match c {
                'r' => Perms::R.0,
                'w' => Perms::W.0,
                'x' => Perms::X.0,
                _ => return Err(format!("bad permission string `{s}`")),
            };
        }
        Ok(Perms(bits))
    }
}

/// Kind of a physical memory access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
    Execute,
    Dma,
}

/// Synchronous fault classes an enclave may install handlers for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FaultKind {
    PageFault = 0x01,
    AccessFault = 0x02,
    IllegalInstruction = 0x03,
}

impl FaultKind {
    pub const ALL: [FaultKind; 3] = [
        FaultKind::PageFault,
        FaultKind::AccessFault,
        FaultKind::IllegalInstruction,
    ];

    pub const fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::PageFault => "page_fault",
            FaultKind::AccessFault => "access_fault",
            FaultKind::IllegalInstruction => "illegal_instruction",
        }
    }
}

impl FromStr for FaultKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FaultKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown fault kind `{s}`"))
    }
}

/// Fault handler entry points registered for a thread.
pub type FaultHandlers = BTreeMap<FaultKind, VirtAddr>;

/// An enclave's private virtual range, `[base, base + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VirtRange {
    pub base: VirtAddr,
    pub len: u64,
}

impl VirtRange {
    pub const fn new(base: u64, len: u64) -> Self {
        Self {
            base: VirtAddr(base),
            len,
        }
    }

    pub fn contains(&self, va: VirtAddr) -> bool {
        va.0 >= self.base.0 && va.0 - self.base.0 < self.len
    }

    pub fn end(&self) -> u64 {
        self.base.0.saturating_add(self.len)
    }
}

impl fmt::Display for VirtRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{:#x}", self.base, self.len)
    }
}

impl FromStr for VirtRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("bad virtual range `{s}`, expected base+len");
        let (base, len) = s.split_once('+').ok_or_else(bad)?;
        Ok(VirtRange::new(parse_u64(base).map_err(|_| bad())?, parse_u64(len).map_err(|_| bad())?))
    }
}

/// Half-open physical range `[base, base + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhysRange {
    pub base: PhysAddr,
    pub len: u64,
}

impl PhysRange {
    pub const fn new(base: u64, len: u64) -> Self {
        Self {
            base: PhysAddr(base),
            len,
        }
    }

    pub fn end(&self) -> u64 {
        self.base.0 + self.len
    }

    pub fn contains(&self, pa: PhysAddr) -> bool {
        pa.0 >= self.base.0 && pa.0 < self.end()
    }

    pub fn overlaps(&self, other: &PhysRange) -> bool {
        self.base.0 < other.end() && other.base.0 < self.end()
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl fmt::Display for PhysRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:#x}, {:#x})", self.base.0, self.end())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_round_trips_through_text() {
        for d in [
            ProtectionDomain::SecurityMonitor,
            ProtectionDomain::UntrustedOS,
            ProtectionDomain::Enclave(EnclaveId(0x1800)),
        ] {
            assert_eq!(d.to_string().parse::<ProtectionDomain>().unwrap(), d);
        }
    }

    #[test]
    fn perms_parse() {
        assert_eq!("rx".parse::<Perms>().unwrap(), Perms::RX);
        assert_eq!("-".parse::<Perms>().unwrap(), Perms::NONE);
        assert!("rq".parse::<Perms>().is_err());
        assert!(Perms::RW.allows(AccessKind::Write));
        assert!(!Perms::RX.allows(AccessKind::Write));
    }

    #[test]
    fn ranges() {
        let r = VirtRange::new(0x40_0000, 0x2000);
        assert!(r.contains(VirtAddr(0x40_1fff)));
        assert!(!r.contains(VirtAddr(0x40_2000)));
        let a = PhysRange::new(0x1000, 0x1000);
        assert!(a.overlaps(&PhysRange::new(0x1800, 0x10)));
        assert!(!a.overlaps(&PhysRange::new(0x2000, 0x10)));
        assert_eq!(parse_u64("0x1_000").unwrap(), 4096);
    }
}
