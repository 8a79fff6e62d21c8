// SPDX-License-Identifier: Apache-2.0

//! Enclave measurement: a sha3-256 chain over the operations that build an
//! enclave's initial state.
//!
//! # Byte layout
//!
//! The hash first absorbs the ASCII prefix `sanctorum-enclave-v1`, then one
//! record per operation:
//!
//! | field  | size | encoding                      |
//! |--------|------|-------------------------------|
//! | tag    | 1    | operation code                |
//! | length | 8    | body length, little-endian    |
//! | body   | n    | per tag, see below            |
//!
//! Bodies (all integers little-endian):
//!
//! | tag  | operation      | body                                                                  |
//! |------|----------------|-----------------------------------------------------------------------|
//! | 0x01 | create         | evrange base u64, evrange length u64, mailbox count u64, monitor image hash \[32\], capability bits u64 |
//! | 0x02 | page table     | virtual address u64                                                   |
//! | 0x03 | load page      | virtual address u64, permission bits u8, content length u64, contents |
//! | 0x04 | create thread  | entry point u64, handler count u64, then per handler: fault code u8, handler address u64, ascending by fault code |
//!
//! No physical address is ever absorbed.

use std::hash::{Hash, Hasher};

use sha3::{Digest as _, Sha3_256};

use crate::types::{Digest, FaultHandlers, Perms, VirtAddr, VirtRange};

pub const MEASUREMENT_PREFIX: &[u8] = b"sanctorum-enclave-v1";

pub const TAG_CREATE: u8 = 0x01;
pub const TAG_PAGE_TABLE: u8 = 0x02;
pub const TAG_LOAD_PAGE: u8 = 0x03;
pub const TAG_CREATE_THREAD: u8 = 0x04;

/// One measured operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MeasurementRecord<'a> {
    Create {
        evrange: VirtRange,
        mailbox_count: u32,
        sm_image_hash: Digest,
        capabilities: u64,
    },
    PageTableAlloc {
        vaddr: VirtAddr,
    },
    LoadPage {
        vaddr: VirtAddr,
        perms: Perms,
        contents: &'a [u8],
    },
    CreateThread {
        entry_point: VirtAddr,
        fault_handlers: &'a FaultHandlers,
    },
}

impl MeasurementRecord<'_> {
    pub fn tag(&self) -> u8 {
        match self {
            MeasurementRecord::Create { .. } => TAG_CREATE,
            MeasurementRecord::PageTableAlloc { .. } => TAG_PAGE_TABLE,
            MeasurementRecord::LoadPage { .. } => TAG_LOAD_PAGE,
            MeasurementRecord::CreateThread { .. } => TAG_CREATE_THREAD,
        }
    }

    pub fn body(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            MeasurementRecord::Create {
                evrange,
                mailbox_count,
                sm_image_hash,
                capabilities,
            } => {
                out.extend_from_slice(&evrange.base.0.to_le_bytes());
                out.extend_from_slice(&evrange.len.to_le_bytes());
                out.extend_from_slice(&u64::from(*mailbox_count).to_le_bytes());
                out.extend_from_slice(sm_image_hash);
                out.extend_from_slice(&capabilities.to_le_bytes());
            }
            MeasurementRecord::PageTableAlloc { vaddr } => {
                out.extend_from_slice(&vaddr.0.to_le_bytes());
            }
            MeasurementRecord::LoadPage {
                vaddr,
                perms,
                contents,
            } => {
                out.extend_from_slice(&vaddr.0.to_le_bytes());
                out.push(perms.bits());
                out.extend_from_slice(&(contents.len() as u64).to_le_bytes());
                out.extend_from_slice(contents);
            }
            MeasurementRecord::CreateThread {
                entry_point,
                fault_handlers,
            } => {
                out.extend_from_slice(&entry_point.0.to_le_bytes());
                out.extend_from_slice(&(fault_handlers.len() as u64).to_le_bytes());
                for (kind, addr) in fault_handlers.iter() {
                    out.push(kind.code());
                    out.extend_from_slice(&addr.0.to_le_bytes());
                }
            }
        }
        out
    }

    /// Full record encoding: tag, body length, body.
    pub fn encode(&self) -> Vec<u8> {
        let body = self.body();
        let mut out = Vec::with_capacity(9 + body.len());
        out.push(self.tag());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }
}

/// Running measurement of an enclave under construction.
#[derive(Clone)]
pub struct MeasurementState {
    hasher: Sha3_256,
    records: u64,
}

impl MeasurementState {
    pub fn new() -> Self {
        let mut hasher = Sha3_256::new();
        hasher.update(MEASUREMENT_PREFIX);
        MeasurementState { hasher, records: 0 }
    }

    pub fn extend(&mut self, record: &MeasurementRecord<'_>) {
        self.hasher.update(record.encode());
        self.records += 1;
    }

    /// Functional form of [`MeasurementState::extend`].
    pub fn extended(mut self, record: &MeasurementRecord<'_>) -> Self {
        self.extend(record);
        self
    }

    pub fn record_count(&self) -> u64 {
        self.records
    }

    /// Digest of everything absorbed so far, without consuming the state.
    pub fn peek(&self) -> Digest {
        self.hasher.clone().finalize().into()
    }

    pub fn finalize(self) -> Digest {
        self.hasher.finalize().into()
    }
}

impl Default for MeasurementState {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for MeasurementState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeasurementState")
            .field("records", &self.records)
            .field("partial", &hex::encode(self.peek()))
            .finish()
    }
}

impl PartialEq for MeasurementState {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records && self.peek() == other.peek()
    }
}

impl Eq for MeasurementState {}

impl Hash for MeasurementState {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.records.hash(state);
        self.peek().hash(state);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::FaultKind;

    #[test]
    fn empty_chain_is_hash_of_prefix() {
        let expected: Digest = Sha3_256::digest(b"sanctorum-enclave-v1").into();
        assert_eq!(MeasurementState::new().finalize(), expected);
    }

    #[test]
    fn record_layout() {
        let rec = MeasurementRecord::PageTableAlloc {
            vaddr: VirtAddr(0x40_0000),
        };
        assert_eq!(
            rec.encode(),
            [
                vec![0x02],
                8u64.to_le_bytes().to_vec(),
                0x40_0000u64.to_le_bytes().to_vec()
            ]
            .concat()
        );
        let handlers = FaultHandlers::from([
            (FaultKind::IllegalInstruction, VirtAddr(0x40_0200)),
            (FaultKind::PageFault, VirtAddr(0x40_0100)),
        ]);
        let body = MeasurementRecord::CreateThread {
            entry_point: VirtAddr(0x40_0000),
            fault_handlers: &handlers,
        }
        .body();
        assert_eq!(body.len(), 8 + 8 + 2 * 9);
        assert_eq!(body[16], FaultKind::PageFault.code(), "handlers ascend by code");
        let create = MeasurementRecord::Create {
            evrange: VirtRange::new(0, 0x1000),
            mailbox_count: 1,
            sm_image_hash: [7; 32],
            capabilities: 3,
        };
        assert_eq!(create.body().len(), 64);
    }

    #[test]
    fn swapping_loads_changes_digest() {
        let a = [1u8; 64];
        let b = [2u8; 64];
        let rec = |va: u64, c: &'static [u8]| MeasurementRecord::LoadPage {
            vaddr: VirtAddr(va),
            perms: Perms::RW,
            contents: c,
        };
        let a: &'static [u8] = Box::leak(Box::new(a));
        let b: &'static [u8] = Box::leak(Box::new(b));
        let one = MeasurementState::new()
            .extended(&rec(0x1000, a))
            .extended(&rec(0x2000, b))
            .finalize();
        let two = MeasurementState::new()
            .extended(&rec(0x2000, b))
            .extended(&rec(0x1000, a))
            .finalize();
        assert_ne!(one, two);
    }
}
