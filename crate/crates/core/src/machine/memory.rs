// SPDX-License-Identifier: Apache-2.0

//! Sparse physical memory. Absent pages read as zero.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use sha3::{Digest as _, Sha3_256};

use crate::types::{Digest, PhysAddr, ProtectionDomain};

/// Contents of one nonzero physical page.
///
/// `writers` records every domain on whose behalf nonzero bytes were stored
/// in the page since it was last zero. It is model bookkeeping used by the
/// invariant checker, not machine state visible to software.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageFrame {
    bytes: Box<[u8]>,
    digest: Digest,
    writers: BTreeSet<ProtectionDomain>,
}

impl PageFrame {
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn writers(&self) -> &BTreeSet<ProtectionDomain> {
        &self.writers
    }

    pub fn digest(&self) -> &Digest {
        &self.digest
    }
}

impl Hash for PageFrame {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.digest.hash(state);
        self.writers.hash(state);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PhysicalMemory {
    page_size: u64,
    page_count: u64,
    frames: BTreeMap<u64, Arc<PageFrame>>,
}

impl PhysicalMemory {
    pub fn new(page_size: u64, page_count: u64) -> Self {
        Self {
            page_size,
            page_count,
            frames: BTreeMap::new(),
        }
    }

    pub fn page_size(&self) -> u64 {
        self.page_size
    }

    pub fn page_count(&self) -> u64 {
        self.page_count
    }

    pub fn frame(&self, ppn: u64) -> Option<&PageFrame> {
        self.frames.get(&ppn).map(Arc::as_ref)
    }

    /// Nonzero pages in ascending page order.
    pub fn frames(&self) -> impl Iterator<Item = (u64, &PageFrame)> {
        self.frames.iter().map(|(ppn, f)| (*ppn, f.as_ref()))
    }

    pub fn read_page(&self, ppn: u64) -> Vec<u8> {
        match self.frames.get(&ppn) {
            Some(f) => f.bytes.to_vec(),
            None => vec![0; self.page_size as usize],
        }
    }

    pub fn is_zero_page(&self, ppn: u64) -> bool {
        !self.frames.contains_key(&ppn)
    }

    /// Reads `buf.len()` bytes at `pa`; the range must not cross a page.
    pub fn read(&self, pa: PhysAddr, buf: &mut [u8]) {
        let (ppn, off) = self.split(pa);
        match self.frames.get(&ppn) {
            Some(f) => buf.copy_from_slice(&f.bytes[off..off + buf.len()]),
            None => buf.fill(0),
        }
    }

    pub fn read_u64(&self, pa: PhysAddr) -> u64 {
        let mut b = [0u8; 8];
        self.read(pa, &mut b);
        u64::from_le_bytes(b)
    }

    /// Writes `data` at `pa` on behalf of `writer`; the range must not cross a page.
    pub fn write(&mut self, pa: PhysAddr, data: &[u8], writer: ProtectionDomain) {
        let (ppn, off) = self.split(pa);
        let page_size = self.page_size as usize;
        assert!(off + data.len() <= page_size, "write crosses a page boundary");
        let mut bytes = match self.frames.get(&ppn) {
            Some(f) => f.bytes.to_vec(),
            None => {
                if data.iter().all(|b| *b == 0) {
                    return;
                }
                vec![0; page_size]
            }
        };
        bytes[off..off + data.len()].copy_from_slice(data);
        let mut writers = self
            .frames
            .get(&ppn)
            .map(|f| f.writers.clone())
            .unwrap_or_default();
        if data.iter().any(|b| *b != 0) {
            writers.insert(writer);
        }
        self.store(ppn, bytes, writers);
    }

    pub fn write_u64(&mut self, pa: PhysAddr, value: u64, writer: ProtectionDomain) {
        self.write(pa, &value.to_le_bytes(), writer);
    }

    /// Replaces a whole page.
    pub fn write_page(&mut self, ppn: u64, data: &[u8], writer: ProtectionDomain) {
        assert_eq!(data.len() as u64, self.page_size);
        let writers = if data.iter().any(|b| *b != 0) {
            BTreeSet::from([writer])
        } else {
            BTreeSet::new()
        };
        self.store(ppn, data.to_vec(), writers);
    }

    pub fn zero_page(&mut self, ppn: u64) {
        self.frames.remove(&ppn);
    }

    pub fn zero_range(&mut self, first_ppn: u64, pages: u64) {
        let doomed: Vec<u64> = self
            .frames
            .range(first_ppn..first_ppn + pages)
            .map(|(k, _)| *k)
            .collect();
        for ppn in doomed {
            self.frames.remove(&ppn);
        }
    }

    /// Searches every nonzero page for `needle`; returns the page numbers that contain it.
    pub fn find(&self, needle: &[u8]) -> Vec<u64> {
        self.frames
            .iter()
            .filter(|(_, f)| f.bytes.windows(needle.len()).any(|w| w == needle))
            .map(|(ppn, _)| *ppn)
            .collect()
    }

    fn store(&mut self, ppn: u64, bytes: Vec<u8>, writers: BTreeSet<ProtectionDomain>) {
        if bytes.iter().all(|b| *b == 0) {
            self.frames.remove(&ppn);
            return;
        }
        let digest: Digest = Sha3_256::digest(&bytes).into();
        self.frames.insert(
            ppn,
            Arc::new(PageFrame {
                bytes: bytes.into_boxed_slice(),
                digest,
                writers,
            }),
        );
    }

    fn split(&self, pa: PhysAddr) -> (u64, usize) {
        let ppn = pa.0 / self.page_size;
        assert!(ppn < self.page_count, "physical address {pa} out of range");
        (ppn, (pa.0 % self.page_size) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const OS: ProtectionDomain = ProtectionDomain::UntrustedOS;

    #[test]
    fn zero_writes_keep_pages_sparse() {
        let mut m = PhysicalMemory::new(4096, 4);
        m.write_u64(PhysAddr(8), 0, OS);
        assert!(m.is_zero_page(0));
        m.write_u64(PhysAddr(8), 7, OS);
        assert_eq!(m.read_u64(PhysAddr(8)), 7);
        assert!(m.frame(0).unwrap().writers().contains(&OS));
        m.write_u64(PhysAddr(8), 0, OS);
        assert!(m.is_zero_page(0), "page returning to zero is dropped");
    }

    #[test]
    fn find_locates_needle() {
        let mut m = PhysicalMemory::new(64, 4);
        m.write(PhysAddr(64 + 10), b"secret", OS);
        assert_eq!(m.find(b"secret"), vec![1]);
        m.zero_range(0, 4);
        assert!(m.find(b"secret").is_empty());
    }
}
