// SPDX-License-Identifier: Apache-2.0

//! Enclave image manifests.
//!
//! A manifest is a text file with one directive per line; `#` starts a
//! comment.
//!
//! ```text
//! evrange 0x400000 0x4000          # base and length of the private range
//! mailboxes 1
//! page_table 0x400000
//! load 0x400000 phys=1 perms=rx file=code.bin sha3=<64 hex digits>
//! load 0x401000 phys=2 perms=rw fill=0x00
//! thread entry=0x400000 page_fault=0x400100
//! ```
//!
//! `phys` is an index into the enclave's physical pages in ascending
//! order; page tables take the lowest pages. Page contents come from
//! `file=` (path relative to the manifest, optionally pinned by `sha3=`),
//! `hex=` or `fill=`; short contents are zero-padded to the page size.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::crypto::sha3_256;
use crate::error::{Error, OrderRule};
use crate::measurement::{MeasurementRecord, MeasurementState};
use crate::monitor::MAX_MAILBOXES;
use crate::types::{parse_u64, Digest, FaultHandlers, FaultKind, Perms, VirtAddr, VirtRange};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifestOp {
    PageTable {
        vaddr: VirtAddr,
    },
    Load {
        vaddr: VirtAddr,
        phys: u64,
        perms: Perms,
        contents: Vec<u8>,
    },
    Thread {
        entry_point: VirtAddr,
        fault_handlers: FaultHandlers,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub evrange: VirtRange,
    pub mailbox_count: u32,
    pub ops: Vec<ManifestOp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ManifestError {
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> ManifestError {
    ManifestError {
        line,
        message: message.into(),
    }
}

/// Splits `key=value` words; bare words go to the positional list.
fn split_words<'a>(words: &[&'a str]) -> (Vec<&'a str>, Vec<(&'a str, &'a str)>) {
    let mut positional = Vec::new();
    let mut named = Vec::new();
    for w in words {
        match w.split_once('=') {
            Some((k, v)) => named.push((k, v)),
            None => positional.push(*w),
        }
    }
    (positional, named)
}

impl Manifest {
    /// Parses manifest text. `base_dir` resolves `file=` paths.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self, ManifestError> {
        let mut evrange = None;
        let mut mailbox_count = None;
        let mut ops = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let words: Vec<&str> = content.split_whitespace().collect();
            let (positional, named) = split_words(&words[1..]);
            let num = |s: &str| parse_u64(s).map_err(|_| err(line, format!("bad number `{s}`")));
            match words[0] {
                "evrange" => {
                    let [base, len] = positional[..] else {
                        return Err(err(line, "evrange takes a base and a length"));
                    };
                    evrange = Some(VirtRange::new(num(base)?, num(len)?));
                }
                "mailboxes" => {
                    let [n] = positional[..] else {
                        return Err(err(line, "mailboxes takes a count"));
                    };
                    mailbox_count = Some(u32::try_from(num(n)?).map_err(|_| err(line, "mailbox count too large"))?);
                }
                "page_table" => {
                    let [va] = positional[..] else {
                        return Err(err(line, "page_table takes a virtual address"));
                    };
                    ops.push(ManifestOp::PageTable { vaddr: VirtAddr(num(va)?) });
                }
                "load" => {
                    let [va] = positional[..] else {
                        return Err(err(line, "load takes a virtual address"));
                    };
                    let mut phys = None;
                    let mut perms = None;
                    let mut contents = None;
                    let mut pinned: Option<Digest> = None;
                    for (k, v) in &named {
                        match *k {
                            "phys" => phys = Some(num(v)?),
                            "perms" => perms = Some(v.parse().map_err(|_| err(line, format!("bad perms `{v}`")))?),
                            "fill" => {
                                let b = u8::try_from(num(v)?).map_err(|_| err(line, "fill takes a byte"))?;
                                contents = Some(vec![b; 1]);
                            }
                            "hex" => contents = Some(hex::decode(v).map_err(|_| err(line, "bad hex contents"))?),
                            "file" => {
                                let path = match base_dir {
                                    Some(dir) => dir.join(v),
                                    None => Path::new(v).to_path_buf(),
                                };
                                let bytes = std::fs::read(&path)
                                    .map_err(|e| err(line, format!("cannot read {}: {e}", path.display())))?;
                                contents = Some(bytes);
                            }
                            "sha3" => {
                                let d = hex::decode(v).ok().and_then(|d| Digest::try_from(d).ok());
                                pinned = Some(d.ok_or_else(|| err(line, "sha3 takes 64 hex digits"))?);
                            }
                            _ => return Err(err(line, format!("unknown load option `{k}`"))),
                        }
                    }
                    let contents = contents.ok_or_else(|| err(line, "load needs file=, hex= or fill="))?;
                    if let Some(expected) = pinned {
                        if sha3_256(&contents) != expected {
                            return Err(err(line, "page contents do not match sha3"));
                        }
                    }
                    // `fill` expands to a whole page once the page size is known.
                    let contents = if named.iter().any(|(k, _)| *k == "fill") {
                        FILL_MARKER.iter().copied().chain(contents).collect()
                    } else {
                        contents
                    };
                    ops.push(ManifestOp::Load {
                        vaddr: VirtAddr(num(va)?),
                        phys: phys.ok_or_else(|| err(line, "load needs phys="))?,
                        perms: perms.ok_or_else(|| err(line, "load needs perms="))?,
                        contents,
                    });
                }
                "thread" => {
                    if !positional.is_empty() {
                        return Err(err(line, "thread takes only key=value options"));
                    }
                    let mut entry = None;
                    let mut handlers = FaultHandlers::new();
                    for (k, v) in &named {
                        if *k == "entry" {
                            entry = Some(VirtAddr(num(v)?));
                        } else {
                            let kind: FaultKind = k.parse().map_err(|_| err(line, format!("unknown thread option `{k}`")))?;
                            handlers.insert(kind, VirtAddr(num(v)?));
                        }
                    }
                    ops.push(ManifestOp::Thread {
                        entry_point: entry.ok_or_else(|| err(line, "thread needs entry="))?,
                        fault_handlers: handlers,
                    });
                }
                other => return Err(err(line, format!("unknown directive `{other}`"))),
            }
        }
        Ok(Manifest {
            evrange: evrange.ok_or_else(|| err(0, "missing evrange"))?,
            mailbox_count: mailbox_count.unwrap_or(0),
            ops,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|e| err(0, format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    /// Renders the manifest in its text form, page contents inline.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "evrange {:#x} {:#x}", self.evrange.base.0, self.evrange.len).unwrap();
        writeln!(out, "mailboxes {}", self.mailbox_count).unwrap();
        for op in &self.ops {
            match op {
                ManifestOp::PageTable { vaddr } => writeln!(out, "page_table {vaddr}").unwrap(),
                ManifestOp::Load {
                    vaddr,
                    phys,
                    perms,
                    contents,
                } => match contents.strip_prefix(FILL_MARKER) {
                    Some([b]) => writeln!(out, "load {vaddr} phys={phys} perms={perms} fill={b:#04x}").unwrap(),
                    _ => writeln!(out, "load {vaddr} phys={phys} perms={perms} hex={}", hex::encode(contents)).unwrap(),
                },
                ManifestOp::Thread {
                    entry_point,
                    fault_handlers,
                } => {
                    write!(out, "thread entry={entry_point}").unwrap();
                    for (kind, addr) in fault_handlers {
                        write!(out, " {}={addr}", kind.name()).unwrap();
                    }
                    out.push('\n');
                }
            }
        }
        out
    }

    /// Number of enclave physical pages the manifest consumes.
    pub fn pages_needed(&self) -> u64 {
        let tables = self
            .ops
            .iter()
            .filter(|op| matches!(op, ManifestOp::PageTable { .. }))
            .count() as u64;
        let highest = self
            .ops
            .iter()
            .filter_map(|op| match op {
                ManifestOp::Load { phys, .. } => Some(phys + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        tables.max(highest)
    }

    /// Measurement the monitor computes when it loads this manifest, or the
    /// load error it reports.
    pub fn expected_measurement(&self, page_size: u64, sm_image_hash: Digest, capabilities: u64) -> Result<Digest, Error> {
        let aligned = |va: VirtAddr| va.is_aligned(page_size) && self.evrange.contains(va);
        let r = self.evrange;
        let bad_range = !r.base.is_aligned(page_size) || !r.len.is_multiple_of(page_size) || r.len == 0;
        if bad_range || r.base.0.checked_add(r.len).is_none() || self.mailbox_count > MAX_MAILBOXES {
            return Err(Error::BadArgument);
        }
        let mut m = MeasurementState::new().extended(&MeasurementRecord::Create {
            evrange: self.evrange,
            mailbox_count: self.mailbox_count,
            sm_image_hash,
            capabilities,
        });
        let mut cursor: Option<u64> = None;
        let mut data_loaded = false;
        let mut mapped = std::collections::BTreeSet::new();
        let mut threads = 0;
        for op in &self.ops {
            match op {
                ManifestOp::PageTable { vaddr } => {
                    if !aligned(*vaddr) {
                        return Err(Error::BadArgument);
                    }
                    if data_loaded {
                        return Err(Error::OrderViolation(OrderRule::TablesAfterData));
                    }
                    cursor = Some(cursor.map_or(0, |c| c + 1));
                    m.extend(&MeasurementRecord::PageTableAlloc { vaddr: *vaddr });
                }
                ManifestOp::Load {
                    vaddr,
                    phys,
                    perms,
                    ..
                } => {
                    if !aligned(*vaddr) {
                        return Err(Error::BadArgument);
                    }
                    if !mapped.insert(vaddr.0) {
                        return Err(Error::AliasViolation);
                    }
                    if cursor.is_some_and(|c| *phys <= c) {
                        return Err(Error::OrderViolation(OrderRule::Descending));
                    }
                    cursor = Some(*phys);
                    data_loaded = true;
                    let contents = self.page_contents(op, page_size).ok_or(Error::BadArgument)?;
                    m.extend(&MeasurementRecord::LoadPage {
                        vaddr: *vaddr,
                        perms: *perms,
                        contents: &contents,
                    });
                }
                ManifestOp::Thread {
                    entry_point,
                    fault_handlers,
                } => {
                    let ok = self.evrange.contains(*entry_point)
                        && fault_handlers.values().all(|h| self.evrange.contains(*h));
                    if !ok {
                        return Err(Error::BadArgument);
                    }
                    threads += 1;
                    m.extend(&MeasurementRecord::CreateThread {
                        entry_point: *entry_point,
                        fault_handlers,
                    });
                }
            }
        }
        if threads == 0 {
            return Err(Error::NoThreads);
        }
        Ok(m.finalize())
    }

    /// Full-page contents of a load operation, or `None` if `op` is not a
    /// load or its contents exceed one page.
    pub fn page_contents(&self, op: &ManifestOp, page_size: u64) -> Option<Vec<u8>> {
        let ManifestOp::Load { contents, .. } = op else {
            return None;
        };
        let page = page_size as usize;
        match contents.strip_prefix(FILL_MARKER) {
            Some([b]) => Some(vec![*b; page]),
            _ if contents.len() > page => None,
            _ => {
                let mut v = contents.clone();
                v.resize(page, 0);
                Some(v)
            }
        }
    }

    /// The signing enclave shipped with the monitor.
    pub fn signing_enclave() -> Self {
        Manifest::parse(SIGNING_ENCLAVE_MANIFEST, None).expect("built-in manifest parses")
    }

    /// A small application enclave; `variant` changes its code page and
    /// hence its measurement.
    pub fn builtin_app(variant: u8) -> Self {
        let mut m = Manifest::parse(APP_ENCLAVE_MANIFEST, None).expect("built-in manifest parses");
        if let Some(ManifestOp::Load { contents, .. }) = m.ops.get_mut(1) {
            *contents = [FILL_MARKER, &[0x11u8.wrapping_add(variant)]].concat();
        }
        m
    }
}

/// Prefix tagging a one-byte `fill=` pattern before the page size is known.
/// Contains bytes that never start a decoded hex or file page of this length.
const FILL_MARKER: &[u8] = b"\0sanctorum-fill\0";

const SIGNING_ENCLAVE_MANIFEST: &str = "\
evrange 0x400000 0x4000
mailboxes 2
page_table 0x400000
load 0x400000 phys=1 perms=rx hex=73616e63746f72756d207369676e696e6720656e636c6176652076310a
load 0x401000 phys=2 perms=rw fill=0x00
thread entry=0x400000
";

const APP_ENCLAVE_MANIFEST: &str = "\
evrange 0x400000 0x4000
mailboxes 1
page_table 0x400000
load 0x400000 phys=1 perms=rwx fill=0x11
thread entry=0x400000 page_fault=0x400800
";
