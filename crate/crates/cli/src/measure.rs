// SPDX-License-Identifier: Apache-2.0

//! Offline enclave measurement.
//!
//! This module reads manifest text and hashes it without going through the
//! library's manifest model or measurement encoder, so that comparing its
//! output with a live `init_enclave` checks two separate implementations of
//! one byte layout.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use sha3::{Digest, Sha3_256};
use thiserror::Error;

const PREFIX: &[u8] = b"sanctorum-enclave-v1";
const MAX_MAILBOXES: u64 = 8;

/// Platform inputs folded into every measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Platform {
    pub page_size: u64,
    pub sm_image_hash: [u8; 32],
    pub capabilities: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MeasureError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    /// The manifest parses but the monitor would refuse to build it.
    #[error("{0}")]
    Rule(&'static str),
}

impl MeasureError {
    pub fn rule(&self) -> Option<&'static str> {
        match self {
            MeasureError::Rule(r) => Some(r),
            MeasureError::Syntax { .. } => None,
        }
    }
}

enum Op {
    Table(u64),
    Load { vaddr: u64, phys: u64, perms: u8, page: Contents },
    Thread { entry: u64, handlers: BTreeMap<u8, u64> },
}

enum Contents {
    Fill(u8),
    Bytes(Vec<u8>),
}

fn number(s: &str) -> Option<u64> {
    let s = s.replace('_', "");
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16).ok(),
        None => s.parse().ok(),
    }
}

fn perm_bits(s: &str) -> Option<u8> {
    if s == "-" {
        return Some(0);
    }
    s.chars().try_fold(0u8, |acc, c| match c {
        'r' => Some(acc | 1),
        'w' => Some(acc | 2),
        'x' => Some(acc | 4),
        _ => None,
    })
}

fn fault_code(name: &str) -> Option<u8> {
    match name {
        "page_fault" => Some(1),
        "access_fault" => Some(2),
        "illegal_instruction" => Some(3),
        _ => None,
    }
}

struct Parsed {
    base: u64,
    len: u64,
    mailboxes: u64,
    ops: Vec<Op>,
}

fn parse(text: &str, base_dir: Option<&Path>) -> Result<Parsed, MeasureError> {
    let mut range = None;
    let mut mailboxes = 0;
    let mut ops = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let bad = |message: String| MeasureError::Syntax { line, message };
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut words = content.split_whitespace();
        let Some(directive) = words.next() else {
            continue;
        };
        let mut positional = Vec::new();
        let mut named = Vec::new();
        for w in words {
            match w.split_once('=') {
                Some(kv) => named.push(kv),
                None => positional.push(w),
            }
        }
        let num = |s: &str| number(s).ok_or_else(|| bad(format!("bad number `{s}`")));
        let only = |n: usize| {
            if positional.len() == n {
                Ok(())
            } else {
                Err(bad(format!("wrong arguments to `{directive}`")))
            }
        };
        match directive {
            "evrange" => {
                only(2)?;
                range = Some((num(positional[0])?, num(positional[1])?));
            }
            "mailboxes" => {
                only(1)?;
                mailboxes = num(positional[0])?;
                if mailboxes > u64::from(u32::MAX) {
                    return Err(bad("mailbox count too large".into()));
                }
            }
            "page_table" => {
                only(1)?;
                ops.push(Op::Table(num(positional[0])?));
            }
            "load" => {
                if positional.len() != 1 {
                    return Err(bad("load takes one virtual address".into()));
                }
                let (mut phys, mut perms, mut page, mut pin) = (None, None, None, None);
                for (k, v) in &named {
                    match *k {
                        "phys" => phys = Some(num(v)?),
                        "perms" => perms = Some(perm_bits(v).ok_or_else(|| bad(format!("bad perms `{v}`")))?),
                        "fill" => {
                            let b = u8::try_from(num(v)?).map_err(|_| bad("fill takes a byte".into()))?;
                            page = Some(Contents::Fill(b));
                        }
                        "hex" => page = Some(Contents::Bytes(hex::decode(v).map_err(|_| bad("bad hex".into()))?)),
                        "file" => {
                            let path = base_dir.map_or_else(|| Path::new(v).to_path_buf(), |d| d.join(v));
                            let bytes = std::fs::read(&path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
                            page = Some(Contents::Bytes(bytes));
                        }
                        "sha3" => {
                            let d = hex::decode(v).ok().filter(|d| d.len() == 32);
                            pin = Some(d.ok_or_else(|| bad("sha3 takes 64 hex digits".into()))?);
                        }
                        _ => return Err(bad(format!("unknown load option `{k}`"))),
                    }
                }
                let page = page.ok_or_else(|| bad("load needs contents".into()))?;
                if let Some(pin) = pin {
                    let raw = match &page {
                        Contents::Fill(b) => vec![*b],
                        Contents::Bytes(v) => v.clone(),
                    };
                    if Sha3_256::digest(&raw).as_slice() != pin.as_slice() {
                        return Err(bad("page contents do not match sha3".into()));
                    }
                }
                ops.push(Op::Load {
                    vaddr: num(positional[0])?,
                    phys: phys.ok_or_else(|| bad("load needs phys=".into()))?,
                    perms: perms.ok_or_else(|| bad("load needs perms=".into()))?,
                    page,
                });
            }
            "thread" => {
                only(0)?;
                let mut entry = None;
                let mut handlers = BTreeMap::new();
                for (k, v) in &named {
                    if *k == "entry" {
                        entry = Some(num(v)?);
                    } else {
                        let code = fault_code(k).ok_or_else(|| bad(format!("unknown thread option `{k}`")))?;
                        handlers.insert(code, num(v)?);
                    }
                }
                ops.push(Op::Thread {
                    entry: entry.ok_or_else(|| bad("thread needs entry=".into()))?,
                    handlers,
                });
            }
            other => return Err(bad(format!("unknown directive `{other}`"))),
        }
    }
    let (base, len) = range.ok_or(MeasureError::Syntax {
        line: 0,
        message: "missing evrange".into(),
    })?;
    Ok(Parsed { base, len, mailboxes, ops })
}

struct Chain(Sha3_256);

impl Chain {
    fn record(&mut self, tag: u8, body: &[u8]) {
        self.0.update([tag]);
        self.0.update((body.len() as u64).to_le_bytes());
        self.0.update(body);
    }
}

/// Measures manifest `text`; `base_dir` resolves `file=` paths.
pub fn measure(text: &str, base_dir: Option<&Path>, platform: &Platform) -> Result<[u8; 32], MeasureError> {
    let m = parse(text, base_dir)?;
    let page = platform.page_size;
    let in_range = |va: u64| va >= m.base && va - m.base < m.len;
    let page_ok = |va: u64| va.is_multiple_of(page) && in_range(va);
    let arg = MeasureError::Rule("argument");
    if m.base % page != 0 || m.len % page != 0 || m.len == 0 || m.base.checked_add(m.len).is_none() {
        return Err(arg);
    }
    if m.mailboxes > MAX_MAILBOXES {
        return Err(arg);
    }

    let mut chain = Chain(Sha3_256::new_with_prefix(PREFIX));
    let mut create = Vec::with_capacity(64);
    create.extend_from_slice(&m.base.to_le_bytes());
    create.extend_from_slice(&m.len.to_le_bytes());
    create.extend_from_slice(&m.mailboxes.to_le_bytes());
    create.extend_from_slice(&platform.sm_image_hash);
    create.extend_from_slice(&platform.capabilities.to_le_bytes());
    chain.record(0x01, &create);

    // Physical page cursor: tables take pages 0, 1, ...; loads must climb.
    let mut next_free = 0u64;
    let mut loaded = false;
    let mut mapped = BTreeSet::new();
    let mut threads = 0;
    for op in &m.ops {
        match op {
            Op::Table(va) => {
                if !page_ok(*va) {
                    return Err(arg);
                }
                if loaded {
                    return Err(MeasureError::Rule("data-before-tables"));
                }
                next_free += 1;
                chain.record(0x02, &va.to_le_bytes());
            }
            Op::Load { vaddr, phys, perms, page: contents } => {
                if !page_ok(*vaddr) {
                    return Err(arg);
                }
                if !mapped.insert(*vaddr) {
                    return Err(MeasureError::Rule("alias"));
                }
                if *phys < next_free {
                    return Err(MeasureError::Rule("order"));
                }
                next_free = phys + 1;
                loaded = true;
                let mut full = match contents {
                    Contents::Fill(b) => vec![*b; page as usize],
                    Contents::Bytes(v) if v.len() as u64 > page => return Err(arg),
                    Contents::Bytes(v) => v.clone(),
                };
                full.resize(page as usize, 0);
                let mut body = Vec::with_capacity(17 + full.len());
                body.extend_from_slice(&vaddr.to_le_bytes());
                body.push(*perms);
                body.extend_from_slice(&page.to_le_bytes());
                body.extend_from_slice(&full);
                chain.record(0x03, &body);
            }
            Op::Thread { entry, handlers } => {
                if !in_range(*entry) || !handlers.values().all(|h| in_range(*h)) {
                    return Err(arg);
                }
                threads += 1;
                let mut body = entry.to_le_bytes().to_vec();
                body.extend_from_slice(&(handlers.len() as u64).to_le_bytes());
                for (code, addr) in handlers {
                    body.push(*code);
                    body.extend_from_slice(&addr.to_le_bytes());
                }
                chain.record(0x04, &body);
            }
        }
    }
    if threads == 0 {
        return Err(MeasureError::Rule("no-threads"));
    }
    Ok(chain.0.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: Platform = Platform {
        page_size: 4096,
        sm_image_hash: [7; 32],
        capabilities: 0b11001,
    };

    fn rule(text: &str) -> Option<&'static str> {
        measure(text, None, &P).err().and_then(|e| e.rule())
    }

    #[test]
    fn rules() {
        let head = "evrange 0x400000 0x4000\npage_table 0x400000\n";
        let t = "thread entry=0x400000\n";
        assert_eq!(rule(&format!("{head}load 0x401000 phys=1 perms=r fill=1\n{t}")), None);
        assert_eq!(
            rule(&format!("{head}load 0x401000 phys=1 perms=r fill=1\nload 0x401000 phys=2 perms=r fill=1\n{t}")),
            Some("alias")
        );
        assert_eq!(
            rule(&format!("{head}load 0x401000 phys=2 perms=r fill=1\nload 0x402000 phys=2 perms=r fill=1\n{t}")),
            Some("order")
        );
        assert_eq!(rule(&format!("{head}load 0x401000 phys=0 perms=r fill=1\n{t}")), Some("order"));
        assert_eq!(
            rule(&format!("{head}load 0x401000 phys=1 perms=r fill=1\npage_table 0x402000\n{t}")),
            Some("data-before-tables")
        );
        assert_eq!(rule(&format!("{head}load 0x404000 phys=1 perms=r fill=1\n{t}")), Some("argument"));
        assert_eq!(rule(&format!("{head}load 0x401000 phys=1 perms=r hex={}\n{t}", "00".repeat(4097))), Some("argument"));
        assert_eq!(rule("evrange 0x400000 0x4000\nmailboxes 9\nthread entry=0x400000\n"), Some("argument"));
        assert_eq!(rule(head), Some("no-threads"));
    }

    #[test]
    fn syntax_errors_carry_the_line() {
        let e = measure("evrange 0x400000 0x1000\nload 0x400000 perms=r fill=1\n", None, &P).unwrap_err();
        assert_eq!(e.rule(), None);
        assert!(matches!(e, MeasureError::Syntax { line: 2, .. }));
        assert!(measure("", None, &P).is_err());
        assert!(measure("thread entry=0x0 bogus=1\n", None, &P).is_err());
    }

    #[test]
    fn padding_and_fill_agree() {
        let a = "evrange 0x0 0x1000\nload 0x0 phys=0 perms=r fill=0\nthread entry=0x0\n";
        let b = "evrange 0x0 0x1000\nload 0x0 phys=0 perms=r hex=00\nthread entry=0x0\n";
        assert_eq!(measure(a, None, &P), measure(b, None, &P));
    }
}
