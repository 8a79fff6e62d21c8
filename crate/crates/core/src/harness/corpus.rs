// SPDX-License-Identifier: Apache-2.0

//! Random manifest corpora for differential measurement tests.
//!
//! Generated manifests fit in one desk-config region (16 pages) and use
//! at most two threads.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::manifest::Manifest;

/// Highest physical page index a generated manifest uses.
pub const MAX_PHYS: u64 = 15;

/// A single loading-rule violation planted in an otherwise valid manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Defect {
    /// A second load of an already mapped virtual page.
    Alias,
    /// A load whose physical page is not above the previous one.
    Order,
    /// A page table requested after data was loaded.
    DataBeforeTables,
}

impl Defect {
    pub const ALL: [Defect; 3] = [Defect::Alias, Defect::Order, Defect::DataBeforeTables];

    /// Rule identifier reported by both the monitor and the offline tool.
    pub fn rule(self) -> &'static str {
        match self {
            Defect::Alias => "alias",
            Defect::Order => "order",
            Defect::DataBeforeTables => "data-before-tables",
        }
    }
}

/// A generated manifest in text form, with its parse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub seed: u64,
    pub text: String,
    pub manifest: Manifest,
    pub defect: Option<Defect>,
}

struct Load {
    vpage: u64,
    phys: u64,
    line: String,
}

fn contents(rng: &mut ChaCha8Rng) -> String {
    if rng.gen_bool(0.4) {
        format!("fill={:#04x}", rng.gen::<u8>())
    } else {
        let len = rng.gen_range(1..=48);
        let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        format!("hex={}", hex::encode(bytes))
    }
}

fn load_line(rng: &mut ChaCha8Rng, base: u64, vpage: u64, phys: u64) -> String {
    let perms = ["r", "rw", "rx", "rwx"].choose(rng).unwrap();
    format!("load {:#x} phys={phys} perms={perms} {}", base + vpage * 0x1000, contents(rng))
}

/// Valid manifest drawn from `seed`.
pub fn random_manifest(seed: u64) -> CorpusEntry {
    build(seed, None)
}

/// Manifest drawn from `seed` carrying exactly one `defect`.
pub fn defective_manifest(seed: u64, defect: Defect) -> CorpusEntry {
    build(seed, Some(defect))
}

fn build(seed: u64, defect: Option<Defect>) -> CorpusEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = 0x40_0000 + rng.gen_range(0..16u64) * 0x1_0000;
    let pages = rng.gen_range(4..=16u64);
    let mut text = String::new();
    writeln!(text, "evrange {base:#x} {:#x}", pages * 0x1000).unwrap();
    writeln!(text, "mailboxes {}", rng.gen_range(0..=3)).unwrap();

    let tables = rng.gen_range(1..=2u64);
    for _ in 0..tables {
        let vpage = rng.gen_range(0..pages);
        writeln!(text, "page_table {:#x}", base + vpage * 0x1000).unwrap();
    }

    // Distinct virtual pages, strictly ascending physical pages above the
    // tables. One virtual page always stays free for an order defect.
    let count = rng.gen_range(1..=4usize).min(pages as usize - 1);
    let mut vpages: Vec<u64> = (0..pages).collect();
    vpages.shuffle(&mut rng);
    let mut phys = tables - 1;
    let mut loads = Vec::new();
    for &vpage in vpages.iter().take(count) {
        let room = MAX_PHYS - 1 - phys - (count - loads.len()) as u64;
        phys += 1 + rng.gen_range(0..=room.min(2));
        loads.push(Load {
            vpage,
            phys,
            line: load_line(&mut rng, base, vpage, phys),
        });
    }

    // Defects go after a random load, using only pages that are otherwise legal.
    let at = rng.gen_range(0..loads.len());
    let mut planted = None;
    if let Some(d) = defect {
        let last_phys = loads[at].phys;
        let line = match d {
            Defect::Alias => {
                let vpage = loads[rng.gen_range(0..=at)].vpage;
                load_line(&mut rng, base, vpage, last_phys + 1)
            }
            Defect::Order => {
                let vpage = vpages[count];
                let phys = rng.gen_range(tables.saturating_sub(1)..=last_phys);
                load_line(&mut rng, base, vpage, phys)
            }
            Defect::DataBeforeTables => {
                format!("page_table {:#x}", base + rng.gen_range(0..pages) * 0x1000)
            }
        };
        planted = Some(line);
    }

    for (i, l) in loads.iter().enumerate() {
        writeln!(text, "{}", l.line).unwrap();
        if i == at {
            if let Some(line) = &planted {
                writeln!(text, "{line}").unwrap();
            }
        }
    }

    for _ in 0..rng.gen_range(1..=2) {
        let entry = base + rng.gen_range(0..pages) * 0x1000 + rng.gen_range(0..0x100u64) * 8;
        let mut line = format!("thread entry={entry:#x}");
        if rng.gen_bool(0.5) {
            let h = base + rng.gen_range(0..pages * 0x1000);
            write!(line, " page_fault={h:#x}").unwrap();
        }
        if rng.gen_bool(0.3) {
            let h = base + rng.gen_range(0..pages * 0x1000);
            write!(line, " illegal_instruction={h:#x}").unwrap();
        }
        writeln!(text, "{line}").unwrap();
    }

    let manifest = Manifest::parse(&text, None).expect("generated manifest parses");
    CorpusEntry {
        seed,
        text,
        manifest,
        defect,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::ManifestOp;

    #[test]
    fn valid_manifests_fit_one_region() {
        for seed in 0..200 {
            let e = random_manifest(seed);
            assert!(e.manifest.pages_needed() <= MAX_PHYS + 1, "{}", e.text);
            assert_eq!(e.defect, None);
        }
    }

    #[test]
    fn defects_are_single_and_typed() {
        for seed in 0..100 {
            for d in Defect::ALL {
                let e = defective_manifest(seed, d);
                let valid = random_manifest(seed).manifest;
                let loads = |m: &Manifest| m.ops.iter().filter(|o| matches!(o, ManifestOp::Load { .. })).count();
                let tables = |m: &Manifest| m.ops.iter().filter(|o| matches!(o, ManifestOp::PageTable { .. })).count();
                assert_eq!(loads(&e.manifest) + tables(&e.manifest), loads(&valid) + tables(&valid) + 1);
            }
        }
    }
}
