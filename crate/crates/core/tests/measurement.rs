// SPDX-License-Identifier: Apache-2.0

use proptest::prelude::*;
use sanctorum::harness::{defective_manifest, load_manifest, random_manifest, Defect, Placement};
use sanctorum::machine::MachineConfig;
use sanctorum::manifest::Manifest;
use sanctorum::monitor::{MonitorOptions, SecurityMonitor};
use sanctorum::resource::ResourceId;
use sanctorum::types::{Digest, EnclaveId};
use sha3::{Digest as _, Sha3_256};

fn fresh() -> SecurityMonitor {
    SecurityMonitor::boot(MachineConfig::desk(), MonitorOptions::default()).unwrap()
}

fn placements() -> Vec<Placement> {
    let at = |eid: u64, units: &[u32]| Placement {
        eid: EnclaveId(eid),
        tids: Vec::new(),
        units: units.iter().map(|r| ResourceId::Region(*r)).collect(),
    };
    vec![at(0x1000, &[2]), at(0x3000, &[7]), at(0x6000, &[4, 5]), at(0x2000, &[6, 1])]
}

fn live(manifest: &Manifest, placement: &Placement) -> Result<Digest, &'static str> {
    let mut sm = fresh();
    load_manifest(&mut sm, manifest, placement).map_err(|e| e.rule().unwrap_or("other"))
}

fn offline(manifest: &Manifest) -> Result<Digest, &'static str> {
    let sm = fresh();
    manifest
        .expected_measurement(sm.machine().page_size(), sm.sm_identity().sm_image_hash(), sm.capabilities())
        .map_err(|e| e.load_rule().unwrap_or("other"))
}

fn record(out: &mut Sha3_256, tag: u8, body: &[u8]) {
    out.update([tag]);
    out.update((body.len() as u64).to_le_bytes());
    out.update(body);
}

#[test]
fn byte_layout_matches_a_hand_built_chain() {
    let text = "evrange 0x400000 0x2000\nmailboxes 2\npage_table 0x400000\n\
                load 0x401000 phys=3 perms=rw hex=0102\nthread entry=0x400010 page_fault=0x400020\n";
    let m = Manifest::parse(text, None).unwrap();
    let sm = fresh();
    let image = sm.sm_identity().sm_image_hash();
    let caps = sm.capabilities();

    let mut h = Sha3_256::new();
    h.update(b"sanctorum-enclave-v1");
    let mut create = Vec::new();
    for v in [0x400000u64, 0x2000, 2] {
        create.extend_from_slice(&v.to_le_bytes());
    }
    create.extend_from_slice(&image);
    create.extend_from_slice(&caps.to_le_bytes());
    record(&mut h, 1, &create);
    record(&mut h, 2, &0x400000u64.to_le_bytes());
    let mut load = 0x401000u64.to_le_bytes().to_vec();
    load.push(0b011);
    load.extend_from_slice(&4096u64.to_le_bytes());
    let mut page = vec![0u8; 4096];
    page[..2].copy_from_slice(&[1, 2]);
    load.extend_from_slice(&page);
    record(&mut h, 3, &load);
    let mut thread = 0x400010u64.to_le_bytes().to_vec();
    thread.extend_from_slice(&1u64.to_le_bytes());
    thread.push(0x01);
    thread.extend_from_slice(&0x400020u64.to_le_bytes());
    record(&mut h, 4, &thread);
    let expected: Digest = h.finalize().into();

    assert_eq!(offline(&m), Ok(expected));
    assert_eq!(live(&m, &placements()[0]), Ok(expected));
}

#[test]
fn corpus_live_equals_offline_under_every_placement() {
    for seed in 0..40 {
        let e = random_manifest(seed);
        let want = offline(&e.manifest).unwrap_or_else(|r| panic!("seed {seed}: {r}\n{}", e.text));
        for p in placements() {
            assert_eq!(live(&e.manifest, &p), Ok(want), "seed {seed} placement {p:?}\n{}", e.text);
        }
    }
}

#[test]
fn defective_corpus_reports_the_planted_rule() {
    for seed in 0..40 {
        for d in Defect::ALL {
            let e = defective_manifest(seed, d);
            assert_eq!(offline(&e.manifest), Err(d.rule()), "seed {seed}\n{}", e.text);
            assert_eq!(live(&e.manifest, &placements()[1]), Err(d.rule()), "seed {seed}\n{}", e.text);
        }
    }
}

#[test]
fn physical_placement_in_the_manifest_is_not_measured() {
    let a = "evrange 0x400000 0x4000\npage_table 0x400000\nload 0x400000 phys=1 perms=rx fill=0x11\n\
             load 0x401000 phys=2 perms=rw fill=0x22\nthread entry=0x400000\n";
    let b = a.replace("phys=1", "phys=3").replace("phys=2", "phys=9");
    let ma = Manifest::parse(a, None).unwrap();
    let mb = Manifest::parse(&b, None).unwrap();
    assert_eq!(offline(&ma), offline(&mb));
    assert_eq!(live(&ma, &placements()[0]), live(&mb, &placements()[2]));
}

#[test]
fn every_measured_field_matters() {
    let base = "evrange 0x400000 0x4000\nmailboxes 1\npage_table 0x400000\n\
                load 0x401000 phys=1 perms=rw hex=aa\nthread entry=0x400000\n";
    let variants = [
        base.replace("0x4000\n", "0x5000\n"),
        base.replace("mailboxes 1", "mailboxes 2"),
        base.replace("page_table 0x400000", "page_table 0x402000"),
        base.replace("perms=rw", "perms=rwx"),
        base.replace("hex=aa", "hex=ab"),
        base.replace("load 0x401000", "load 0x402000"),
        base.replace("entry=0x400000", "entry=0x400008"),
        base.replace("entry=0x400000", "entry=0x400000 page_fault=0x400000"),
        format!("{base}thread entry=0x400000\n"),
    ];
    let d0 = offline(&Manifest::parse(base, None).unwrap()).unwrap();
    let mut seen = std::collections::BTreeSet::from([d0]);
    for v in &variants {
        let d = offline(&Manifest::parse(v, None).unwrap()).unwrap();
        assert!(seen.insert(d), "collision for\n{v}");
    }
}

#[test]
fn swapped_operations_change_the_measurement() {
    let a = "evrange 0x400000 0x4000\npage_table 0x400000\nload 0x400000 phys=1 perms=r fill=1\n\
             load 0x401000 phys=2 perms=r fill=2\nthread entry=0x400000\n";
    let b = "evrange 0x400000 0x4000\npage_table 0x400000\nload 0x401000 phys=1 perms=r fill=2\n\
             load 0x400000 phys=2 perms=r fill=1\nthread entry=0x400000\n";
    let (ma, mb) = (Manifest::parse(a, None).unwrap(), Manifest::parse(b, None).unwrap());
    assert_ne!(offline(&ma), offline(&mb));
    assert_ne!(live(&ma, &placements()[0]), live(&mb, &placements()[0]));
}

#[test]
fn manifest_text_roundtrips() {
    for seed in 0..30 {
        let e = random_manifest(seed);
        let again = Manifest::parse(&e.manifest.to_text(), None).unwrap();
        assert_eq!(again, e.manifest);
    }
}

#[test]
fn file_contents_are_pinned_by_hash() {
    let dir = std::env::temp_dir().join(format!("sanctorum-measure-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("code.bin"), b"\x13\x00\x00\x00").unwrap();
    let digest = hex::encode(Sha3_256::digest(b"\x13\x00\x00\x00"));
    let good = format!(
        "evrange 0x400000 0x1000\npage_table 0x400000\nload 0x400000 phys=1 perms=rx file=code.bin sha3={digest}\nthread entry=0x400000\n"
    );
    let m = Manifest::parse(&good, Some(&dir)).unwrap();
    let inline = Manifest::parse(&good.replace(&format!("file=code.bin sha3={digest}"), "hex=13000000"), None).unwrap();
    assert_eq!(offline(&m), offline(&inline));
    let bad = good.replace(&digest[..2], if &digest[..2] == "00" { "11" } else { "00" });
    assert!(Manifest::parse(&bad, Some(&dir)).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn placement_never_changes_the_digest(seed in any::<u64>(), pick in 0usize..4) {
        let e = random_manifest(seed);
        let p = &placements()[pick];
        prop_assert_eq!(live(&e.manifest, p), offline(&e.manifest));
    }

    #[test]
    fn every_defect_is_caught_with_its_rule(seed in any::<u64>(), which in 0usize..3) {
        let d = Defect::ALL[which];
        let e = defective_manifest(seed, d);
        prop_assert_eq!(offline(&e.manifest), Err(d.rule()));
        prop_assert_eq!(live(&e.manifest, &placements()[0]), Err(d.rule()));
    }
}
