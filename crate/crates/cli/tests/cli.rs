// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sanctorum::attestation::AttestationBundle;

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn sanctorum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sanctorum")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn bundled(name: &str) -> String {
    scenarios().join(name).to_string_lossy().into_owned()
}

#[test]
fn bundled_scenarios_pass() {
    for s in ["local-attestation.scn", "remote-attestation.scn", "adversarial-os.scn"] {
        let o = sanctorum(&["run", &bundled(s)]);
        assert_eq!(code(&o), 0, "{s}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn malformed_and_failing_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let truncated = dir.path().join("truncated.scn");
    std::fs::write(&truncated, "machine desk\nos block_resource").unwrap();
    assert_eq!(code(&sanctorum(&["run", truncated.to_str().unwrap()])), 2);
    assert_eq!(code(&sanctorum(&["run", "/nonexistent.scn"])), 2);
    assert_eq!(code(&sanctorum(&["frobnicate"])), 2);

    let failing = dir.path().join("failing.scn");
    std::fs::write(&failing, "machine desk\nos block_resource region:2 => ok\nos block_resource region:2 => ok\n").unwrap();
    let trace = dir.path().join("t.jsonl");
    let o = sanctorum(&["run", failing.to_str().unwrap(), "--trace-out", trace.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), 2);
}

#[test]
fn traces_depend_only_on_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, name: &str| {
        let t = dir.path().join(name);
        let o = sanctorum(&["run", &bundled("remote-attestation.scn"), "--seed", seed, "--trace-out", t.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        std::fs::read(t).unwrap()
    };
    assert_eq!(run("3", "a"), run("3", "b"));
    assert_ne!(run("3", "a"), run("4", "c"));
}

#[test]
fn measure_matches_a_live_launch() {
    let o = sanctorum(&["measure", &bundled("hello.manifest")]);
    assert_eq!(code(&o), 0);
    let digest = stdout(&o).trim().to_string();
    assert_eq!(digest.len(), 64);
    assert!(digest.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)));

    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("check.scn");
    std::fs::write(
        &s,
        format!(
            "machine desk\nmanifest hello = {}\nlaunch hello eid=0x3000 tids=0x3800 units=region:3 => measurement:{digest}\n",
            bundled("hello.manifest")
        ),
    )
    .unwrap();
    assert_eq!(code(&sanctorum(&["run", s.to_str().unwrap()])), 0);

    // Another machine preset changes the platform inputs.
    let other = sanctorum(&["measure", &bundled("hello.manifest"), "--config", "desk-intervals"]);
    assert_eq!(code(&other), 0);
    assert_ne!(stdout(&other).trim(), digest);
}

#[test]
fn measure_reports_the_violated_rule() {
    let dir = tempfile::tempdir().unwrap();
    let head = "evrange 0x400000 0x4000\npage_table 0x400000\n";
    let cases = [
        ("load 0x401000 phys=2 perms=r fill=1\nload 0x402000 phys=1 perms=r fill=2\n", "order"),
        ("load 0x401000 phys=1 perms=r fill=1\nload 0x401000 phys=2 perms=r fill=2\n", "alias"),
        ("load 0x401000 phys=1 perms=r fill=1\npage_table 0x402000\n", "data-before-tables"),
    ];
    for (i, (ops, rule)) in cases.iter().enumerate() {
        let p = dir.path().join(format!("m{i}.manifest"));
        std::fs::write(&p, format!("{head}{ops}thread entry=0x400000\n")).unwrap();
        let o = sanctorum(&["measure", p.to_str().unwrap()]);
        assert_eq!((code(&o), stdout(&o).trim().to_string()), (2, rule.to_string()));
    }
    let p = dir.path().join("syntax.manifest");
    std::fs::write(&p, "evrange 0x400000\n").unwrap();
    assert_eq!(code(&sanctorum(&["measure", p.to_str().unwrap()])), 2);
    assert_eq!(code(&sanctorum(&["measure", &bundled("hello.manifest"), "--config", "nope"])), 2);
}

#[test]
fn measure_ignores_physical_placement() {
    let dir = tempfile::tempdir().unwrap();
    let text = "evrange 0x400000 0x4000\npage_table 0x400000\nload 0x401000 phys=1 perms=rw hex=aabb\nthread entry=0x401000\n";
    let a = dir.path().join("a.manifest");
    let b = dir.path().join("b.manifest");
    std::fs::write(&a, text).unwrap();
    std::fs::write(&b, text.replace("phys=1", "phys=7")).unwrap();
    let (oa, ob) = (sanctorum(&["measure", a.to_str().unwrap()]), sanctorum(&["measure", b.to_str().unwrap()]));
    assert_eq!(code(&oa), 0);
    assert_eq!(stdout(&oa), stdout(&ob));
}

struct Exported {
    _dir: tempfile::TempDir,
    path: PathBuf,
    nonce: String,
    measurement: String,
    device_key: String,
}

fn export_bundle() -> Exported {
    let dir = tempfile::tempdir().unwrap();
    let o = sanctorum(&["run", &bundled("remote-attestation.scn"), "--bundle-out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let line = stdout(&o).lines().find(|l| l.starts_with("bundle ")).unwrap().to_string();
    let field = |k: &str| line.split_whitespace().find_map(|w| w.strip_prefix(k)).unwrap().to_string();
    Exported {
        path: dir.path().join("V.bundle"),
        nonce: field("nonce="),
        measurement: field("measurement="),
        device_key: field("device-key="),
        _dir: dir,
    }
}

fn verify(path: &Path, nonce: &str, measurement: &str, key: &str) -> Output {
    sanctorum(&[
        "verify",
        path.to_str().unwrap(),
        "--nonce",
        nonce,
        "--measurement",
        measurement,
        "--device-key",
        key,
    ])
}

#[test]
fn verify_accepts_the_exported_bundle_and_names_failures() {
    let e = export_bundle();
    let ok = verify(&e.path, &e.nonce, &e.measurement, &e.device_key);
    assert_eq!((code(&ok), stdout(&ok).trim()), (0, "ok"));

    let wrong_nonce = format!("{}00", &e.nonce[..62]);
    let wrong_nonce = if wrong_nonce == e.nonce { format!("{}11", &e.nonce[..62]) } else { wrong_nonce };
    let o = verify(&e.path, &wrong_nonce, &e.measurement, &e.device_key);
    assert_eq!((code(&o), stdout(&o).trim()), (1, "nonce"));

    let mut bytes = std::fs::read(&e.path).unwrap();
    let sig_at = 3 * (4 + 32) + 4;
    bytes[sig_at + 10] ^= 0x01;
    let flipped = e.path.with_extension("flipped");
    std::fs::write(&flipped, &bytes).unwrap();
    let o = verify(&flipped, &e.nonce, &e.measurement, &e.device_key);
    assert_eq!((code(&o), stdout(&o).trim()), (1, "signature"));

    let truncated = e.path.with_extension("short");
    std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(code(&verify(&truncated, &e.nonce, &e.measurement, &e.device_key)), 2);
    assert_eq!(code(&verify(&e.path, "zz", &e.measurement, &e.device_key)), 2);

    let bundle = AttestationBundle::from_bytes(&std::fs::read(&e.path).unwrap()).unwrap();
    assert_eq!(hex::encode(bundle.enclave_measurement), e.measurement);
}

#[test]
fn explore_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cx");
    let o = sanctorum(&["explore", "--depth", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("states 1 "), "{}", stdout(&o));

    let o = sanctorum(&["explore", "--depth", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);

    let o = sanctorum(&["explore", "--depth", "6", "--budget", "50"]);
    assert_eq!(code(&o), 3);

    let o = sanctorum(&["explore", "--depth", "3", "--mutate", "skip-seal-check", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stdout(&o));
    let files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    assert!(!files.is_empty());
    for f in files {
        let replay = sanctorum(&["run", f.to_str().unwrap()]);
        assert_eq!(code(&replay), 1, "{}", f.display());
    }

    assert_eq!(code(&sanctorum(&["explore", "--mutate", "no-such-check"])), 2);
}
