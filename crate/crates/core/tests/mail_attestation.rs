// SPDX-License-Identifier: Apache-2.0

mod common;

use common::{desk, enter, launch, run_ok, E1, E2, T1, T2};
use sanctorum::attestation::{
    attest_collect, attest_request, signing_arm, signing_init, signing_serve, verify_attestation, AttestationBundle,
    RemoteVerifier, ServeOutcome, VerifyFailure,
};
use sanctorum::crypto::{self, derive_sm_identity, Certificate, DeviceIdentity, Entropy};
use sanctorum::harness::{run_scenario, RunOptions, Scenario};
use sanctorum::manifest::Manifest;
use sanctorum::types::CoreId;

const TWO_APPS: &str = "machine desk
    launch app0 eid=0x1000 tids=0x1800 units=region:6 => save A
    launch app1 eid=0x2000 tids=0x2800 units=region:5 => save B
    os enter_enclave 0x1000 0x1800 0 => ok
    os enter_enclave 0x2000 0x2800 1 => ok
";

#[test]
fn local_attestation_carries_sender_measurement() {
    run_ok(&format!(
        "{TWO_APPS}
         core 1 send_mail 0x1000 text:hi => err:NotAccepting
         core 0 accept_mail 0 enclave:0x2000 => ok
         core 0 get_mail 0 => err:Empty
         core 1 send_mail 0x1000 text:hi => ok
         core 1 send_mail 0x1000 text:again => err:NotAccepting
         core 0 get_mail 0 => mail:enclave:0x2000:$B:6869
         core 0 get_mail 0 => err:Empty
         core 0 get_mail 1 => err:NoSuchMailbox
         os get_mail 0 => err:NotEnclave"
    ));
}

#[test]
fn mailbox_rejects_other_senders_and_oversize() {
    run_ok(&format!(
        "{TWO_APPS}
         core 0 accept_mail 0 enclave:0x3000 => ok
         core 1 send_mail 0x1000 text:x => err:NotAccepting
         core 0 accept_mail 0 enclave:0x2000 => ok
         core 1 send_mail 0x7000 text:x => err:NoSuchEnclave
         core 1 send_mail 0x1000 hex:{} => err:MessageTooLarge
         core 1 send_mail 0x1000 hex:{} => ok",
        "00".repeat(sanctorum::monitor::MAILBOX_SIZE + 1),
        "00".repeat(sanctorum::monitor::MAILBOX_SIZE),
    ));
}

#[test]
fn attestation_key_only_reaches_the_signing_enclave() {
    run_ok(
        "machine desk
         launch app0 eid=0x1000 tids=0x1800 units=region:6 => ok
         launch signing eid=0x2000 tids=0x2800 units=region:5 => save S
         os get_attestation_key => err:NotEnclave
         os enter_enclave 0x1000 0x1800 0 => ok
         core 0 accept_mail 0 sm => ok
         core 0 get_attestation_key => err:NotSigningEnclave
         core 0 get_mail 0 => err:Empty
         os enter_enclave 0x2000 0x2800 1 => ok
         core 1 get_attestation_key => err:NotAccepting
         core 1 accept_mail 0 sm => ok
         core 1 get_attestation_key => ok
         core 1 get_mail 0 => mail:sm",
    );
}

#[test]
fn signing_enclave_measurement_is_hard_coded() {
    let report = run_ok(
        "machine desk
         let W = measure signing
         launch signing eid=0x2000 tids=0x2800 units=region:5 => measurement:$W
         os owner_of region:5 => owner:enclave:0x2000:owned",
    );
    assert_eq!(report.trace.len(), 2);
    let sm = &report.monitor;
    let expected = Manifest::signing_enclave()
        .expected_measurement(sm.machine().page_size(), sm.sm_identity().sm_image_hash(), sm.capabilities())
        .unwrap();
    assert_eq!(sm.signing_measurement(), expected);
}

#[test]
fn public_fields_are_readable_by_anyone() {
    let mut sm = desk();
    let os = sanctorum::monitor::Caller::OS;
    let field = |sm: &mut sanctorum::monitor::SecurityMonitor, id| match sm
        .call(os, sanctorum::monitor::ApiCall::GetField(id))
        .unwrap()
    {
        sanctorum::monitor::ApiValue::Bytes(b) => b,
        other => panic!("{other:?}"),
    };
    let public = field(&mut sm, 0);
    let sm_cert = Certificate::from_bytes(&field(&mut sm, 1)).unwrap();
    let dev_cert = Certificate::from_bytes(&field(&mut sm, 2)).unwrap();
    assert_eq!(sm_cert.subject.to_vec(), public);
    assert_eq!(sm_cert.issuer, dev_cert.subject);
    assert!(sm_cert.verify() && dev_cert.verify());
    assert_eq!(field(&mut sm, 3), sm_cert.attribute.to_vec());
    assert_eq!(
        sm.call(os, sanctorum::monitor::ApiCall::GetField(9)),
        Err(sanctorum::Error::NoSuchField)
    );
}

/// Launches the signing enclave and an app and runs the remote protocol.
fn remote_flow(seed: u64) -> (AttestationBundle, RemoteVerifier, [u8; 32], sanctorum::monitor::SecurityMonitor) {
    let mut sm = desk();
    let app = launch(&mut sm, &Manifest::builtin_app(0), E1, T1, 6);
    launch(&mut sm, &Manifest::signing_enclave(), E2, T2, 5);
    enter(&mut sm, E1, T1, 0);
    enter(&mut sm, E2, T2, 1);
    let (app_core, signer_core) = (CoreId(0), CoreId(1));
    let device_key = sm.device_public_key();
    let verifier = RemoteVerifier::new(&mut Entropy::seeded(seed), device_key, app);

    signing_init(&mut sm, signer_core).unwrap();
    signing_arm(&mut sm, signer_core, E1).unwrap();
    let state = attest_request(&mut sm, app_core, E2, &verifier.challenge(), app).unwrap();
    assert_eq!(signing_serve(&mut sm, signer_core).unwrap(), ServeOutcome::Replied);
    let bundle = attest_collect(&mut sm, app_core, &state).unwrap();

    let theirs = verifier.finish(&bundle, &state.public).unwrap();
    let ours = state.channel().unwrap();
    let sealed = ours.seal(0, b"secret");
    assert_eq!(theirs.open(0, &sealed).unwrap(), b"secret");
    (bundle, verifier, state.public, sm)
}

#[test]
fn remote_attestation_end_to_end() {
    let (bundle, verifier, _, sm) = remote_flow(1);
    let nonce = verifier.challenge().nonce;
    assert_eq!(
        verify_attestation(&bundle, &nonce, &bundle.enclave_measurement, &sm.device_public_key()),
        Ok(())
    );
    assert_eq!(
        verify_attestation(&bundle, &[0; 32], &bundle.enclave_measurement, &sm.device_public_key()),
        Err(VerifyFailure::Nonce)
    );
    let roundtrip = AttestationBundle::from_bytes(&bundle.to_bytes()).unwrap();
    assert_eq!(roundtrip, bundle);
}

#[test]
fn signer_refuses_a_lying_requester() {
    let mut sm = desk();
    let app = launch(&mut sm, &Manifest::builtin_app(0), E1, T1, 6);
    launch(&mut sm, &Manifest::signing_enclave(), E2, T2, 5);
    enter(&mut sm, E1, T1, 0);
    enter(&mut sm, E2, T2, 1);
    let verifier = RemoteVerifier::new(&mut Entropy::seeded(3), sm.device_public_key(), app);
    signing_init(&mut sm, CoreId(1)).unwrap();
    signing_arm(&mut sm, CoreId(1), E1).unwrap();
    let claimed = Manifest::builtin_app(1)
        .expected_measurement(sm.machine().page_size(), sm.sm_identity().sm_image_hash(), sm.capabilities())
        .unwrap();
    attest_request(&mut sm, CoreId(0), E2, &verifier.challenge(), claimed).unwrap();
    assert_eq!(signing_serve(&mut sm, CoreId(1)).unwrap(), ServeOutcome::Refused);
}

#[test]
fn bundle_from_another_device_is_rejected() {
    let (bundle, verifier, _, sm) = remote_flow(2);
    let other = DeviceIdentity::simulated("some other device");
    let nonce = verifier.challenge().nonce;
    assert_eq!(
        verify_attestation(&bundle, &nonce, &bundle.enclave_measurement, &other.public_key()),
        Err(VerifyFailure::DeviceCertificate)
    );
    // A forged monitor key certified by the other device fails the chain.
    let forged = derive_sm_identity(&other, b"forged");
    let mut b = bundle;
    b.sm_certificate = *forged.certificate();
    assert_eq!(
        verify_attestation(&b, &nonce, &b.enclave_measurement, &sm.device_public_key()),
        Err(VerifyFailure::SmCertificate)
    );
}

#[test]
fn channel_binding_is_enforced() {
    let (bundle, verifier, public, _) = remote_flow(4);
    let mut wrong = public;
    wrong[0] ^= 1;
    assert!(matches!(verifier.finish(&bundle, &wrong), Err(VerifyFailure::ChannelBinding)));
    let mut b = bundle;
    b.channel_binding[5] ^= 0x80;
    assert!(matches!(verifier.finish(&b, &public), Err(VerifyFailure::Signature)));
}

#[test]
fn signature_check_uses_the_certified_key() {
    let (bundle, verifier, _, sm) = remote_flow(5);
    let nonce = verifier.challenge().nonce;
    let impostor = [9u8; 32];
    let mut b = bundle;
    b.signature = crypto::sign(
        &impostor,
        &sanctorum::attestation::signed_payload(&b.nonce, &b.channel_binding, &b.enclave_measurement),
    );
    assert_eq!(
        verify_attestation(&b, &nonce, &b.enclave_measurement, &sm.device_public_key()),
        Err(VerifyFailure::Signature)
    );
}

#[test]
fn scripted_remote_flow_exports_a_bundle() {
    let text = "machine desk
        launch app0 eid=0x1000 tids=0x1800 units=region:6 => save A
        launch signing eid=0x2000 tids=0x2800 units=region:5 => ok
        os enter_enclave 0x1000 0x1800 0 => ok
        os enter_enclave 0x2000 0x2800 1 => ok
        signing-init core=1 => ok
        signing-arm core=1 requester=0x1000 => ok
        verifier V measurement=$A
        attest-request core=0 signer=0x2000 verifier=V => ok
        signing-serve core=1 => replied
        attest-collect core=0 verifier=V => ok
        verify V => ok
        export-bundle V";
    let s = Scenario::parse(text, None).unwrap();
    let a = run_scenario(&s, RunOptions { seed: Some(7), stress: false }).unwrap();
    let b = run_scenario(&s, RunOptions { seed: Some(7), stress: false }).unwrap();
    assert_eq!(a.bundles.len(), 1);
    assert_eq!(a.bundles[0].bytes, b.bundles[0].bytes);
    let bundle = AttestationBundle::from_bytes(&a.bundles[0].bytes).unwrap();
    assert_eq!(
        verify_attestation(&bundle, &a.bundles[0].nonce, &a.bundles[0].measurement, &a.bundles[0].device_key),
        Ok(())
    );
    let c = run_scenario(&s, RunOptions { seed: Some(8), stress: false }).unwrap();
    assert_ne!(a.bundles[0].nonce, c.bundles[0].nonce);
}
