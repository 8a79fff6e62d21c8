// SPDX-License-Identifier: Apache-2.0

//! Enclave programs for remote attestation and the remote verifier.
//!
//! Each function is one step of an enclave program, executed against the
//! enclave running on `core`. Steps only use the monitor API and the
//! enclave's own memory, so the monitor's checks apply to them exactly as
//! they would to real enclave code.
//!
//! Flow: the signing enclave fetches the monitor's key once
//! ([`signing_init`]) and arms a mailbox for a requester
//! ([`signing_arm`]). The requester sends `nonce ‖ binding ‖ measurement`
//! ([`attest_request`]); the signing enclave signs it if the measurement is
//! the one the monitor stamped on the mail ([`signing_serve`]); the
//! requester assembles the bundle ([`attest_collect`]).

use thiserror::Error;

use super::{signed_payload, verify_attestation, AttestationBundle, VerifyFailure};
use crate::crypto::{self, channel_binding, key_agreement, Certificate, Entropy, SecureChannel};
use crate::error::Error;
use crate::monitor::{ApiCall, ApiValue, Caller, FieldId, MemoryOp, SecurityMonitor};
use crate::types::{CoreId, Digest, EnclaveId, ProtectionDomain, VirtAddr};

/// Where the signing enclave keeps the attestation key: its scratch page.
pub const SIGNING_KEY_VADDR: VirtAddr = VirtAddr(0x40_1000);

const KEY_MAILBOX: u32 = 0;
const REQUEST_MAILBOX: u32 = 1;
const REPLY_MAILBOX: u32 = 0;
const REQUEST_LEN: usize = 96;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("{step} failed: {error}")]
    Api { step: &'static str, error: Error },
    #[error("no reply from the signing enclave")]
    NoReply,
    #[error("mail from an unexpected sender")]
    UnexpectedSender,
    #[error("malformed message")]
    Malformed,
    #[error("memory access failed")]
    Memory,
}

/// The caller identity of whatever runs on `core`.
fn caller_on(sm: &SecurityMonitor, core: CoreId) -> Caller {
    let domain = sm
        .machine()
        .core(core)
        .map_or(ProtectionDomain::UntrustedOS, |c| c.current_domain);
    Caller { domain, core: Some(core) }
}

fn enclave_call(sm: &mut SecurityMonitor, core: CoreId, step: &'static str, call: ApiCall) -> Result<ApiValue, ProtocolError> {
    sm.call(caller_on(sm, core), call)
        .map_err(|error| ProtocolError::Api { step, error })
}

fn take_mail(
    sm: &mut SecurityMonitor,
    core: CoreId,
    index: u32,
) -> Result<(Vec<u8>, ProtectionDomain, Digest), ProtocolError> {
    match sm.call(caller_on(sm, core), ApiCall::GetMail(index)) {
        Ok(ApiValue::Mail {
            message,
            sender,
            sender_measurement,
        }) => Ok((message, sender, sender_measurement)),
        Ok(_) => Err(ProtocolError::Malformed),
        Err(Error::Empty) => Err(ProtocolError::NoReply),
        Err(error) => Err(ProtocolError::Api { step: "get_mail", error }),
    }
}

/// Signing enclave: obtains the attestation key and stores it in private memory.
pub fn signing_init(sm: &mut SecurityMonitor, core: CoreId) -> Result<(), ProtocolError> {
    enclave_call(
        sm,
        core,
        "accept_mail",
        ApiCall::AcceptMail {
            index: KEY_MAILBOX,
            sender: ProtectionDomain::SecurityMonitor,
        },
    )?;
    enclave_call(sm, core, "get_attestation_key", ApiCall::GetAttestationKey)?;
    let (key, sender, _) = take_mail(sm, core, KEY_MAILBOX)?;
    if sender != ProtectionDomain::SecurityMonitor {
        return Err(ProtocolError::UnexpectedSender);
    }
    if key.len() != 32 {
        return Err(ProtocolError::Malformed);
    }
    for (i, word) in key.chunks_exact(8).enumerate() {
        let value = u64::from_le_bytes(word.try_into().unwrap());
        sm.memory_access(core, VirtAddr(SIGNING_KEY_VADDR.0 + 8 * i as u64), MemoryOp::Write(value))
            .map_err(|_| ProtocolError::Memory)?;
    }
    Ok(())
}

/// Signing enclave: accepts one request from `requester`.
pub fn signing_arm(sm: &mut SecurityMonitor, core: CoreId, requester: EnclaveId) -> Result<(), ProtocolError> {
    enclave_call(
        sm,
        core,
        "accept_mail",
        ApiCall::AcceptMail {
            index: REQUEST_MAILBOX,
            sender: ProtectionDomain::Enclave(requester),
        },
    )?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServeOutcome {
    Replied,
    /// Malformed request, or one naming a measurement other than the
    /// sender's: dropped without a reply.
    Refused,
}

/// Signing enclave: answers the pending request, if it is well formed.
pub fn signing_serve(sm: &mut SecurityMonitor, core: CoreId) -> Result<ServeOutcome, ProtocolError> {
    let (request, sender, sender_measurement) = take_mail(sm, core, REQUEST_MAILBOX)?;
    let Some(requester) = sender.enclave() else {
        return Ok(ServeOutcome::Refused);
    };
    if request.len() != REQUEST_LEN || request[64..] != sender_measurement {
        return Ok(ServeOutcome::Refused);
    }
    let mut key = [0u8; 32];
    for i in 0..4 {
        let word = sm
            .memory_access(core, VirtAddr(SIGNING_KEY_VADDR.0 + 8 * i as u64), MemoryOp::Read)
            .map_err(|_| ProtocolError::Memory)?;
        key[8 * i..8 * i + 8].copy_from_slice(&word.to_le_bytes());
    }
    let nonce: [u8; 32] = request[..32].try_into().unwrap();
    let binding: Digest = request[32..64].try_into().unwrap();
    let signature = crypto::sign(&key, &signed_payload(&nonce, &binding, &sender_measurement));
    enclave_call(
        sm,
        core,
        "send_mail",
        ApiCall::SendMail {
            recipient: requester,
            message: signature.to_vec(),
        },
    )?;
    Ok(ServeOutcome::Replied)
}

/// The verifier's challenge: a fresh nonce and its key-agreement public value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttestationRequest {
    pub nonce: [u8; 32],
    pub verifier_public: [u8; 32],
}

/// Requester-side protocol state, kept in the requesting enclave.
#[derive(Clone)]
pub struct RequesterState {
    pub signer: EnclaveId,
    pub nonce: [u8; 32],
    pub measurement: Digest,
    pub channel_binding: Digest,
    pub public: [u8; 32],
    secret: [u8; 32],
    verifier_public: [u8; 32],
}

impl std::fmt::Debug for RequesterState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RequesterState")
            .field("signer", &self.signer)
            .field("public", &hex::encode(self.public))
            .finish_non_exhaustive()
    }
}

impl RequesterState {
    /// The enclave's end of the secure channel.
    pub fn channel(&self) -> Result<SecureChannel, crypto::CryptoError> {
        let shared = key_agreement(&self.secret, &self.verifier_public)?;
        Ok(SecureChannel::new(&shared, &self.channel_binding))
    }
}

/// Requester: generates a key-agreement key and asks the signing enclave
/// to attest `measurement`, its own measurement as built.
pub fn attest_request(
    sm: &mut SecurityMonitor,
    core: CoreId,
    signer: EnclaveId,
    challenge: &AttestationRequest,
    measurement: Digest,
) -> Result<RequesterState, ProtocolError> {
    enclave_call(
        sm,
        core,
        "accept_mail",
        ApiCall::AcceptMail {
            index: REPLY_MAILBOX,
            sender: ProtectionDomain::Enclave(signer),
        },
    )?;
    let ApiValue::Random(secret) = enclave_call(sm, core, "get_random", ApiCall::GetRandom)? else {
        return Err(ProtocolError::Malformed);
    };
    let public = crypto::agreement_public(&secret);
    let binding = channel_binding(&public, &challenge.verifier_public);
    let message = [&challenge.nonce[..], &binding, &measurement].concat();
    enclave_call(
        sm,
        core,
        "send_mail",
        ApiCall::SendMail {
            recipient: signer,
            message,
        },
    )?;
    Ok(RequesterState {
        signer,
        nonce: challenge.nonce,
        measurement,
        channel_binding: binding,
        public,
        secret,
        verifier_public: challenge.verifier_public,
    })
}

/// Requester: collects the signature and the public certificates.
pub fn attest_collect(
    sm: &mut SecurityMonitor,
    core: CoreId,
    state: &RequesterState,
) -> Result<AttestationBundle, ProtocolError> {
    let (signature, sender, _) = take_mail(sm, core, REPLY_MAILBOX)?;
    if sender != ProtectionDomain::Enclave(state.signer) {
        return Err(ProtocolError::UnexpectedSender);
    }
    let signature: [u8; 64] = signature.try_into().map_err(|_| ProtocolError::Malformed)?;
    let mut cert = |field: FieldId| -> Result<Certificate, ProtocolError> {
        match enclave_call(sm, core, "get_field", ApiCall::GetField(field as u32))? {
            ApiValue::Bytes(b) => Certificate::from_bytes(&b).map_err(|_| ProtocolError::Malformed),
            _ => Err(ProtocolError::Malformed),
        }
    };
    Ok(AttestationBundle {
        enclave_measurement: state.measurement,
        nonce: state.nonce,
        channel_binding: state.channel_binding,
        signature,
        sm_certificate: cert(FieldId::SmCertificate)?,
        device_certificate: cert(FieldId::DeviceCertificate)?,
    })
}

/// The remote party: issues a challenge and checks the answer.
pub struct RemoteVerifier {
    pub trusted_device_key: [u8; 32],
    pub expected_measurement: Digest,
    nonce: [u8; 32],
    secret: [u8; 32],
}

impl RemoteVerifier {
    pub fn new(entropy: &mut Entropy, trusted_device_key: [u8; 32], expected_measurement: Digest) -> Self {
        RemoteVerifier {
            trusted_device_key,
            expected_measurement,
            nonce: entropy.bytes32(),
            secret: entropy.bytes32(),
        }
    }

    pub fn challenge(&self) -> AttestationRequest {
        AttestationRequest {
            nonce: self.nonce,
            verifier_public: crypto::agreement_public(&self.secret),
        }
    }

    /// Verifies the bundle and that it binds the enclave's key-agreement
    /// value, then opens the verifier's end of the channel.
    pub fn finish(&self, bundle: &AttestationBundle, enclave_public: &[u8; 32]) -> Result<SecureChannel, VerifyFailure> {
        verify_attestation(bundle, &self.nonce, &self.expected_measurement, &self.trusted_device_key)?;
        let verifier_public = crypto::agreement_public(&self.secret);
        if channel_binding(enclave_public, &verifier_public) != bundle.channel_binding {
            return Err(VerifyFailure::ChannelBinding);
        }
        let shared = key_agreement(&self.secret, enclave_public).map_err(|_| VerifyFailure::ChannelBinding)?;
        Ok(SecureChannel::new(&shared, &bundle.channel_binding))
    }
}
