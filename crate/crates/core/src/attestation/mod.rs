// SPDX-License-Identifier: Apache-2.0

//! Attestation bundles and their verifier.
//!
//! # Bundle serialization
//!
//! A bundle is six fields in this fixed order, each preceded by its length
//! as a little-endian `u32`. Lengths must match exactly and no bytes may
//! follow the last field.
//!
//! | # | field               | length |
//! |---|---------------------|--------|
//! | 1 | enclave measurement | 32     |
//! | 2 | nonce               | 32     |
//! | 3 | channel binding     | 32     |
//! | 4 | signature           | 64     |
//! | 5 | monitor certificate | 160    |
//! | 6 | device certificate  | 160    |
//!
//! Certificates are `subject[32] ‖ attribute[32] ‖ issuer[32] ‖
//! signature[64]`; the issuer signs `subject ‖ attribute`. The bundle
//! signature is an Ed25519 signature by the monitor's attestation key over
//! `nonce ‖ channel binding ‖ enclave measurement`.

mod protocol;

use std::fmt;

use thiserror::Error;

use crate::crypto::{self, Certificate, CERTIFICATE_LEN, SIGNATURE_LEN};
use crate::types::Digest;

pub use protocol::{
    attest_collect, attest_request, signing_arm, signing_init, signing_serve, AttestationRequest,
    ProtocolError, RemoteVerifier, RequesterState, ServeOutcome, SIGNING_KEY_VADDR,
};

/// Evidence that an enclave with a given measurement runs on a genuine device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttestationBundle {
    pub enclave_measurement: Digest,
    pub nonce: [u8; 32],
    pub channel_binding: Digest,
    pub signature: [u8; SIGNATURE_LEN],
    pub sm_certificate: Certificate,
    pub device_certificate: Certificate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("malformed attestation bundle")]
pub struct MalformedBundle;

/// Field lengths in serialization order.
pub const BUNDLE_FIELD_LENGTHS: [usize; 6] = [32, 32, 32, SIGNATURE_LEN, CERTIFICATE_LEN, CERTIFICATE_LEN];

/// Message the monitor's key signs for a bundle.
pub fn signed_payload(nonce: &[u8; 32], channel_binding: &Digest, measurement: &Digest) -> [u8; 96] {
    let mut msg = [0u8; 96];
    msg[..32].copy_from_slice(nonce);
    msg[32..64].copy_from_slice(channel_binding);
    msg[64..].copy_from_slice(measurement);
    msg
}

impl AttestationBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let sm = self.sm_certificate.to_bytes();
        let device = self.device_certificate.to_bytes();
        let fields: [&[u8]; 6] = [
            &self.enclave_measurement,
            &self.nonce,
            &self.channel_binding,
            &self.signature,
            &sm,
            &device,
        ];
        let mut out = Vec::new();
        for f in fields {
            out.extend_from_slice(&(f.len() as u32).to_le_bytes());
            out.extend_from_slice(f);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MalformedBundle> {
        let mut fields = Vec::with_capacity(6);
        let mut rest = bytes;
        for expected in BUNDLE_FIELD_LENGTHS {
            let (len, tail) = rest.split_first_chunk::<4>().ok_or(MalformedBundle)?;
            if u32::from_le_bytes(*len) as usize != expected || tail.len() < expected {
                return Err(MalformedBundle);
            }
            fields.push(&tail[..expected]);
            rest = &tail[expected..];
        }
        if !rest.is_empty() {
            return Err(MalformedBundle);
        }
        let arr = |b: &[u8]| <[u8; 32]>::try_from(b).unwrap();
        Ok(AttestationBundle {
            enclave_measurement: arr(fields[0]),
            nonce: arr(fields[1]),
            channel_binding: arr(fields[2]),
            signature: fields[3].try_into().unwrap(),
            sm_certificate: Certificate::from_bytes(fields[4]).map_err(|_| MalformedBundle)?,
            device_certificate: Certificate::from_bytes(fields[5]).map_err(|_| MalformedBundle)?,
        })
    }
}

/// Why a bundle was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VerifyFailure {
    DeviceCertificate,
    SmCertificate,
    Nonce,
    Measurement,
    Signature,
    /// The bundle's binding does not cover the key exchange the verifier saw.
    ChannelBinding,
}

impl VerifyFailure {
    pub fn code(self) -> &'static str {
        match self {
            VerifyFailure::DeviceCertificate => "device-certificate",
            VerifyFailure::SmCertificate => "sm-certificate",
            VerifyFailure::Nonce => "nonce",
            VerifyFailure::Measurement => "measurement",
            VerifyFailure::Signature => "signature",
            VerifyFailure::ChannelBinding => "channel-binding",
        }
    }
}

impl fmt::Display for VerifyFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Checks a bundle against the verifier's expectations. The chain is
/// checked first, root to leaf, then freshness, identity and signature.
pub fn verify_attestation(
    bundle: &AttestationBundle,
    expected_nonce: &[u8; 32],
    expected_measurement: &Digest,
    trusted_device_key: &[u8; 32],
) -> Result<(), VerifyFailure> {
    let device = &bundle.device_certificate;
    if device.subject != *trusted_device_key || !device.verify() {
        return Err(VerifyFailure::DeviceCertificate);
    }
    let sm = &bundle.sm_certificate;
    if sm.issuer != device.subject || !sm.verify() {
        return Err(VerifyFailure::SmCertificate);
    }
    if bundle.nonce != *expected_nonce {
        return Err(VerifyFailure::Nonce);
    }
    if bundle.enclave_measurement != *expected_measurement {
        return Err(VerifyFailure::Measurement);
    }
    let payload = signed_payload(&bundle.nonce, &bundle.channel_binding, &bundle.enclave_measurement);
    if !crypto::verify(&sm.subject, &payload, &bundle.signature) {
        return Err(VerifyFailure::Signature);
    }
    Ok(())
}
