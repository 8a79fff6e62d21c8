// SPDX-License-Identifier: Apache-2.0

//! Secure-boot key derivation and the primitives behind attestation.
//!
//! Signatures are Ed25519, key agreement is X25519, key derivation is
//! HKDF over sha3-256 and the post-attestation channel is
//! ChaCha20-Poly1305.

use std::fmt;
use std::hash::{Hash, Hasher};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Nonce};
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha3::{Digest as _, Sha3_256};
use thiserror::Error;

use crate::types::Digest;

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const CERTIFICATE_LEN: usize = 32 * 3 + SIGNATURE_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("invalid public key")]
    InvalidPublicKey,
    #[error("malformed encoding")]
    Malformed,
    #[error("authenticated decryption failed")]
    Decrypt,
}

pub fn sha3_256(data: &[u8]) -> Digest {
    Sha3_256::digest(data).into()
}

fn hkdf(ikm: &[u8], salt: &[u8], info: &[u8]) -> [u8; 32] {
    let mut okm = [0u8; 32];
    Hkdf::<Sha3_256>::new(Some(salt), ikm)
        .expand(info, &mut okm)
        .expect("32 bytes is a valid HKDF output length");
    okm
}

/// Signs `message` with the Ed25519 key whose 32-byte seed is `secret_key`.
pub fn sign(secret_key: &[u8; 32], message: &[u8]) -> [u8; SIGNATURE_LEN] {
    SigningKey::from_bytes(secret_key).sign(message).to_bytes()
}

pub fn public_key(secret_key: &[u8; 32]) -> [u8; PUBLIC_KEY_LEN] {
    SigningKey::from_bytes(secret_key).verifying_key().to_bytes()
}

/// Ed25519 verification. Malformed keys or signatures verify as false.
pub fn verify(public_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
    let Ok(pk) = <[u8; PUBLIC_KEY_LEN]>::try_from(public_key) else {
        return false;
    };
    let Ok(sig) = <[u8; SIGNATURE_LEN]>::try_from(signature) else {
        return false;
    };
    let Ok(vk) = VerifyingKey::from_bytes(&pk) else {
        return false;
    };
    vk.verify_strict(message, &ed25519_dalek::Signature::from_bytes(&sig))
        .is_ok()
}

/// Public half of an X25519 key whose secret scalar is `secret`.
pub fn agreement_public(secret: &[u8; 32]) -> [u8; 32] {
    x25519_dalek::PublicKey::from(&x25519_dalek::StaticSecret::from(*secret)).to_bytes()
}

/// X25519 shared secret. Low-order remote keys are rejected.
pub fn key_agreement(local_secret: &[u8; 32], remote_public: &[u8; 32]) -> Result<[u8; 32], CryptoError> {
    let shared = x25519_dalek::StaticSecret::from(*local_secret)
        .diffie_hellman(&x25519_dalek::PublicKey::from(*remote_public));
    if !shared.was_contributory() {
        return Err(CryptoError::InvalidPublicKey);
    }
    Ok(shared.to_bytes())
}

/// Hash binding a channel to both parties' key-agreement public values.
pub fn channel_binding(enclave_public: &[u8; 32], verifier_public: &[u8; 32]) -> Digest {
    let mut h = Sha3_256::new();
    h.update(b"sanctorum-channel-v1");
    h.update(enclave_public);
    h.update(verifier_public);
    h.finalize().into()
}

/// A two-link PKI certificate: `issuer` signs `subject || attribute`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Certificate {
    pub subject: [u8; 32],
    pub attribute: [u8; 32],
    pub issuer: [u8; 32],
    pub signature: [u8; SIGNATURE_LEN],
}

impl Certificate {
    pub fn issue(issuer_secret: &[u8; 32], subject: [u8; 32], attribute: [u8; 32]) -> Self {
        let mut msg = [0u8; 64];
        msg[..32].copy_from_slice(&subject);
        msg[32..].copy_from_slice(&attribute);
        Certificate {
            subject,
            attribute,
            issuer: public_key(issuer_secret),
            signature: sign(issuer_secret, &msg),
        }
    }

    /// True if the signature verifies under the embedded issuer key.
    pub fn verify(&self) -> bool {
        let mut msg = [0u8; 64];
        msg[..32].copy_from_slice(&self.subject);
        msg[32..].copy_from_slice(&self.attribute);
        verify(&self.issuer, &msg, &self.signature)
    }

    pub fn to_bytes(&self) -> [u8; CERTIFICATE_LEN] {
        let mut out = [0u8; CERTIFICATE_LEN];
        out[..32].copy_from_slice(&self.subject);
        out[32..64].copy_from_slice(&self.attribute);
        out[64..96].copy_from_slice(&self.issuer);
        out[96..].copy_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != CERTIFICATE_LEN {
            return Err(CryptoError::Malformed);
        }
        let mut cert = Certificate {
            subject: [0; 32],
            attribute: [0; 32],
            issuer: [0; 32],
            signature: [0; SIGNATURE_LEN],
        };
        cert.subject.copy_from_slice(&bytes[..32]);
        cert.attribute.copy_from_slice(&bytes[32..64]);
        cert.issuer.copy_from_slice(&bytes[64..96]);
        cert.signature.copy_from_slice(&bytes[96..]);
        Ok(cert)
    }
}

impl fmt::Debug for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Certificate")
            .field("subject", &hex::encode(self.subject))
            .field("attribute", &hex::encode(self.attribute))
            .field("issuer", &hex::encode(self.issuer))
            .finish_non_exhaustive()
    }
}

/// The manufacturer's certifying authority.
pub struct Manufacturer {
    secret: [u8; 32],
}

impl Manufacturer {
    pub fn from_label(label: &str) -> Self {
        Manufacturer {
            secret: hkdf(label.as_bytes(), b"sanctorum-manufacturer-v1", b"root"),
        }
    }

    pub fn public_key(&self) -> [u8; 32] {
        public_key(&self.secret)
    }

    /// Burns `root_secret` into a new device and certifies its public key.
    pub fn provision(&self, root_secret: [u8; 32]) -> DeviceIdentity {
        let device_secret = hkdf(&root_secret, b"sanctorum-device-v1", b"device-signing-key");
        let certificate = Certificate::issue(&self.secret, public_key(&device_secret), [0; 32]);
        DeviceIdentity {
            root_secret,
            device_secret,
            certificate,
        }
    }
}

/// Simulated device fuses and the manufacturer certificate for the device key.
#[derive(Clone)]
pub struct DeviceIdentity {
    root_secret: [u8; 32],
    device_secret: [u8; 32],
    certificate: Certificate,
}

impl DeviceIdentity {
    /// Provisions a device whose fuses are derived from `label`; a stable
    /// stand-in for real hardware in simulations.
    pub fn simulated(label: &str) -> Self {
        Manufacturer::from_label("sanctorum-sim-manufacturer")
            .provision(hkdf(label.as_bytes(), b"sanctorum-fuses-v1", b"root"))
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.certificate.subject
    }

    pub fn certificate(&self) -> &Certificate {
        &self.certificate
    }

    /// Test hook: the fuse contents, used to assert they never leak.
    #[doc(hidden)]
    pub fn root_secret_for_tests(&self) -> [u8; 32] {
        self.root_secret
    }
}

impl fmt::Debug for DeviceIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeviceIdentity")
            .field("public_key", &hex::encode(self.public_key()))
            .finish_non_exhaustive()
    }
}

/// Keys the monitor receives from secure boot.
#[derive(Clone)]
pub struct SmIdentity {
    sm_image_hash: Digest,
    secret: [u8; 32],
    certificate: Certificate,
    device_certificate: Certificate,
}

impl SmIdentity {
    pub fn sm_image_hash(&self) -> Digest {
        self.sm_image_hash
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.certificate.subject
    }

    pub fn certificate(&self) -> &Certificate {
        &self.certificate
    }

    pub fn device_certificate(&self) -> &Certificate {
        &self.device_certificate
    }

    /// The attestation signing key seed. Only the signing enclave may obtain it.
    pub(crate) fn attestation_secret(&self) -> [u8; 32] {
        self.secret
    }
}

impl fmt::Debug for SmIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmIdentity")
            .field("sm_image_hash", &hex::encode(self.sm_image_hash))
            .field("public_key", &hex::encode(self.public_key()))
            .finish_non_exhaustive()
    }
}

/// Secure boot: measures the monitor image and derives its attestation key
/// from the device secret and that measurement.
pub fn derive_sm_identity(device: &DeviceIdentity, sm_image: &[u8]) -> SmIdentity {
    let sm_image_hash = sha3_256(sm_image);
    let secret = hkdf(&device.root_secret, b"sanctorum-sm-identity-v1", &sm_image_hash);
    let certificate = Certificate::issue(&device.device_secret, public_key(&secret), sm_image_hash);
    SmIdentity {
        sm_image_hash,
        secret,
        certificate,
        device_certificate: device.certificate,
    }
}

/// Authenticated channel keyed from an X25519 agreement and the channel binding.
pub struct SecureChannel {
    cipher: ChaCha20Poly1305,
    binding: Digest,
}

impl SecureChannel {
    pub fn new(shared_secret: &[u8; 32], binding: &Digest) -> Self {
        let key = hkdf(shared_secret, b"sanctorum-channel-key-v1", binding);
        SecureChannel {
            cipher: ChaCha20Poly1305::new(&key.into()),
            binding: *binding,
        }
    }

    fn nonce(sequence: u64) -> Nonce {
        let mut n = [0u8; 12];
        n[4..].copy_from_slice(&sequence.to_le_bytes());
        n.into()
    }

    pub fn seal(&self, sequence: u64, plaintext: &[u8]) -> Vec<u8> {
        self.cipher
            .encrypt(
                &Self::nonce(sequence),
                Payload {
                    msg: plaintext,
                    aad: &self.binding,
                },
            )
            .expect("in-memory encryption cannot fail")
    }

    pub fn open(&self, sequence: u64, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        self.cipher
            .decrypt(
                &Self::nonce(sequence),
                Payload {
                    msg: ciphertext,
                    aad: &self.binding,
                },
            )
            .map_err(|_| CryptoError::Decrypt)
    }
}

/// The platform's entropy source: seeded and reproducible in simulation,
/// operating-system randomness in live mode.
#[derive(Clone)]
pub enum Entropy {
    Seeded { seed: u64, rng: Box<ChaCha20Rng> },
    System,
}

impl Entropy {
    pub fn seeded(seed: u64) -> Self {
        Entropy::Seeded {
            seed,
            rng: Box::new(ChaCha20Rng::seed_from_u64(seed)),
        }
    }

    /// Independent deterministic stream derived from `seed` and `stream`.
    pub fn seeded_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Entropy::Seeded { seed, rng: Box::new(rng) }
    }

    pub fn fill(&mut self, buf: &mut [u8]) {
        match self {
            Entropy::Seeded { rng, .. } => rng.fill_bytes(buf),
            Entropy::System => OsRng.fill_bytes(buf),
        }
    }

    pub fn bytes32(&mut self) -> [u8; 32] {
        let mut b = [0u8; 32];
        self.fill(&mut b);
        b
    }
}

impl fmt::Debug for Entropy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Entropy::Seeded { seed, rng } => write!(f, "Entropy::Seeded({seed}, pos {})", rng.get_word_pos()),
            Entropy::System => f.write_str("Entropy::System"),
        }
    }
}

impl PartialEq for Entropy {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Entropy::Seeded { seed: a, rng: ra }, Entropy::Seeded { seed: b, rng: rb }) => {
                a == b && ra.get_stream() == rb.get_stream() && ra.get_word_pos() == rb.get_word_pos()
            }
            (Entropy::System, Entropy::System) => true,
            _ => false,
        }
    }
}

impl Eq for Entropy {}

impl Hash for Entropy {
    fn hash<H: Hasher>(&self, state: &mut H) {
        match self {
            Entropy::Seeded { seed, rng } => {
                seed.hash(state);
                rng.get_stream().hash(state);
                rng.get_word_pos().hash(state);
            }
            Entropy::System => 0u8.hash(state),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // RFC 8032, section 7.1, TEST 1 (empty message) and TEST 2.
    #[test]
    fn ed25519_known_answers() {
        let sk: [u8; 32] =
            hex::decode("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
                .unwrap()
                .try_into()
                .unwrap();
        assert_eq!(
            hex::encode(public_key(&sk)),
            "d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a"
        );
        let sig = sign(&sk, b"");
        assert_eq!(
            hex::encode(sig),
            "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e06522490155\
             5fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b"
        );
        assert!(verify(&public_key(&sk), b"", &sig));

        let sk: [u8; 32] =
            hex::decode("4ccd089b28ff96da9db6c346ec114e0f5b8a319f35aba624da8cf6ed4fb8a6fb")
                .unwrap()
                .try_into()
                .unwrap();
        assert_eq!(
            hex::encode(sign(&sk, &[0x72])),
            "92a009a9f0d4cab8720e820b5f642540a2b27b5416503f8fb3762223ebdb69da\
             085ac1e43e15996e458f3613d0f11d8c387b2eaeb4302aeeb00d291612bb0c00"
        );
    }

    // RFC 7748, section 6.1.
    #[test]
    fn x25519_known_answer_and_symmetry() {
        let a: [u8; 32] = hex::decode("77076d0a7318a57d3c16c17251b26645df4c2f87ebc0992ab177fba51db92c2a")
            .unwrap()
            .try_into()
            .unwrap();
        let b: [u8; 32] = hex::decode("5dab087e624a8a4b79e17f8b83800ee66f3bb1292618b6fd1c2f8b27ff88e0eb")
            .unwrap()
            .try_into()
            .unwrap();
        let ab = key_agreement(&a, &agreement_public(&b)).unwrap();
        let ba = key_agreement(&b, &agreement_public(&a)).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(
            hex::encode(ab),
            "4a5d9d5ba4ce2de1728e3bf480350f25e07e21c947d19e3376f09b3c1e161742"
        );
        let c = [9u8; 32];
        assert_ne!(key_agreement(&a, &agreement_public(&c)).unwrap(), ab);
        assert_eq!(key_agreement(&a, &[0u8; 32]), Err(CryptoError::InvalidPublicKey));
    }

    #[test]
    fn signature_rejects_tampering_and_garbage() {
        let sk = [3u8; 32];
        let pk = public_key(&sk);
        let mut sig = sign(&sk, b"hello");
        assert!(verify(&pk, b"hello", &sig));
        assert!(!verify(&pk, b"hellp", &sig));
        sig[5] ^= 1;
        assert!(!verify(&pk, b"hello", &sig));
        assert!(!verify(&pk[..31], b"hello", &sig));
        assert!(!verify(&[0xff; 32], b"hello", &[0u8; 64]));
        assert!(!verify(&pk, b"hello", &sig[..10]));
    }

    #[test]
    fn sm_identity_depends_on_image_and_device() {
        let dev = DeviceIdentity::simulated("device-a");
        let a = derive_sm_identity(&dev, b"monitor image");
        let again = derive_sm_identity(&dev, b"monitor image");
        assert_eq!(a.public_key(), again.public_key());
        assert_eq!(a.attestation_secret(), again.attestation_secret());

        let flipped = derive_sm_identity(&dev, b"monitor imagf");
        assert_ne!(a.public_key(), flipped.public_key());
        assert_ne!(a.certificate().attribute, flipped.certificate().attribute);

        let other = derive_sm_identity(&DeviceIdentity::simulated("device-b"), b"monitor image");
        assert_ne!(a.public_key(), other.public_key());

        assert!(a.certificate().verify());
        assert_eq!(a.certificate().issuer, dev.public_key());
        assert!(dev.certificate().verify());
    }

    #[test]
    fn channel_round_trip() {
        let binding = channel_binding(&[1; 32], &[2; 32]);
        let ch = SecureChannel::new(&[5; 32], &binding);
        let ct = ch.seal(0, b"payload");
        assert_eq!(ch.open(0, &ct).unwrap(), b"payload");
        assert!(ch.open(1, &ct).is_err());
        let other = SecureChannel::new(&[6; 32], &binding);
        assert!(other.open(0, &ct).is_err());
    }

    #[test]
    fn seeded_entropy_is_reproducible() {
        let mut a = Entropy::seeded(11);
        let mut b = Entropy::seeded(11);
        let x = a.bytes32();
        assert_eq!(x, b.bytes32());
        assert_ne!(x, a.bytes32());
        assert_ne!(Entropy::seeded_stream(11, 1).bytes32(), Entropy::seeded(11).bytes32());
    }

    #[test]
    fn certificate_bytes_round_trip() {
        let c = Certificate::issue(&[4; 32], [1; 32], [2; 32]);
        assert_eq!(Certificate::from_bytes(&c.to_bytes()).unwrap(), c);
        assert!(Certificate::from_bytes(&[0; 10]).is_err());
    }
}
