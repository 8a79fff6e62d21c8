// SPDX-License-Identifier: Apache-2.0

//! Canonical state hashing for traces and exploration deduplication.

use std::hash::{Hash, Hasher};

use sha3::{Digest as _, Sha3_256};

use crate::types::Digest;

/// A [`Hasher`] that feeds every byte written into sha3-256.
///
/// Unlike the std hashers its output is stable across processes, which
/// makes trace files byte-comparable between runs.
#[derive(Clone, Default)]
pub struct StateHasher {
    buf: Vec<u8>,
}

impl StateHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn digest(&self) -> Digest {
        Sha3_256::digest(&self.buf).into()
    }
}

impl Hasher for StateHasher {
    fn write(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    fn finish(&self) -> u64 {
        u64::from_le_bytes(self.digest()[..8].try_into().unwrap())
    }
}

pub fn state_digest<T: Hash + ?Sized>(value: &T) -> Digest {
    let mut h = StateHasher::new();
    value.hash(&mut h);
    h.digest()
}

/// 128-bit fingerprint used to deduplicate explored states.
pub fn fingerprint<T: Hash + ?Sized>(value: &T) -> u128 {
    u128::from_le_bytes(state_digest(value)[..16].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_sensitive() {
        assert_eq!(state_digest(&(1u64, "a")), state_digest(&(1u64, "a")));
        assert_ne!(fingerprint(&(1u64, "a")), fingerprint(&(2u64, "a")));
    }
}
