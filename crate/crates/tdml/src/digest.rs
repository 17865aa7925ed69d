//! Digest primitive and canonical byte encoding.
//!
//! Every identifier in the system (transaction ids, block ids, Merkle roots,
//! CIDs, model digests, session keys) is a SHA-256 digest over a canonical
//! serialization: variable-length fields are length-prefixed with a little-endian
//! u32, integers are fixed-width little-endian, fields appear in declaration
//! order. Chain dumps stamp the digest name so a replayer can refuse dumps
//! produced under a different hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use std::fmt;

/// Name stamped into chain dump headers; loaders reject anything else.
pub const DIGEST_NAME: &str = "sha-256";

/// A 256-bit digest value.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Digest256(pub [u8; 32]);

impl Digest256 {
    pub const ZERO: Digest256 = Digest256([0u8; 32]);

    pub fn of(bytes: &[u8]) -> Digest256 {
        let mut h = Sha256::new();
        h.update(bytes);
        Digest256(h.finalize().into())
    }

    /// Digest of the concatenation of two digests, used for Merkle parents
    /// and block ids.
    pub fn of_pair(a: &Digest256, b: &Digest256) -> Digest256 {
        let mut h = Sha256::new();
        h.update(a.0);
        h.update(b.0);
        Digest256(h.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Strict parse: exactly 64 lowercase hex chars. Uppercase or odd-length
    /// input is rejected so dump bytes stay canonical.
    pub fn from_hex(s: &str) -> Option<Digest256> {
        if s.len() != 64 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return None;
        }
        let raw = hex::decode(s).ok()?;
        let mut out = [0u8; 32];
        out.copy_from_slice(&raw);
        Some(Digest256(out))
    }
}

impl fmt::Debug for Digest256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest256({}..)", &self.to_hex()[..8])
    }
}

impl fmt::Display for Digest256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Canonical byte encoder. Callers push fields in declaration order and
/// hash the buffer.
#[derive(Default)]
pub struct CanonicalBytes {
    buf: Vec<u8>,
}

impl CanonicalBytes {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn put_u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn put_u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn put_f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    /// Length-prefixed byte field.
    pub fn put_bytes(&mut self, v: &[u8]) -> &mut Self {
        self.put_u32(v.len() as u32);
        self.buf.extend_from_slice(v);
        self
    }

    pub fn put_str(&mut self, v: &str) -> &mut Self {
        self.put_bytes(v.as_bytes())
    }

    pub fn put_digest(&mut self, v: &Digest256) -> &mut Self {
        self.buf.extend_from_slice(&v.0);
        self
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.buf
    }

    pub fn digest(&self) -> Digest256 {
        Digest256::of(&self.buf)
    }
}
