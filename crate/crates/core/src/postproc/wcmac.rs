//! One-time message authentication from universal hashing.
//!
//! Polynomial-evaluation hash over GF(2^64) (reduction polynomial
//! x^64 + x^4 + x^3 + x + 1), masked with 64 fresh key bits. Each tag
//! consumes a 128-bit key slice: 64 bits for the evaluation point, 64 for
//! the one-time mask. Verification recomputes the tag; forging without the
//! key succeeds with probability about (blocks + 1) / 2^64 per attempt.

use serde::{Deserialize, Serialize};

/// Carry-less multiply in GF(2^64) modulo x^64 + x^4 + x^3 + x + 1.
fn gf_mul(mut a: u64, mut b: u64) -> u64 {
    let mut p = 0u64;
    for _ in 0..64 {
        if b & 1 == 1 {
            p ^= a;
        }
        b >>= 1;
        let carry = a >> 63;
        a <<= 1;
        if carry == 1 {
            a ^= 0x1B;
        }
    }
    p
}

/// One-time MAC key: evaluation point plus mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacKey {
    pub point: u64,
    pub mask: u64,
}

impl MacKey {
    pub const BYTES: usize = 16;

    /// Interpret a fresh 16-byte ledger slice as a key.
    pub fn from_slice(bytes: &[u8]) -> MacKey {
        assert_eq!(bytes.len(), Self::BYTES, "MAC key slice must be 16 bytes");
        MacKey {
            point: u64::from_le_bytes(bytes[..8].try_into().unwrap()),
            mask: u64::from_le_bytes(bytes[8..].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacTag(pub u64);

impl MacTag {
    pub fn to_bytes(self) -> [u8; 8] {
        self.0.to_le_bytes()
    }

    pub fn from_bytes(b: [u8; 8]) -> MacTag {
        MacTag(u64::from_le_bytes(b))
    }
}

/// Tag a message. Deterministic in `(message, key)`.
///
/// Horner evaluation over 8-byte little-endian blocks (zero-padded tail),
/// with the bit length folded in as a final block so padding cannot be
/// confused with content.
pub fn wc_mac_tag(message: &[u8], key: MacKey) -> MacTag {
    let mut acc = 0u64;
    for chunk in message.chunks(8) {
        let mut block = [0u8; 8];
        block[..chunk.len()].copy_from_slice(chunk);
        acc = gf_mul(acc ^ u64::from_le_bytes(block), key.point);
    }
    acc = gf_mul(acc ^ (message.len() as u64 * 8), key.point);
    MacTag(acc ^ key.mask)
}

pub fn wc_mac_verify(message: &[u8], key: MacKey, tag: MacTag) -> bool {
    wc_mac_tag(message, key) == tag
}
