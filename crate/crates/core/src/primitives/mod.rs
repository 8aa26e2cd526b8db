//! Cryptographic building blocks and key custody.
//!
//! The pre-shared key is partitioned into three roles (reconciliation
//! authentication, AES keys, sequence-identifier masks) behind a ledger
//! that hands out each bit at most once and records every draw for audit.
//! QKD-grown key lives in an append-only pool with a strictly monotone
//! consumption cursor; running out is an error, never a wrap-around.
//!
//! Primitives: one-time pad over pool bits, AES-256 in counter mode with a
//! nonce-reuse ledger (integrity comes from the protocol-layer MAC, not the
//! cipher mode), and bitwise LWE public-key encryption in [`lwe`].

pub mod lwe;

use crate::bits::{bits_to_bytes, unpack_bits};
use aes::cipher::{KeyIvInit, StreamCipher};
use aes::Aes256;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::io::{self, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("key material exhausted in {0}")]
    KeyExhausted(String),
    #[error("nonce reused under the same AES key")]
    NonceReuse,
    #[error("malformed ciphertext: {0}")]
    MalformedCiphertext(String),
    #[error("bad PSK file: {0}")]
    BadPskFile(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// The three pre-shared key roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    /// Wegman-Carter authentication keys for reconciliation.
    Auth,
    /// AES session and data keys.
    Aes,
    /// Sequence-identifier masks.
    Pi,
}

impl Partition {
    fn name(self) -> &'static str {
        match self {
            Partition::Auth => "psk.auth",
            Partition::Aes => "psk.aes",
            Partition::Pi => "psk.pi",
        }
    }
}

/// One ledger draw, kept for the non-reuse audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Consumption {
    pub partition: Partition,
    pub bit_offset: usize,
    pub bit_len: usize,
}

#[derive(Debug, Clone)]
struct PartitionState {
    bytes: Vec<u8>,
    cursor_bits: usize,
}

impl PartitionState {
    fn take_bits(&mut self, n: usize, name: &str) -> Result<Vec<u8>, CryptoError> {
        if self.cursor_bits + n > self.bytes.len() * 8 {
            return Err(CryptoError::KeyExhausted(name.to_string()));
        }
        let bits = unpack_bits(&self.bytes, self.bytes.len() * 8)
            [self.cursor_bits..self.cursor_bits + n]
            .to_vec();
        self.cursor_bits += n;
        Ok(bits)
    }
}

/// Partitioned pre-shared key with single-use accounting.
///
/// Both parties load the identical file and advance cursors in lockstep as
/// the protocol runs; any divergence surfaces as a MAC or decode failure in
/// the same cycle.
#[derive(Debug, Clone)]
pub struct PskLedger {
    auth: PartitionState,
    aes: PartitionState,
    pi: PartitionState,
    trace: Vec<Consumption>,
    digest: [u8; 32],
}

const PSK_MAGIC: &[u8; 4] = b"QPSK";

impl PskLedger {
    pub fn from_parts(auth: Vec<u8>, aes: Vec<u8>, pi: Vec<u8>) -> PskLedger {
        let digest = psk_digest(&auth, &aes, &pi);
        PskLedger {
            auth: PartitionState {
                bytes: auth,
                cursor_bits: 0,
            },
            aes: PartitionState {
                bytes: aes,
                cursor_bits: 0,
            },
            pi: PartitionState {
                bytes: pi,
                cursor_bits: 0,
            },
            trace: Vec::new(),
            digest,
        }
    }

    /// Parse the PSK file: magic `QPSK`, version byte, three u32 LE
    /// partition byte lengths, then the raw partition bytes in order.
    pub fn read_from<R: Read>(mut r: R) -> Result<PskLedger, CryptoError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PSK_MAGIC {
            return Err(CryptoError::BadPskFile("bad magic".into()));
        }
        let mut ver = [0u8; 1];
        r.read_exact(&mut ver)?;
        if ver[0] != 1 {
            return Err(CryptoError::BadPskFile(format!("version {}", ver[0])));
        }
        let mut lens = [0u8; 12];
        r.read_exact(&mut lens)?;
        let mut part = |range: std::ops::Range<usize>| -> Result<Vec<u8>, CryptoError> {
            let n = u32::from_le_bytes(lens[range].try_into().unwrap()) as usize;
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)?;
            Ok(buf)
        };
        let auth = part(0..4)?;
        let aes = part(4..8)?;
        let pi = part(8..12)?;
        Ok(PskLedger::from_parts(auth, aes, pi))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CryptoError> {
        w.write_all(PSK_MAGIC)?;
        w.write_all(&[1u8])?;
        for p in [&self.auth, &self.aes, &self.pi] {
            w.write_all(&(p.bytes.len() as u32).to_le_bytes())?;
        }
        for p in [&self.auth, &self.aes, &self.pi] {
            w.write_all(&p.bytes)?;
        }
        Ok(())
    }

    /// Digest both parties compare at handshake.
    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    fn partition_mut(&mut self, p: Partition) -> &mut PartitionState {
        match p {
            Partition::Auth => &mut self.auth,
            Partition::Aes => &mut self.aes,
            Partition::Pi => &mut self.pi,
        }
    }

    /// Draw `n` fresh bits (unpacked 0/1) from a partition.
    pub fn take_bits(&mut self, p: Partition, n: usize) -> Result<Vec<u8>, CryptoError> {
        let state = self.partition_mut(p);
        let offset = state.cursor_bits;
        let bits = state.take_bits(n, p.name())?;
        self.trace.push(Consumption {
            partition: p,
            bit_offset: offset,
            bit_len: n,
        });
        Ok(bits)
    }

    /// Draw `n` fresh bytes from a partition.
    pub fn take_bytes(&mut self, p: Partition, n: usize) -> Result<Vec<u8>, CryptoError> {
        self.take_bits(p, n * 8).map(|bits| bits_to_bytes(&bits))
    }

    pub fn remaining_bits(&self, p: Partition) -> usize {
        let state = match p {
            Partition::Auth => &self.auth,
            Partition::Aes => &self.aes,
            Partition::Pi => &self.pi,
        };
        state.bytes.len() * 8 - state.cursor_bits
    }

    pub fn consumed_bits(&self, p: Partition) -> usize {
        let state = match p {
            Partition::Auth => &self.auth,
            Partition::Aes => &self.aes,
            Partition::Pi => &self.pi,
        };
        state.cursor_bits
    }

    /// Every draw so far, in order.
    pub fn consumption_trace(&self) -> &[Consumption] {
        &self.trace
    }
}

fn psk_digest(auth: &[u8], aes: &[u8], pi: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    for (tag, part) in [(b"auth", auth), (b"aes\0", aes), (b"pi\0\0", pi)] {
        h.update(tag);
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    h.finalize().into()
}

/// Fresh PSK file bytes. A seed gives a reproducible file; `None` pulls
/// from the OS.
pub fn generate_psk(
    auth_len: usize,
    aes_len: usize,
    pi_len: usize,
    seed: Option<u64>,
) -> Vec<u8> {
    let fill = |n: usize| -> Vec<u8> {
        let mut buf = vec![0u8; n];
        match seed {
            Some(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                rng.set_stream(n as u64); // distinct stream per partition length
                rng.fill_bytes(&mut buf);
            }
            None => rand::rngs::OsRng.fill_bytes(&mut buf),
        }
        buf
    };
    let ledger = PskLedger::from_parts(fill(auth_len), fill(aes_len), fill(pi_len));
    let mut out = Vec::new();
    ledger.write_to(&mut out).expect("vec write");
    out
}

/// Append-only store of QKD-grown secret bits with a monotone cursor.
#[derive(Debug, Clone, Default)]
pub struct QkdKeyPool {
    bits: Vec<u8>,
    cursor: usize,
}

impl QkdKeyPool {
    pub fn new() -> QkdKeyPool {
        QkdKeyPool::default()
    }

    pub fn with_bits(bits: Vec<u8>) -> QkdKeyPool {
        assert!(bits.iter().all(|&b| b <= 1));
        QkdKeyPool { bits, cursor: 0 }
    }

    pub fn append_bits(&mut self, bits: &[u8]) {
        debug_assert!(bits.iter().all(|&b| b <= 1));
        self.bits.extend_from_slice(bits);
    }

    pub fn available(&self) -> usize {
        self.bits.len() - self.cursor
    }

    pub fn consumed(&self) -> usize {
        self.cursor
    }

    pub fn take_bits(&mut self, n: usize) -> Result<Vec<u8>, CryptoError> {
        if self.available() < n {
            return Err(CryptoError::KeyExhausted("qkd pool".into()));
        }
        let out = self.bits[self.cursor..self.cursor + n].to_vec();
        self.cursor += n;
        Ok(out)
    }

    /// Total bits ever appended; pair with [`QkdKeyPool::quarantine_after`]
    /// to discard growth from an aborted cycle.
    pub fn len_bits(&self) -> usize {
        self.bits.len()
    }

    /// Read-only view of the stored bits, for key-identity audits.
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Drop everything appended after `mark`. Consumed bits stay consumed.
    pub fn quarantine_after(&mut self, mark: usize) {
        assert!(mark >= self.cursor, "cannot quarantine consumed bits");
        self.bits.truncate(mark);
    }

    /// Test support: back the cursor up to replay a draw.
    #[doc(hidden)]
    pub fn rewind(&mut self, n: usize) {
        assert!(n <= self.cursor);
        self.cursor -= n;
    }
}

/// XOR `m` with the next `8 * len(m)` pool bits. Decryption is the same
/// operation against the peer's mirrored cursor.
pub fn otp_encrypt(m: &[u8], pool: &mut QkdKeyPool) -> Result<Vec<u8>, CryptoError> {
    let key_bits = pool.take_bits(m.len() * 8)?;
    let key = bits_to_bytes(&key_bits);
    Ok(m.iter().zip(&key).map(|(a, b)| a ^ b).collect())
}

pub fn otp_decrypt(c: &[u8], pool: &mut QkdKeyPool) -> Result<Vec<u8>, CryptoError> {
    otp_encrypt(c, pool)
}

pub const AES_KEY_BYTES: usize = 32;
pub const AES_NONCE_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AesKey(pub [u8; AES_KEY_BYTES]);

impl AesKey {
    pub fn from_bytes(bytes: &[u8]) -> AesKey {
        AesKey(bytes.try_into().expect("AES key must be 32 bytes"))
    }
}

/// Tracks nonces used under one key; reuse is a hard failure.
#[derive(Debug, Clone, Default)]
pub struct NonceLedger {
    used: BTreeSet<[u8; AES_NONCE_BYTES]>,
}

impl NonceLedger {
    pub fn new() -> NonceLedger {
        NonceLedger::default()
    }

    pub fn claim(&mut self, nonce: &[u8; AES_NONCE_BYTES]) -> Result<(), CryptoError> {
        if !self.used.insert(*nonce) {
            return Err(CryptoError::NonceReuse);
        }
        Ok(())
    }
}

type Aes256Ctr = ctr::Ctr128BE<Aes256>;

/// AES-256 counter-mode keystream application (encrypt and decrypt are the
/// same transform). The nonce travels in the message header; the ledger
/// guards freshness on the encrypting side.
pub fn aes_encrypt(
    m: &[u8],
    key: &AesKey,
    nonce: &[u8; AES_NONCE_BYTES],
    ledger: &mut NonceLedger,
) -> Result<Vec<u8>, CryptoError> {
    ledger.claim(nonce)?;
    Ok(aes_ctr_apply(m, key, nonce))
}

pub fn aes_decrypt(c: &[u8], key: &AesKey, nonce: &[u8; AES_NONCE_BYTES]) -> Vec<u8> {
    aes_ctr_apply(c, key, nonce)
}

fn aes_ctr_apply(data: &[u8], key: &AesKey, nonce: &[u8; AES_NONCE_BYTES]) -> Vec<u8> {
    let mut out = data.to_vec();
    let mut cipher = Aes256Ctr::new(key.0.as_ref().into(), nonce.as_ref().into());
    cipher.apply_keystream(&mut out);
    out
}

/// Raw AES-256 single-block encryption, exposed for known-answer tests.
pub fn aes_encrypt_block(key: &AesKey, block: [u8; 16]) -> [u8; 16] {
    use aes::cipher::{BlockEncrypt, KeyInit};
    let cipher = Aes256::new(key.0.as_ref().into());
    let mut b = aes::Block::from(block);
    cipher.encrypt_block(&mut b);
    b.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn hex(s: &str) -> Vec<u8> {
        (0..s.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
            .collect()
    }

    #[test]
    fn aes256_core_known_answer() {
        // FIPS-197 C.3 example vector.
        let key = AesKey::from_bytes(&(0..32).collect::<Vec<u8>>());
        let pt: [u8; 16] = hex("00112233445566778899aabbccddeeff").try_into().unwrap();
        let ct = aes_encrypt_block(&key, pt);
        assert_eq!(ct.to_vec(), hex("8ea2b7ca516745bfeafc49904b496089"));
    }

    #[test]
    fn aes256_ctr_known_answers() {
        // SP 800-38A F.5.5 CTR-AES256.Encrypt.
        let key = AesKey::from_bytes(&hex(
            "603deb1015ca71be2b73aef0857d77811f352c073b6108d72d9810a30914dff4",
        ));
        let nonce: [u8; 16] = hex("f0f1f2f3f4f5f6f7f8f9fafbfcfdfeff").try_into().unwrap();
        let pt = hex(concat!(
            "6bc1bee22e409f96e93d7e117393172a",
            "ae2d8a571e03ac9c9eb76fac45af8e51",
            "30c81c46a35ce411e5fbc1191a0a52ef",
            "f69f2445df4f9b17ad2b417be66c3710"
        ));
        let expected = hex(concat!(
            "601ec313775789a5b7a7f504bbf3d228",
            "f443e3ca4d62b59aca84e990cacaf5c5",
            "2b0930daa23de94ce87017ba2d84988d",
            "dfc9c58db67aada613c2dd08457941a6"
        ));
        let mut ledger = NonceLedger::new();
        let ct = aes_encrypt(&pt, &key, &nonce, &mut ledger).unwrap();
        assert_eq!(ct, expected);
        assert_eq!(aes_decrypt(&ct, &key, &nonce), pt);
    }

    #[test]
    fn aes_roundtrip_and_diffusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut key_bytes = [0u8; 32];
        rng.fill_bytes(&mut key_bytes);
        let key = AesKey(key_bytes);
        let mut ledger = NonceLedger::new();
        let msg: Vec<u8> = (0..1_048_576).map(|_| rng.gen()).collect();
        let nonce = [1u8; 16];
        let ct = aes_encrypt(&msg, &key, &nonce, &mut ledger).unwrap();
        assert_eq!(aes_decrypt(&ct, &key, &nonce), msg);

        // Keystream flips about half the bits of a random message.
        let diff_bits: u64 = msg
            .iter()
            .zip(&ct)
            .map(|(a, b)| (a ^ b).count_ones() as u64)
            .sum();
        let total = msg.len() as f64 * 8.0;
        let sigma = (total * 0.25).sqrt();
        assert!(
            (diff_bits as f64 - total / 2.0).abs() < 5.0 * sigma,
            "{diff_bits} of {total} bits differ"
        );
    }

    #[test]
    fn nonce_reuse_is_a_hard_failure() {
        let key = AesKey([7u8; 32]);
        let mut ledger = NonceLedger::new();
        let nonce = [3u8; 16];
        aes_encrypt(b"one", &key, &nonce, &mut ledger).unwrap();
        assert!(matches!(
            aes_encrypt(b"two", &key, &nonce, &mut ledger),
            Err(CryptoError::NonceReuse)
        ));
    }

    #[test]
    fn otp_zero_message_reveals_keystream_and_involutes() {
        let key_bits: Vec<u8> = (0..64).map(|i| ((i * 5) % 2) as u8).collect();
        let mut pool = QkdKeyPool::with_bits(key_bits.clone());
        let c = otp_encrypt(&[0u8; 8], &mut pool).unwrap();
        assert_eq!(c, bits_to_bytes(&key_bits));

        // XOR with the same bits again is the identity (test rewind hook).
        pool.rewind(64);
        let back = otp_decrypt(&c, &mut pool).unwrap();
        assert_eq!(back, vec![0u8; 8]);
    }

    #[test]
    fn otp_mirrored_cursors_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let key_bits: Vec<u8> = (0..4096).map(|_| rng.gen_range(0..=1u8)).collect();
        let mut bob = QkdKeyPool::with_bits(key_bits.clone());
        let mut alice = QkdKeyPool::with_bits(key_bits);
        for len in [0usize, 1, 17, 100] {
            let m: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let c = otp_encrypt(&m, &mut bob).unwrap();
            let d = otp_decrypt(&c, &mut alice).unwrap();
            assert_eq!(d, m);
            assert_eq!(bob.consumed(), alice.consumed());
        }
    }

    #[test]
    fn pool_exhaustion_never_wraps() {
        let mut pool = QkdKeyPool::with_bits(vec![1; 15]);
        assert!(matches!(
            otp_encrypt(&[0, 0], &mut pool),
            Err(CryptoError::KeyExhausted(_))
        ));
        // The failed draw consumed nothing.
        assert_eq!(pool.available(), 15);
        pool.append_bits(&[0]);
        assert!(otp_encrypt(&[0, 0], &mut pool).is_ok());
    }

    #[test]
    fn ledger_draws_are_disjoint_under_fuzzed_interleaving() {
        let file = generate_psk(64, 128, 16, Some(77));
        let mut ledger = PskLedger::read_from(&file[..]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        loop {
            let p = match rng.gen_range(0..3) {
                0 => Partition::Auth,
                1 => Partition::Aes,
                _ => Partition::Pi,
            };
            let n = rng.gen_range(1..40);
            if ledger.take_bits(p, n).is_err() {
                break;
            }
        }
        // No (partition, offset) is covered twice.
        let mut seen = BTreeSet::new();
        for c in ledger.consumption_trace() {
            for off in c.bit_offset..c.bit_offset + c.bit_len {
                assert!(seen.insert((c.partition, off)), "double spend at {off}");
            }
        }
        // Cursors are monotone: trace offsets per partition are sorted.
        for p in [Partition::Auth, Partition::Aes, Partition::Pi] {
            let offsets: Vec<usize> = ledger
                .consumption_trace()
                .iter()
                .filter(|c| c.partition == p)
                .map(|c| c.bit_offset)
                .collect();
            assert!(offsets.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn psk_file_roundtrip_and_digest() {
        let file = generate_psk(32, 64, 8, Some(5));
        let a = PskLedger::read_from(&file[..]).unwrap();
        let b = PskLedger::read_from(&file[..]).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.remaining_bits(Partition::Auth), 32 * 8);
        assert_eq!(a.remaining_bits(Partition::Aes), 64 * 8);
        assert_eq!(a.remaining_bits(Partition::Pi), 8 * 8);

        let other = generate_psk(32, 64, 8, Some(6));
        let c = PskLedger::read_from(&other[..]).unwrap();
        assert_ne!(a.digest(), c.digest());

        assert!(matches!(
            PskLedger::read_from(&b"QXSK\x01"[..]),
            Err(CryptoError::BadPskFile(_))
        ));
    }

    #[test]
    fn partition_exhaustion_is_surfaced() {
        let mut ledger = PskLedger::from_parts(vec![0xFF; 2], vec![], vec![0xAA]);
        assert_eq!(ledger.take_bits(Partition::Pi, 2).unwrap(), vec![1, 0]);
        assert_eq!(ledger.take_bits(Partition::Pi, 2).unwrap(), vec![1, 0]);
        assert!(ledger.take_bits(Partition::Pi, 5).is_err());
        assert!(matches!(
            ledger.take_bytes(Partition::Aes, 1),
            Err(CryptoError::KeyExhausted(_))
        ));
        assert_eq!(ledger.take_bytes(Partition::Auth, 2).unwrap(), vec![0xFF, 0xFF]);
    }
}
