//! Bitwise lattice public-key encryption.
//!
//! Plain construction over Z_q: the secret is a vector `s`, the public key
//! is `(A, b = A*s + e)` with a seeded uniform `A` and small fresh error
//! `e`. Encrypting one bit picks a random subset of the `m` public rows and
//! outputs `(sum A_i, sum b_i + bit * floor(q/2))`; decryption rounds the
//! residual `c2 - <c1, s>`. Each message bit gets an independent subset, so
//! ciphertexts expand by `(n + 1) * 16` bits per plaintext bit; the
//! expansion is reported in layer manifests, never hidden.
//!
//! Desk parameters (n = 256, q = 4093, ternary error) keep tests fast and
//! are labeled non-production via the 80-bit strength tag.

use crate::bits::{bits_to_bytes, bytes_to_bits};
use crate::par;
use crate::primitives::CryptoError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Work-factor label; one of 80, 112, 128, 192, 256.
pub const STRENGTH_LABELS: [u16; 5] = [80, 112, 128, 192, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LweParams {
    /// Lattice dimension.
    pub n: usize,
    /// Prime modulus.
    pub q: u32,
    /// Errors are uniform in `[-error_bound, error_bound]`.
    pub error_bound: u32,
    /// Claimed security-strength label.
    pub security_strength: u16,
}

impl LweParams {
    /// Fast non-production parameters.
    pub fn desk() -> LweParams {
        LweParams {
            n: 256,
            q: 4093,
            error_bound: 1,
            security_strength: 80,
        }
    }

    /// Sample count `m = 2 n log2(q)`.
    pub fn samples(&self) -> usize {
        2 * self.n * (32 - (self.q - 1).leading_zeros()) as usize
    }

    /// Ciphertext bytes for one plaintext bit.
    pub fn ciphertext_bytes_per_bit(&self) -> usize {
        (self.n + 1) * 2
    }

    pub fn validate(&self) -> Result<(), CryptoError> {
        let bad = |m: String| Err(CryptoError::InvalidParams(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if !is_prime(self.q) {
            return bad(format!("q = {} is not prime", self.q));
        }
        if self.q >= 1 << 15 {
            return bad("q must fit 15 bits for the packed arithmetic".into());
        }
        if self.error_bound == 0 || self.error_bound >= self.q / 8 {
            return bad(format!("error bound {} out of range", self.error_bound));
        }
        if !STRENGTH_LABELS.contains(&self.security_strength) {
            return bad(format!(
                "security strength {} not in {STRENGTH_LABELS:?}",
                self.security_strength
            ));
        }
        // Hoeffding bound on the subset-sum error: the decision margin is
        // q/4 against a sum of ~m/2 bounded error terms; require failure
        // probability below 2^-32 per bit.
        let m_half = self.samples() as f64 / 2.0;
        let margin = self.q as f64 / 4.0;
        let exponent = margin * margin / (2.0 * m_half * (self.error_bound as f64).powi(2));
        if exponent < 33.0 * std::f64::consts::LN_2 {
            return bad(format!(
                "per-bit decryption error bound too weak (exponent {exponent:.1})"
            ));
        }
        Ok(())
    }
}

fn is_prime(q: u32) -> bool {
    if q < 2 {
        return false;
    }
    let mut d = 2u32;
    while d * d <= q {
        if q % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LwePublicKey {
    pub params: LweParams,
    /// `m x n` row-major matrix over Z_q.
    pub a: Vec<u16>,
    /// `m` samples `A*s + e`.
    pub b: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LweSecretKey {
    pub params: LweParams,
    pub s: Vec<u16>,
}

const A_STREAM: u64 = 0;
const S_STREAM: u64 = 1;
const E_STREAM: u64 = 2;

/// Deterministic key generation: the full keypair is a function of
/// `(params, seed)`.
pub fn pq_keygen(params: &LweParams, seed: u64) -> Result<(LwePublicKey, LweSecretKey), CryptoError> {
    params.validate()?;
    let n = params.n;
    let m = params.samples();
    let q = params.q;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(A_STREAM);
    let a: Vec<u16> = (0..m * n).map(|_| rng.gen_range(0..q) as u16).collect();

    rng.set_stream(S_STREAM);
    let s: Vec<u16> = (0..n).map(|_| rng.gen_range(0..q) as u16).collect();

    rng.set_stream(E_STREAM);
    let bound = params.error_bound as i64;
    let b: Vec<u16> = (0..m)
        .map(|i| {
            let row = &a[i * n..(i + 1) * n];
            let dot: u64 = row
                .iter()
                .zip(&s)
                .map(|(&x, &y)| x as u64 * y as u64)
                .sum();
            let e = rng.gen_range(-bound..=bound);
            ((dot as i64 + e).rem_euclid(q as i64)) as u16
        })
        .collect();

    Ok((
        LwePublicKey {
            params: *params,
            a,
            b,
        },
        LweSecretKey { params: *params, s },
    ))
}

/// Encrypt one bit with a fresh random row subset.
fn encrypt_bit(pk: &LwePublicKey, bit: u8, rng: &mut ChaCha8Rng) -> Vec<u16> {
    let n = pk.params.n;
    let m = pk.params.samples();
    let q = pk.params.q;
    let mut acc = vec![0u32; n];
    let mut acc_b = 0u32;
    for word_base in (0..m).step_by(64) {
        let word: u64 = rng.gen();
        let limit = 64.min(m - word_base);
        for k in 0..limit {
            if (word >> k) & 1 == 1 {
                let i = word_base + k;
                let row = &pk.a[i * n..(i + 1) * n];
                for (aj, &rj) in acc.iter_mut().zip(row) {
                    *aj += rj as u32;
                }
                acc_b += pk.b[i] as u32;
            }
        }
    }
    let mut out: Vec<u16> = acc.iter().map(|&v| (v % q) as u16).collect();
    out.push(((acc_b + bit as u32 * (q / 2)) % q) as u16);
    out
}

/// Encrypt a byte string bitwise. The per-bit randomness is a fixed
/// substream of `seed`, so ciphertexts are deterministic in
/// `(message, pk, seed)` and the bit map can run in parallel.
pub fn pq_encrypt(m: &[u8], pk: &LwePublicKey, seed: u64) -> Vec<u8> {
    let bits = bytes_to_bits(m);
    let per_bit: Vec<Vec<u16>> = par::map_range(bits.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        encrypt_bit(pk, bits[i], &mut rng)
    });

    let mut out = Vec::with_capacity(8 + bits.len() * pk.params.ciphertext_bytes_per_bit());
    out.extend_from_slice(&(bits.len() as u32).to_le_bytes());
    out.extend_from_slice(&(pk.params.n as u32).to_le_bytes());
    for ct in per_bit {
        for v in ct {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decrypt a [`pq_encrypt`] ciphertext.
pub fn pq_decrypt(c: &[u8], sk: &LweSecretKey) -> Result<Vec<u8>, CryptoError> {
    let n = sk.params.n;
    let q = sk.params.q as u64;
    if c.len() < 8 {
        return Err(CryptoError::MalformedCiphertext("truncated header".into()));
    }
    let n_bits = u32::from_le_bytes(c[0..4].try_into().unwrap()) as usize;
    let n_in = u32::from_le_bytes(c[4..8].try_into().unwrap()) as usize;
    if n_in != n {
        return Err(CryptoError::MalformedCiphertext(format!(
            "dimension {n_in} does not match key dimension {n}"
        )));
    }
    if n_bits % 8 != 0 {
        return Err(CryptoError::MalformedCiphertext(format!(
            "bit count {n_bits} is not a whole number of bytes"
        )));
    }
    let per_bit = n + 1;
    let body = &c[8..];
    if body.len() != n_bits * per_bit * 2 {
        return Err(CryptoError::MalformedCiphertext(format!(
            "body length {} != {} bits * {} bytes",
            body.len(),
            n_bits,
            per_bit * 2
        )));
    }

    let mut bits = Vec::with_capacity(n_bits);
    for bi in 0..n_bits {
        let base = bi * per_bit * 2;
        let coord = |k: usize| -> Result<u64, CryptoError> {
            let v = u16::from_le_bytes(body[base + 2 * k..base + 2 * k + 2].try_into().unwrap())
                as u64;
            if v >= q {
                return Err(CryptoError::MalformedCiphertext(format!(
                    "coordinate {v} >= q"
                )));
            }
            Ok(v)
        };
        let mut dot = 0u64;
        for (j, &sj) in sk.s.iter().enumerate() {
            dot = (dot + coord(j)? * sj as u64) % q;
        }
        let c2 = coord(n)?;
        let d = (c2 + q - dot) % q;
        let dist0 = d.min(q - d);
        let dist1 = d.abs_diff(q / 2);
        bits.push((dist1 < dist0) as u8);
    }
    Ok(bits_to_bytes(&bits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn desk_params_are_valid_and_sized() {
        let p = LweParams::desk();
        p.validate().unwrap();
        assert_eq!(p.samples(), 2 * 256 * 12);
        assert_eq!(p.ciphertext_bytes_per_bit(), 514);
    }

    #[test]
    fn bad_params_rejected() {
        let mut p = LweParams::desk();
        p.q = 4094; // even
        assert!(p.validate().is_err());
        let mut p = LweParams::desk();
        p.security_strength = 100;
        assert!(p.validate().is_err());
        let mut p = LweParams::desk();
        p.error_bound = 2000;
        assert!(p.validate().is_err());
    }

    #[test]
    fn keygen_is_deterministic_and_shaped() {
        let p = LweParams::desk();
        let (pk1, sk1) = pq_keygen(&p, 42).unwrap();
        let (pk2, sk2) = pq_keygen(&p, 42).unwrap();
        assert_eq!(pk1, pk2);
        assert_eq!(sk1, sk2);
        let (pk3, _) = pq_keygen(&p, 43).unwrap();
        assert_ne!(pk1, pk3);

        assert_eq!(pk1.a.len(), p.samples() * p.n);
        assert_eq!(pk1.b.len(), p.samples());
        assert_eq!(sk1.s.len(), p.n);
        assert!(pk1.a.iter().all(|&v| (v as u32) < p.q));
    }

    #[test]
    fn roundtrip_random_messages() {
        let p = LweParams::desk();
        let (pk, sk) = pq_keygen(&p, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in [1usize, 13, 32, 64] {
            let mut m = vec![0u8; len];
            rng.fill_bytes(&mut m);
            let c = pq_encrypt(&m, &pk, rng.gen());
            assert_eq!(c.len(), 8 + len * 8 * p.ciphertext_bytes_per_bit());
            assert_eq!(pq_decrypt(&c, &sk).unwrap(), m);
        }
    }

    #[test]
    fn all_zero_message_zero_error_is_exact() {
        // With the error draw forced to zero the decryption residual is
        // exactly bit * floor(q/2).
        let p = LweParams::desk();
        let (mut pk, sk) = pq_keygen(&p, 3).unwrap();
        // Rebuild b without error terms.
        let n = p.n;
        for i in 0..p.samples() {
            let row = &pk.a[i * n..(i + 1) * n];
            let dot: u64 = row.iter().zip(&sk.s).map(|(&x, &y)| x as u64 * y as u64).sum();
            pk.b[i] = (dot % p.q as u64) as u16;
        }
        let m = vec![0u8; 8];
        let c = pq_encrypt(&m, &pk, 55);
        assert_eq!(pq_decrypt(&c, &sk).unwrap(), m);
    }

    #[test]
    fn malformed_ciphertexts_are_rejected() {
        let p = LweParams::desk();
        let (pk, sk) = pq_keygen(&p, 9).unwrap();
        let c = pq_encrypt(b"hi", &pk, 1);

        assert!(pq_decrypt(&c[..4], &sk).is_err());
        let mut short = c.clone();
        short.truncate(c.len() - 2);
        assert!(pq_decrypt(&short, &sk).is_err());

        let mut wrong_dim = c.clone();
        wrong_dim[4..8].copy_from_slice(&(128u32).to_le_bytes());
        assert!(matches!(
            pq_decrypt(&wrong_dim, &sk),
            Err(CryptoError::MalformedCiphertext(_))
        ));

        let mut big_coord = c;
        big_coord[8..10].copy_from_slice(&(5000u16).to_le_bytes());
        assert!(matches!(
            pq_decrypt(&big_coord, &sk),
            Err(CryptoError::MalformedCiphertext(_))
        ));
    }

    #[test]
    fn c2_perturbation_flip_rate_grows_with_magnitude() {
        // Documented malleability: shifting the rounding coordinate flips
        // the decrypted bit once the shift crosses the decision margin.
        let p = LweParams::desk();
        let (pk, sk) = pq_keygen(&p, 21).unwrap();
        let q = p.q as u64;
        let trials = 64usize;
        let mut flips = Vec::new();
        for delta in [1u64, q / 16, q / 8, q / 4, q / 2] {
            let mut flipped = 0;
            for t in 0..trials {
                let m = [(t % 2 == 0) as u8 * 0xFF];
                let c = pq_encrypt(&m, &pk, t as u64);
                let mut tampered = c.clone();
                // Last coordinate of the first bit's ciphertext.
                let base = 8 + p.n * 2;
                let v = u16::from_le_bytes(tampered[base..base + 2].try_into().unwrap()) as u64;
                let v2 = ((v + delta) % q) as u16;
                tampered[base..base + 2].copy_from_slice(&v2.to_le_bytes());
                let orig = pq_decrypt(&c, &sk).unwrap();
                let tam = pq_decrypt(&tampered, &sk).unwrap();
                if (orig[0] ^ tam[0]) & 0x80 != 0 {
                    flipped += 1;
                }
            }
            flips.push(flipped);
        }
        assert_eq!(flips[0], 0, "one-step shift never crosses the margin");
        assert_eq!(*flips.last().unwrap(), trials, "half-q shift always flips");
        assert!(flips.windows(2).all(|w| w[0] <= w[1]), "flip rates {flips:?}");
    }
}
