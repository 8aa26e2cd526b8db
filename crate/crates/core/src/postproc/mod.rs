//! From aligned tag streams to identical secret keys.
//!
//! Pipeline order: one-to-one time filtering, basis sifting, error-rate
//! estimation on a disclosed random subset, LDPC syndrome reconciliation
//! ([`ldpc`]) authenticated with a one-time universal-hash MAC ([`wcmac`]),
//! and Toeplitz privacy amplification ([`toeplitz`]). The key-rate report
//! uses the asymptotic rate `r = 1 - h(q) - (1 - R_c)`, clamped at zero.

pub mod ldpc;
pub mod toeplitz;
pub mod wcmac;

use crate::sync::match_pairs_one_to_one;
use crate::timetag::{map_detector, TagStream, TimeTick};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PostprocError {
    #[error("argument {0} outside its domain")]
    Domain(String),
    #[error("no coincident events to sift")]
    EmptyKey,
    #[error("not enough sifted bits: have {have}, need {need}")]
    InsufficientBits { have: usize, need: usize },
    #[error("syndrome decoding failed after {iterations} iterations")]
    DecodeFailure { iterations: usize },
    #[error("corrupt LDPC asset: {0}")]
    BadAsset(String),
}

/// Binary entropy in bits, with `h(0) = h(1) = 0` by continuity.
pub fn binary_entropy(q: f64) -> Result<f64, PostprocError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(PostprocError::Domain(format!("entropy argument {q}")));
    }
    if q == 0.0 || q == 1.0 {
        return Ok(0.0);
    }
    Ok(-q * q.log2() - (1.0 - q) * (1.0 - q).log2())
}

/// Matching-basis key bits for one party after sifting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiftedKey {
    /// Key bits, one per retained coincidence.
    pub bits: Vec<u8>,
    /// Coincident pairs found before basis comparison.
    pub n_raw: usize,
}

/// Everything the classical channel sees during sifting, kept for the
/// transcript-encryption audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiftTranscript {
    /// Basis bit per matched pair, as exchanged (0 = rectilinear).
    pub alice_bases: Vec<u8>,
    pub bob_bases: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct SiftOutcome {
    pub alice: SiftedKey,
    pub bob: SiftedKey,
    pub transcript: SiftTranscript,
}

/// Pair events one-to-one within `window`, map each detection to its
/// (basis, bit), exchange basis arrays, and keep matching-basis positions.
///
/// Both sides run this on the identical (aligned) stream pair and obtain
/// equal-length keys.
pub fn time_filter_and_sift(
    a: &TagStream,
    b: &TagStream,
    window: TimeTick,
) -> Result<SiftOutcome, PostprocError> {
    let pairs = match_pairs_one_to_one(a.events(), b.events(), TimeTick::ZERO, window);
    if pairs.is_empty() {
        return Err(PostprocError::EmptyKey);
    }
    let n_raw = pairs.len();
    let mut alice_bases = Vec::with_capacity(n_raw);
    let mut bob_bases = Vec::with_capacity(n_raw);
    let mut ka = Vec::new();
    let mut kb = Vec::new();
    for &(i, j) in &pairs {
        let (a_basis, a_bit) = map_detector(a.events()[i].detector);
        let (b_basis, b_bit) = map_detector(b.events()[j].detector);
        alice_bases.push((a_basis == crate::timetag::Basis::Diag) as u8);
        bob_bases.push((b_basis == crate::timetag::Basis::Diag) as u8);
        if a_basis == b_basis {
            ka.push(a_bit as u8);
            kb.push(b_bit as u8);
        }
    }
    Ok(SiftOutcome {
        alice: SiftedKey { bits: ka, n_raw },
        bob: SiftedKey { bits: kb, n_raw },
        transcript: SiftTranscript {
            alice_bases,
            bob_bases,
        },
    })
}

#[derive(Debug, Clone)]
pub struct QberEstimate {
    /// Mismatch fraction over the disclosed subset.
    pub q: f64,
    /// Remaining key bits after the disclosed positions are removed.
    pub alice_rest: Vec<u8>,
    pub bob_rest: Vec<u8>,
    /// Disclosed positions (indices into the sifted key), ascending.
    pub disclosed: Vec<usize>,
}

/// Seed-determined sample of `size` distinct positions in `0..len`,
/// ascending. Both parties compute it from the exchanged nonce.
pub fn sample_positions(len: usize, size: usize, nonce: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(nonce);
    let mut positions = rand::seq::index::sample(&mut rng, len, size).into_vec();
    positions.sort_unstable();
    positions
}

/// Remove the (ascending) positions from a bit vector.
pub fn strip_positions(bits: &[u8], positions: &[usize]) -> Vec<u8> {
    let mut keep = vec![true; bits.len()];
    for &i in positions {
        keep[i] = false;
    }
    bits.iter()
        .zip(&keep)
        .filter_map(|(&b, &k)| k.then_some(b))
        .collect()
}

/// Disclose a seeded-random subset of `n_raw / 4` positions, compare, and
/// strip them from both keys. The subset is a deterministic function of the
/// nonce so both parties remove identical positions.
pub fn estimate_qber(
    ka: &[u8],
    kb: &[u8],
    n_raw: usize,
    nonce: u64,
) -> Result<QberEstimate, PostprocError> {
    if ka.len() != kb.len() {
        return Err(PostprocError::Domain("sifted keys differ in length".into()));
    }
    let sample_size = n_raw / 4;
    if ka.len() < sample_size || sample_size == 0 {
        return Err(PostprocError::InsufficientBits {
            have: ka.len(),
            need: sample_size.max(1),
        });
    }
    let disclosed = sample_positions(ka.len(), sample_size, nonce);
    let mismatches = disclosed.iter().filter(|&&i| ka[i] != kb[i]).count();
    let q = mismatches as f64 / sample_size as f64;
    Ok(QberEstimate {
        q,
        alice_rest: strip_positions(ka, &disclosed),
        bob_rest: strip_positions(kb, &disclosed),
        disclosed,
    })
}

/// Highest error rate the fixed rate-1/2 reconciliation step handles; past
/// this the decoder fails and the session yields no key.
pub const MAX_RECONCILABLE_QBER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyRateReport {
    /// Error-rate estimate the rate was computed from.
    pub q: f64,
    /// Block length entering privacy amplification.
    pub n: usize,
    /// Secret bits per sifted bit: `max(0, 1 - h(q) - (1 - code_rate))`.
    pub r: f64,
    /// Whether the reconciliation step can operate at this error rate.
    pub feasible: bool,
    /// `ceil(r * n)` when feasible, else 0.
    pub final_len: usize,
    /// Secret bits per wall-clock second of session time.
    pub skr: f64,
}

/// Asymptotic key-rate bookkeeping for one session.
///
/// `r = 1 - h(q) - L` with `L = 1 - code_rate` the syndrome disclosure
/// fraction. The throughput additionally gates on the decoder's operational
/// limit: beyond [`MAX_RECONCILABLE_QBER`] reconciliation fails, so the
/// delivered rate is zero even though the formula alone would stay positive
/// until `h(q) = code_rate`.
pub fn key_rate(
    q: f64,
    code_rate: f64,
    n: usize,
    session_seconds: f64,
) -> Result<KeyRateReport, PostprocError> {
    if !(0.0..=1.0).contains(&code_rate) {
        return Err(PostprocError::Domain(format!("code rate {code_rate}")));
    }
    if !(session_seconds > 0.0) {
        return Err(PostprocError::Domain(format!(
            "session duration {session_seconds}"
        )));
    }
    let leak = 1.0 - code_rate;
    let r = (1.0 - binary_entropy(q)? - leak).max(0.0);
    let feasible = q <= MAX_RECONCILABLE_QBER;
    let final_len = if feasible {
        (r * n as f64).ceil() as usize
    } else {
        0
    };
    Ok(KeyRateReport {
        q,
        n,
        r,
        feasible,
        final_len,
        skr: final_len as f64 / session_seconds,
    })
}
