//! Toeplitz-matrix privacy amplification.
//!
//! The matrix is a 2-universal family member defined by `rows + cols - 1`
//! diagonal bits, expanded from a 32-byte seed; only the seed crosses the
//! channel. The output is `T * bits` over GF(2), of length `ceil(r * N)`.

use crate::postproc::PostprocError;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seed that expands into the hashing matrix.
pub type PaSeed = [u8; 32];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Toeplitz {
    rows: usize,
    cols: usize,
    /// `rows + cols - 1` bits; entry (i, j) is `diag[i - j + cols - 1]`.
    diag: Vec<u8>,
}

impl Toeplitz {
    /// Build from explicit diagonal bits (0/1), first row rightmost first:
    /// `T[i][j] = diag[i - j + cols - 1]`.
    pub fn new(rows: usize, cols: usize, diag: Vec<u8>) -> Toeplitz {
        assert!(rows > 0 && cols > 0);
        assert_eq!(diag.len(), rows + cols - 1, "diagonal bit count");
        assert!(diag.iter().all(|&b| b <= 1));
        Toeplitz { rows, cols, diag }
    }

    /// Expand a seed into the diagonal bits with ChaCha8.
    pub fn from_seed(rows: usize, cols: usize, seed: &PaSeed) -> Toeplitz {
        let mut rng = ChaCha8Rng::from_seed(*seed);
        let need = rows + cols - 1;
        let mut bytes = vec![0u8; need.div_ceil(8)];
        rng.fill_bytes(&mut bytes);
        let diag = (0..need)
            .map(|i| (bytes[i / 8] >> (i % 8)) & 1)
            .collect();
        Toeplitz::new(rows, cols, diag)
    }

    /// The identity member of the family (square, ones on the diagonal).
    pub fn identity(n: usize) -> Toeplitz {
        let mut diag = vec![0u8; 2 * n - 1];
        diag[n - 1] = 1;
        Toeplitz::new(n, n, diag)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entry(&self, i: usize, j: usize) -> u8 {
        self.diag[i + self.cols - 1 - j]
    }

    /// `T * bits` over GF(2).
    pub fn mul(&self, bits: &[u8]) -> Vec<u8> {
        assert_eq!(bits.len(), self.cols, "input length");
        let mut out = vec![0u8; self.rows];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0u8;
            let base = i + self.cols - 1;
            for (j, &b) in bits.iter().enumerate() {
                acc ^= self.diag[base - j] & b;
            }
            *o = acc;
        }
        out
    }
}

/// Compress `bits` to `ceil(r * N)` secret bits with the seed-expanded
/// Toeplitz family member.
pub fn privacy_amplify(bits: &[u8], r: f64, seed: &PaSeed) -> Result<Vec<u8>, PostprocError> {
    if !(r > 0.0) {
        return Err(PostprocError::EmptyKey);
    }
    if r > 1.0 {
        return Err(PostprocError::Domain(format!("compression ratio {r}")));
    }
    let n = bits.len();
    if n == 0 {
        return Err(PostprocError::EmptyKey);
    }
    let m = (r * n as f64).ceil() as usize;
    Ok(Toeplitz::from_seed(m, n, seed).mul(bits))
}

/// Output length of [`privacy_amplify`] for the same arguments.
pub fn amplified_len(n: usize, r: f64) -> usize {
    (r * n as f64).ceil() as usize
}
