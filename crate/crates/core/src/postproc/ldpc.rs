//! LDPC syndrome reconciliation.
//!
//! The parity-check matrix is built offline by a seeded progressive
//! edge-growth construction over an irregular variable-degree profile
//! (edge fractions 0.30013 on degree 2, 0.28395 on degree 3, 0.41592 on
//! degree 8 for the rate-1/2 family) and shipped as a digest-pinned text
//! asset. Decoding is normalized min-sum belief propagation driven toward a
//! target syndrome: Alice corrects her bits until their syndrome equals the
//! one Bob sent.

use crate::bits::pack_bits;
use crate::postproc::PostprocError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::sync::OnceLock;

/// Sparse parity-check matrix with both row and column adjacency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LdpcCode {
    n: usize,
    m: usize,
    rows: Vec<Vec<u32>>,
    cols: Vec<Vec<u32>>,
    digest: [u8; 32],
}

impl LdpcCode {
    pub fn from_rows(n: usize, rows: Vec<Vec<u32>>) -> Result<Self, PostprocError> {
        let m = rows.len();
        if m == 0 || m >= n {
            return Err(PostprocError::BadAsset(format!(
                "parity-check shape {m}x{n} out of range"
            )));
        }
        let mut cols = vec![Vec::new(); n];
        let mut canon_rows = Vec::with_capacity(m);
        for (r, row) in rows.into_iter().enumerate() {
            let mut row = row;
            row.sort_unstable();
            row.dedup();
            for &c in &row {
                if c as usize >= n {
                    return Err(PostprocError::BadAsset(format!(
                        "row {r} references column {c} >= n"
                    )));
                }
                cols[c as usize].push(r as u32);
            }
            canon_rows.push(row);
        }
        let digest = asset_digest(n, n - m, &canon_rows);
        Ok(LdpcCode {
            n,
            m,
            rows: canon_rows,
            cols,
            digest,
        })
    }

    /// Codeword length (variable count).
    pub fn n(&self) -> usize {
        self.n
    }

    /// Check count; the syndrome length.
    pub fn syndrome_len(&self) -> usize {
        self.m
    }

    /// Code dimension `n - m`.
    pub fn k(&self) -> usize {
        self.n - self.m
    }

    pub fn rate(&self) -> f64 {
        self.k() as f64 / self.n as f64
    }

    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }

    /// Edge count of the Tanner graph.
    pub fn edges(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// `H * bits` over GF(2).
    pub fn syndrome(&self, bits: &[u8]) -> Vec<u8> {
        assert_eq!(bits.len(), self.n, "syndrome input length");
        self.rows
            .iter()
            .map(|row| row.iter().fold(0u8, |acc, &c| acc ^ (bits[c as usize] & 1)))
            .collect()
    }

    /// Serialize in the sparse row-index text format.
    pub fn to_asset_string(&self) -> String {
        let mut out = String::new();
        out.push_str("ldpc-pcm v1\n");
        out.push_str(&format!("n {}\n", self.n));
        out.push_str(&format!("k {}\n", self.k()));
        out.push_str(&format!("digest {}\n", hex(&self.digest)));
        for (r, row) in self.rows.iter().enumerate() {
            out.push_str(&format!("{r}:"));
            for c in row {
                out.push_str(&format!(" {c}"));
            }
            out.push('\n');
        }
        out
    }

    /// Parse the asset format and verify the pinned digest.
    pub fn from_asset_str(s: &str) -> Result<Self, PostprocError> {
        let bad = |m: String| PostprocError::BadAsset(m);
        let mut lines = s.lines().filter(|l| !l.trim_start().starts_with('#'));
        if lines.next().map(str::trim) != Some("ldpc-pcm v1") {
            return Err(bad("missing ldpc-pcm v1 header".into()));
        }
        let mut field = |name: &str| -> Result<String, PostprocError> {
            let line = lines
                .next()
                .ok_or_else(|| bad(format!("missing {name} line")))?;
            line.trim()
                .strip_prefix(name)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| bad(format!("expected {name} line, got {line:?}")))
        };
        let n: usize = field("n")?.parse().map_err(|e| bad(format!("n: {e}")))?;
        let k: usize = field("k")?.parse().map_err(|e| bad(format!("k: {e}")))?;
        let digest_hex = field("digest")?;
        if k >= n {
            return Err(bad(format!("k {k} must be below n {n}")));
        }
        let m = n - k;
        let mut rows = vec![Vec::new(); m];
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (idx, rest) = line
                .split_once(':')
                .ok_or_else(|| bad(format!("bad row line {line:?}")))?;
            let r: usize = idx.trim().parse().map_err(|e| bad(format!("row: {e}")))?;
            if r >= m {
                return Err(bad(format!("row index {r} >= m {m}")));
            }
            for tok in rest.split_whitespace() {
                let c: u32 = tok.parse().map_err(|e| bad(format!("col: {e}")))?;
                rows[r].push(c);
            }
        }
        let code = LdpcCode::from_rows(n, rows)?;
        if hex(&code.digest) != digest_hex.to_lowercase() {
            return Err(bad(format!(
                "digest mismatch: asset pins {digest_hex}, matrix hashes to {}",
                hex(&code.digest)
            )));
        }
        Ok(code)
    }

    /// The rate-1/2, n = 4096 matrix shipped with the crate.
    pub fn shipped_4096() -> &'static LdpcCode {
        static CODE: OnceLock<LdpcCode> = OnceLock::new();
        CODE.get_or_init(|| {
            LdpcCode::from_asset_str(include_str!("../../assets/ldpc_4096_2048.txt"))
                .expect("shipped LDPC asset is valid")
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn asset_digest(n: usize, k: usize, rows: &[Vec<u32>]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(format!("n {n}\nk {k}\n"));
    for (r, row) in rows.iter().enumerate() {
        let mut line = format!("{r}:");
        for c in row {
            line.push_str(&format!(" {c}"));
        }
        line.push('\n');
        h.update(line);
    }
    h.finalize().into()
}

/// Variable-node degree sequence for the rate-1/2 profile at length `n`,
/// ascending. Node fractions follow from the edge-perspective fractions via
/// `lambda_i / i`.
pub fn standard_degree_sequence(n: usize) -> Vec<usize> {
    // (degree, lambda_i / i), normalized below.
    let profile = [(2usize, 0.30013 / 2.0), (3, 0.28395 / 3.0), (8, 0.41592 / 8.0)];
    let total: f64 = profile.iter().map(|(_, w)| w).sum();
    let mut counts: Vec<(usize, usize)> = profile
        .iter()
        .map(|&(d, w)| (d, (n as f64 * w / total).round() as usize))
        .collect();
    let assigned: usize = counts.iter().map(|(_, c)| c).sum();
    // Absorb rounding drift into the lowest degree.
    counts[0].1 = (counts[0].1 as i64 + n as i64 - assigned as i64) as usize;
    let mut seq = Vec::with_capacity(n);
    for (d, c) in counts {
        seq.extend(std::iter::repeat(d).take(c));
    }
    seq.sort_unstable();
    seq
}

/// Progressive edge-growth construction.
///
/// Variables are processed in ascending degree order. The first edge of a
/// variable goes to a minimum-degree check; every further edge goes to a
/// check as far as possible from the variable in the current Tanner graph
/// (unreachable checks first), minimum degree among candidates, random
/// seeded tie-break.
pub fn peg_construct(n: usize, m: usize, var_degrees: &[usize], seed: u64) -> LdpcCode {
    assert_eq!(var_degrees.len(), n);
    assert!(m < n && m > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| (var_degrees[v], v));

    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); m];
    let mut cols: Vec<Vec<u32>> = vec![Vec::new(); n];

    // BFS scratch with generation stamps so we never clear between runs.
    let mut var_seen = vec![0u32; n];
    let mut check_seen = vec![0u32; m];
    let mut check_depth = vec![0u32; m];
    let mut generation = 0u32;

    for &v in &order {
        for edge_idx in 0..var_degrees[v] {
            let choice = if edge_idx == 0 {
                pick_min_degree(&rows, (0..m).filter(|&c| !cols[v].contains(&(c as u32))), &mut rng)
            } else {
                generation += 1;
                // BFS from v through the current graph, recording the depth
                // at which each check is first reached.
                var_seen[v] = generation;
                let mut frontier_vars = vec![v];
                let mut depth = 0u32;
                let mut reached = 0usize;
                while !frontier_vars.is_empty() {
                    depth += 1;
                    let mut next_checks = Vec::new();
                    for &fv in &frontier_vars {
                        for &c in &cols[fv] {
                            if check_seen[c as usize] != generation {
                                check_seen[c as usize] = generation;
                                check_depth[c as usize] = depth;
                                reached += 1;
                                next_checks.push(c);
                            }
                        }
                    }
                    if reached == m {
                        break;
                    }
                    let mut next_vars = Vec::new();
                    for &c in &next_checks {
                        for &nv in &rows[c as usize] {
                            if var_seen[nv as usize] != generation {
                                var_seen[nv as usize] = generation;
                                next_vars.push(nv as usize);
                            }
                        }
                    }
                    frontier_vars = next_vars;
                }

                let unreachable =
                    (0..m).filter(|&c| check_seen[c] != generation).collect::<Vec<_>>();
                let candidates: Vec<usize> = if !unreachable.is_empty() {
                    unreachable
                } else {
                    let max_depth = (0..m)
                        .filter(|&c| !cols[v].contains(&(c as u32)))
                        .map(|c| check_depth[c])
                        .max()
                        .expect("degree sequence leaves a free check");
                    (0..m)
                        .filter(|&c| {
                            check_depth[c] == max_depth && !cols[v].contains(&(c as u32))
                        })
                        .collect()
                };
                pick_min_degree(&rows, candidates.into_iter(), &mut rng)
            };
            rows[choice].push(v as u32);
            cols[v].push(choice as u32);
        }
    }

    LdpcCode::from_rows(n, rows).expect("PEG output is well-formed")
}

fn pick_min_degree(
    rows: &[Vec<u32>],
    candidates: impl Iterator<Item = usize>,
    rng: &mut ChaCha8Rng,
) -> usize {
    let mut best: Vec<usize> = Vec::new();
    let mut best_deg = usize::MAX;
    for c in candidates {
        let d = rows[c].len();
        if d < best_deg {
            best_deg = d;
            best.clear();
            best.push(c);
        } else if d == best_deg {
            best.push(c);
        }
    }
    assert!(!best.is_empty(), "no candidate check available");
    best[rng.gen_range(0..best.len())]
}

/// Belief-propagation decode toward `target_syndrome`.
///
/// `llrs[i] > 0` means bit i is believed 0. Returns the hard decision whose
/// syndrome equals the target, plus the iteration count (0 when the input
/// already satisfies it).
pub fn decode_syndrome(
    code: &LdpcCode,
    llrs: &[f64],
    target_syndrome: &[u8],
    max_iters: usize,
) -> Result<(Vec<u8>, usize), PostprocError> {
    assert_eq!(llrs.len(), code.n());
    assert_eq!(target_syndrome.len(), code.syndrome_len());
    const ALPHA: f64 = 0.8; // min-sum normalization

    let hard = |totals: &[f64]| -> Vec<u8> {
        totals.iter().map(|&t| (t < 0.0) as u8).collect()
    };

    let initial = hard(llrs);
    if code.syndrome(&initial) == target_syndrome {
        return Ok((initial, 0));
    }

    // Flat edge layout grouped by check; a parallel map from variables to
    // their edge ids drives the variable update.
    let e_total = code.edges();
    let mut edge_var = Vec::with_capacity(e_total);
    let mut check_start = Vec::with_capacity(code.syndrome_len() + 1);
    check_start.push(0usize);
    for row in code.rows() {
        for &c in row {
            edge_var.push(c as usize);
        }
        check_start.push(edge_var.len());
    }
    let mut var_edges: Vec<Vec<u32>> = vec![Vec::new(); code.n()];
    for (e, &v) in edge_var.iter().enumerate() {
        var_edges[v].push(e as u32);
    }

    let mut v2c: Vec<f64> = edge_var.iter().map(|&v| llrs[v]).collect();
    let mut c2v = vec![0.0f64; e_total];
    let mut totals = vec![0.0f64; code.n()];

    for iteration in 1..=max_iters {
        for c in 0..code.syndrome_len() {
            let es = check_start[c]..check_start[c + 1];
            let mut parity = target_syndrome[c] & 1;
            let mut min1 = f64::INFINITY;
            let mut min2 = f64::INFINITY;
            let mut argmin = es.start;
            for e in es.clone() {
                let val = v2c[e];
                if val < 0.0 {
                    parity ^= 1;
                }
                let mag = val.abs();
                if mag < min1 {
                    min2 = min1;
                    min1 = mag;
                    argmin = e;
                } else if mag < min2 {
                    min2 = mag;
                }
            }
            for e in es {
                let mag = if e == argmin { min2 } else { min1 };
                let self_neg = (v2c[e] < 0.0) as u8;
                let sign = if parity ^ self_neg == 1 { -1.0 } else { 1.0 };
                c2v[e] = ALPHA * sign * mag;
            }
        }

        for v in 0..code.n() {
            let mut t = llrs[v];
            for &e in &var_edges[v] {
                t += c2v[e as usize];
            }
            totals[v] = t;
            for &e in &var_edges[v] {
                v2c[e as usize] = t - c2v[e as usize];
            }
        }

        let decision = hard(&totals);
        if code.syndrome(&decision) == target_syndrome {
            return Ok((decision, iteration));
        }
    }
    Err(PostprocError::DecodeFailure {
        iterations: max_iters,
    })
}

/// Channel LLR magnitude for a symmetric error rate `q`.
pub fn channel_llr(q: f64) -> f64 {
    let q = q.clamp(1e-12, 0.5);
    ((1.0 - q) / q).ln()
}

/// Correct `received` toward the key whose syndrome is `syndrome`, assuming
/// a symmetric error rate `q` between the two keys.
pub fn reconcile(
    received: &[u8],
    syndrome: &[u8],
    q: f64,
    code: &LdpcCode,
) -> Result<Vec<u8>, PostprocError> {
    let l = channel_llr(q);
    let llrs: Vec<f64> = received
        .iter()
        .map(|&b| if b == 0 { l } else { -l })
        .collect();
    decode_syndrome(code, &llrs, syndrome, 60).map(|(bits, _)| bits)
}

/// LLR magnitude assigned to zero-padding positions: effectively certain.
pub const PAD_LLR: f64 = 1e9;

/// Split a key into code-sized blocks, zero-padding the tail block.
pub fn pad_blocks(bits: &[u8], n: usize) -> Vec<Vec<u8>> {
    let mut blocks = Vec::new();
    for chunk in bits.chunks(n) {
        let mut block = chunk.to_vec();
        block.resize(n, 0);
        blocks.push(block);
    }
    blocks
}

/// Per-block reconciliation of a full key. Returns the corrected key
/// truncated back to the original length, with `None` for blocks whose
/// decode failed (caller discards those spans on both sides).
pub fn reconcile_key_blocks(
    received: &[u8],
    syndromes: &[Vec<u8>],
    q: f64,
    code: &LdpcCode,
) -> Vec<Option<Vec<u8>>> {
    let n = code.n();
    let l = channel_llr(q);
    let blocks = pad_blocks(received, n);
    assert_eq!(blocks.len(), syndromes.len(), "syndrome count mismatch");
    let trailing = received.len() % n;
    let block_count = blocks.len();
    blocks
        .into_iter()
        .zip(syndromes)
        .enumerate()
        .map(|(bi, (block, syn))| {
            let real_len = if bi + 1 == block_count && trailing != 0 {
                trailing
            } else {
                n
            };
            let llrs: Vec<f64> = block
                .iter()
                .enumerate()
                .map(|(i, &b)| {
                    if i >= real_len {
                        PAD_LLR
                    } else if b == 0 {
                        l
                    } else {
                        -l
                    }
                })
                .collect();
            decode_syndrome(code, &llrs, syn, 60)
                .ok()
                .map(|(bits, _)| bits[..real_len].to_vec())
        })
        .collect()
}

/// 64-bit digest for post-correction key verification: SHA-256 truncation
/// over the packed bits. Not a MAC; both sides compare digests over the
/// authenticated channel.
pub fn block_digest(bits: &[u8]) -> u64 {
    let packed = pack_bits(bits);
    let mut h = Sha256::new();
    h.update((bits.len() as u64).to_le_bytes());
    h.update(&packed);
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}
