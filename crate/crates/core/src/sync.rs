//! GPS-free clock recovery from coincidence statistics.
//!
//! The incoming streams are cut into acquisition rounds of length `t_acq`.
//! Round 1 runs a coarse cross-correlation scan over `[-R, R]` in steps of
//! `delta` with window `W = delta + 2*FWHM` (wide enough that a peak
//! straddling two grid points is not missed), followed by fine alignment.
//! Every later round runs fine alignment only: shift Bob by the running
//! correction, greedily pair events one-to-one within `W`, histogram the
//! pair deltas in bins of width `w` centered on multiples of `w`, and take
//! the modal bin center as the residual offset. Re-estimating per round is
//! what absorbs drift; there is no explicit slope fit.
//!
//! The coarse scan is a deterministic parallel map over the shift grid;
//! the argmax reduction is sequential with ties broken toward the smallest
//! `|shift|`, then the smallest shift, so results do not depend on
//! evaluation order.

use crate::par;
use crate::timetag::{count_coincidences_shifted, TagEvent, TagStream, TimeTick};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("no significant coincidence peak found (round {round}): {context}")]
    PeakNotFound { round: usize, context: String },
    #[error("invalid sync params: {0}")]
    InvalidParams(String),
}

/// Synchronization protocol parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyncParams {
    /// Acquisition period per round, picoseconds.
    pub t_acq_ps: i64,
    /// Coarse scan step size, picoseconds.
    pub delta_ps: i64,
    /// Coincidence peak width (FWHM) of the source, picoseconds.
    pub fwhm_ps: i64,
    /// Coarse scan half-range, picoseconds; the grid covers +-scan_range.
    pub scan_range_ps: i64,
    /// Fine alignment bin width, picoseconds.
    pub bin_width_ps: i64,
}

impl Default for SyncParams {
    /// Bench values: 50 ms rounds, 200 ns coarse step, 1 ns peak width,
    /// +-1 ms scan range, 1 ns fine bins.
    fn default() -> Self {
        SyncParams {
            t_acq_ps: 50_000_000_000,
            delta_ps: 200_000,
            fwhm_ps: 1_000,
            scan_range_ps: 1_000_000_000,
            bin_width_ps: 1_000,
        }
    }
}

impl SyncParams {
    pub fn validate(&self) -> Result<(), SyncError> {
        let bad = |m: &str| Err(SyncError::InvalidParams(m.to_string()));
        if self.t_acq_ps <= 0 {
            return bad("t_acq must be positive");
        }
        if self.fwhm_ps <= 0 {
            return bad("fwhm must be positive");
        }
        if self.bin_width_ps <= 0 {
            return bad("bin width must be positive");
        }
        if self.delta_ps <= 0 || self.delta_ps >= self.scan_range_ps {
            return bad("coarse step must satisfy 0 < delta < scan_range");
        }
        Ok(())
    }

    /// Coincidence window for both alignment stages: `delta + 2*FWHM`.
    pub fn window(&self) -> TimeTick {
        TimeTick::from_ps(self.delta_ps + 2 * self.fwhm_ps)
    }

    /// The coarse shift grid `-R, -R+delta, ..., R`.
    pub fn coarse_grid(&self) -> Vec<TimeTick> {
        let mut grid = Vec::new();
        let mut v = -self.scan_range_ps;
        while v <= self.scan_range_ps {
            grid.push(TimeTick::from_ps(v));
            v += self.delta_ps;
        }
        grid
    }
}

/// Offset estimates carried across rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncState {
    /// 1-based round counter.
    pub round: usize,
    /// Coarse estimate; zeroed once the first fine pass has folded it in.
    pub tau_coarse: TimeTick,
    /// Total correction applied to Bob so far.
    pub tau_accum: TimeTick,
    /// Correction from the most recent round; after round 1 this is the
    /// per-round drift estimate.
    pub last_tau: TimeTick,
}

impl SyncState {
    pub fn initial() -> Self {
        SyncState {
            round: 1,
            tau_coarse: TimeTick::ZERO,
            tau_accum: TimeTick::ZERO,
            last_tau: TimeTick::ZERO,
        }
    }
}

/// Modal-bin significance rule shared by both stages: a peak counts only if
/// the maximum reaches `max(10, 5 * median count)`, with the median taken
/// over every scanned position, zeros included, as the accidental floor.
fn peak_threshold(all_counts: &[u64]) -> u64 {
    if all_counts.is_empty() {
        return 10;
    }
    let mut sorted = all_counts.to_vec();
    sorted.sort_unstable();
    let median = sorted[sorted.len() / 2];
    10.max(5 * median)
}

/// Argmax with ties broken toward the smallest `|key|`, then smallest key.
fn argmax_toward_zero(pairs: impl Iterator<Item = (i64, u64)>) -> Option<(i64, u64)> {
    let mut best: Option<(i64, u64)> = None;
    for (k, c) in pairs {
        best = Some(match best {
            None => (k, c),
            Some((bk, bc)) => {
                if c > bc || (c == bc && (k.abs() < bk.abs() || (k.abs() == bk.abs() && k < bk))) {
                    (k, c)
                } else {
                    (bk, bc)
                }
            }
        });
    }
    best
}

/// Sequential reference for the coarse scan; used by the bench suite.
pub fn coarse_scan_counts_seq(
    a: &[TagEvent],
    b: &[TagEvent],
    grid: &[TimeTick],
    window: TimeTick,
) -> Vec<u64> {
    par::map_slice_seq(grid, |&shift| {
        count_coincidences_shifted(a, b, shift, window)
    })
}

/// Coincidence count at every grid shift; parallel when the feature is on.
pub fn coarse_scan_counts(
    a: &[TagEvent],
    b: &[TagEvent],
    grid: &[TimeTick],
    window: TimeTick,
) -> Vec<u64> {
    par::map_slice(grid, |&shift| {
        count_coincidences_shifted(a, b, shift, window)
    })
}

/// Coarse alignment: scan the shift grid and return the argmax shift.
///
/// Runs on the first round only. The returned value is the raw grid argmax;
/// the residual within one step is left to fine alignment.
pub fn coarse_align(a: &[TagEvent], b: &[TagEvent], params: &SyncParams) -> Result<TimeTick, SyncError> {
    params.validate()?;
    let grid = params.coarse_grid();
    let counts = coarse_scan_counts(a, b, &grid, params.window());
    let threshold = peak_threshold(&counts);
    let (best_shift, best_count) =
        argmax_toward_zero(grid.iter().map(|t| t.ps()).zip(counts.iter().copied()))
            .expect("grid is never empty");
    if best_count < threshold {
        return Err(SyncError::PeakNotFound {
            round: 1,
            context: format!(
                "coarse scan max {best_count} below threshold {threshold} \
                 (offset outside +-{} ps or insufficient overlap)",
                params.scan_range_ps
            ),
        });
    }
    Ok(TimeTick::from_ps(best_shift))
}

/// Greedy one-to-one pairing in time order: advance two pointers and match
/// whenever `|a - b| <= window`; each event is used at most once.
pub fn match_pairs_one_to_one(
    a: &[TagEvent],
    b: &[TagEvent],
    shift: TimeTick,
    window: TimeTick,
) -> Vec<(usize, usize)> {
    let w = window.ps();
    let s = shift.ps();
    let mut pairs = Vec::new();
    let mut i = 0;
    let mut j = 0;
    while i < a.len() && j < b.len() {
        let ta = a[i].tick.ps();
        let tb = b[j].tick.ps().saturating_add(s);
        if (ta - tb).abs() <= w {
            pairs.push((i, j));
            i += 1;
            j += 1;
        } else if tb < ta {
            j += 1;
        } else {
            i += 1;
        }
    }
    pairs
}

/// One fine-alignment round.
///
/// Steps: shift Bob's slice by `tau_coarse + tau_accum`, pair one-to-one
/// within `W`, bin the pair deltas `a - b` with bins centered on multiples
/// of the bin width, and read the residual off the modal bin. Returns the
/// round's total correction, Bob's corrected slice, and the updated state.
pub fn fine_align(
    a: &[TagEvent],
    b: &[TagEvent],
    state: &SyncState,
    params: &SyncParams,
) -> Result<(TimeTick, Vec<TagEvent>, SyncState), SyncError> {
    params.validate()?;
    let w = params.bin_width_ps;
    let pre_shift = state.tau_coarse + state.tau_accum;
    let window = params.window();

    let pairs = match_pairs_one_to_one(a, b, pre_shift, window);
    if pairs.is_empty() {
        return Err(SyncError::PeakNotFound {
            round: state.round,
            context: "no matched pairs within window".to_string(),
        });
    }

    // Bin index floor((dt + w/2) / w): bins centered on multiples of w.
    // Matched deltas satisfy |dt| <= W, so the full grid is known up front
    // and the significance floor sees the empty bins too.
    let lo_bin = (-window.ps() + w / 2).div_euclid(w);
    let hi_bin = (window.ps() + w / 2).div_euclid(w);
    let mut counts = vec![0u64; (hi_bin - lo_bin + 1) as usize];
    for &(i, j) in &pairs {
        let dt = a[i].tick.ps() - (b[j].tick.ps() + pre_shift.ps());
        let bin = (dt + w / 2).div_euclid(w);
        counts[(bin - lo_bin) as usize] += 1;
    }
    let threshold = peak_threshold(&counts);
    let (modal_bin, modal_count) = argmax_toward_zero(
        counts
            .iter()
            .enumerate()
            .map(|(idx, &c)| (lo_bin + idx as i64, c)),
    )
    .expect("bin grid is never empty");
    if modal_count < threshold {
        return Err(SyncError::PeakNotFound {
            round: state.round,
            context: format!("modal bin count {modal_count} below threshold {threshold}"),
        });
    }

    let tau_fine = TimeTick::from_ps(modal_bin * w);
    let tau = state.tau_coarse + tau_fine;
    let applied = state.tau_accum + tau;
    let corrected: Vec<TagEvent> = b
        .iter()
        .map(|e| TagEvent {
            tick: e.tick + applied,
            detector: e.detector,
        })
        .collect();

    let next = SyncState {
        round: state.round + 1,
        tau_coarse: TimeTick::ZERO,
        tau_accum: applied,
        last_tau: tau,
    };
    Ok((tau, corrected, next))
}

/// Full synchronization pass over two streams.
///
/// Slices both streams into consecutive `t_acq` rounds (by Alice's clock for
/// `a` and Bob's raw clock for `b`), runs the coarse scan once on round 1,
/// then fine alignment on every round, and returns Bob's concatenated
/// corrected stream plus the per-round state trace (state *after* each
/// round).
pub fn run_sync(
    a: &TagStream,
    b: &TagStream,
    params: &SyncParams,
) -> Result<(TagStream, Vec<SyncState>), SyncError> {
    params.validate()?;
    let start = a
        .first_tick()
        .unwrap_or(TimeTick::ZERO)
        .min(b.first_tick().unwrap_or(TimeTick::ZERO))
        .min(TimeTick::ZERO);
    let end = a
        .last_tick()
        .unwrap_or(TimeTick::ZERO)
        .max(b.last_tick().unwrap_or(TimeTick::ZERO));

    let mut state = SyncState::initial();
    let mut trace = Vec::new();
    let mut corrected = Vec::new();
    let mut round_start = start;
    while round_start <= end {
        let round_end = round_start + TimeTick::from_ps(params.t_acq_ps);
        let a_slice = a.slice_window(round_start, round_end);
        let b_slice = b.slice_window(round_start, round_end);

        if state.round == 1 {
            state.tau_coarse = coarse_align(a_slice, b_slice, params)?;
        }
        let (_, fixed, next) = fine_align(a_slice, b_slice, &state, params)?;
        trace.push(SyncState {
            round: state.round,
            ..next
        });
        corrected.extend(fixed);
        state = next;
        round_start = round_end;
    }

    let aligned = TagStream::from_unsorted(b.party(), corrected)
        .expect("correcting shifts preserves party");
    Ok((aligned, trace))
}
