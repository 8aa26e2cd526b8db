//! Detection events, detector-to-bit mapping, and coincidence counting.
//!
//! Ticks are integer picoseconds: the sweeps elsewhere in the crate probe
//! sub-nanosecond jitter, which must be representable without floating-point
//! tick arithmetic. All tick arithmetic on [`TimeTick`] is checked; the hot
//! counting kernels work on raw `i64` with saturating bound computation so a
//! pathological shift clamps instead of wrapping.

use std::fmt;
use std::io::{self, Read, Write};
use std::ops::{Add, Neg, Sub};

use crate::par;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PS_PER_NS: i64 = 1_000;
pub const PS_PER_US: i64 = 1_000_000;
pub const PS_PER_MS: i64 = 1_000_000_000;
pub const PS_PER_S: i64 = 1_000_000_000_000;

/// Picoseconds since the session epoch, signed 64-bit.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TimeTick(i64);

impl TimeTick {
    pub const ZERO: TimeTick = TimeTick(0);

    pub const fn from_ps(ps: i64) -> Self {
        TimeTick(ps)
    }

    pub const fn from_ns(ns: i64) -> Self {
        TimeTick(ns * PS_PER_NS)
    }

    pub const fn from_us(us: i64) -> Self {
        TimeTick(us * PS_PER_US)
    }

    pub const fn from_ms(ms: i64) -> Self {
        TimeTick(ms * PS_PER_MS)
    }

    pub const fn from_secs(s: i64) -> Self {
        TimeTick(s * PS_PER_S)
    }

    pub const fn ps(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / PS_PER_S as f64
    }

    pub fn checked_add(self, rhs: TimeTick) -> Option<TimeTick> {
        self.0.checked_add(rhs.0).map(TimeTick)
    }

    pub fn checked_sub(self, rhs: TimeTick) -> Option<TimeTick> {
        self.0.checked_sub(rhs.0).map(TimeTick)
    }

    pub fn abs(self) -> TimeTick {
        TimeTick(self.0.abs())
    }
}

impl Add for TimeTick {
    type Output = TimeTick;
    fn add(self, rhs: TimeTick) -> TimeTick {
        self.checked_add(rhs).expect("time tick overflow")
    }
}

impl Sub for TimeTick {
    type Output = TimeTick;
    fn sub(self, rhs: TimeTick) -> TimeTick {
        self.checked_sub(rhs).expect("time tick overflow")
    }
}

impl Neg for TimeTick {
    type Output = TimeTick;
    fn neg(self) -> TimeTick {
        TimeTick(self.0.checked_neg().expect("time tick overflow"))
    }
}

impl fmt::Display for TimeTick {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ps", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Party {
    Alice,
    Bob,
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Alice => write!(f, "alice"),
            Party::Bob => write!(f, "bob"),
        }
    }
}

/// Measurement basis selected by the passive analyzer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basis {
    /// Horizontal/vertical.
    Rect,
    /// Diagonal/anti-diagonal.
    Diag,
}

/// Polarization projection a detector sits behind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarization {
    H,
    V,
    D,
    A,
}

/// One of the eight single-photon detectors. D1-D4 belong to Alice,
/// D5-D8 to Bob, ordered H, V, D, A on each side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DetectorId {
    D1,
    D2,
    D3,
    D4,
    D5,
    D6,
    D7,
    D8,
}

impl DetectorId {
    pub const ALL: [DetectorId; 8] = [
        DetectorId::D1,
        DetectorId::D2,
        DetectorId::D3,
        DetectorId::D4,
        DetectorId::D5,
        DetectorId::D6,
        DetectorId::D7,
        DetectorId::D8,
    ];

    pub fn party(self) -> Party {
        match self {
            DetectorId::D1 | DetectorId::D2 | DetectorId::D3 | DetectorId::D4 => Party::Alice,
            _ => Party::Bob,
        }
    }

    pub fn polarization(self) -> Polarization {
        match self {
            DetectorId::D1 | DetectorId::D5 => Polarization::H,
            DetectorId::D2 | DetectorId::D6 => Polarization::V,
            DetectorId::D3 | DetectorId::D7 => Polarization::D,
            DetectorId::D4 | DetectorId::D8 => Polarization::A,
        }
    }

    /// Inverse of [`map_detector`] for one party.
    pub fn from_mapping(party: Party, basis: Basis, bit: bool) -> DetectorId {
        for d in DetectorId::ALL {
            if d.party() == party && map_detector(d) == (basis, bit) {
                return d;
            }
        }
        unreachable!("every (party, basis, bit) triple has a detector")
    }

    pub fn code(self) -> u8 {
        match self {
            DetectorId::D1 => 1,
            DetectorId::D2 => 2,
            DetectorId::D3 => 3,
            DetectorId::D4 => 4,
            DetectorId::D5 => 5,
            DetectorId::D6 => 6,
            DetectorId::D7 => 7,
            DetectorId::D8 => 8,
        }
    }

    pub fn from_code(code: u8) -> Option<DetectorId> {
        DetectorId::ALL.get(code.checked_sub(1)? as usize).copied()
    }
}

/// Detector-to-(basis, key bit) convention.
///
/// Alice: H -> (rect, 0), V -> (rect, 1), D -> (diag, 0), A -> (diag, 1).
/// Bob's rectilinear bits are flipped (H -> 1, V -> 0) so that for the ideal
/// anti-correlated pair state, matching-basis key bits agree on both sides.
/// In the diagonal basis the ideal outcomes already correlate, so no flip.
pub fn map_detector(d: DetectorId) -> (Basis, bool) {
    let flip = d.party() == Party::Bob;
    match d.polarization() {
        Polarization::H => (Basis::Rect, flip),
        Polarization::V => (Basis::Rect, !flip),
        Polarization::D => (Basis::Diag, false),
        Polarization::A => (Basis::Diag, true),
    }
}

/// One detection: arrival tick plus the detector that fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TagEvent {
    pub tick: TimeTick,
    pub detector: DetectorId,
}

#[derive(Debug, Error)]
pub enum TimeTagError {
    #[error("events are not sorted by tick at index {0}")]
    Unsorted(usize),
    #[error("detector {detector:?} does not belong to {party}")]
    WrongParty { detector: DetectorId, party: Party },
    #[error("tick {0} cannot be encoded in the tag file format (negative)")]
    NegativeTick(TimeTick),
    #[error("tick value {0} out of range")]
    TickRange(u64),
    #[error("bad magic in tag file")]
    BadMagic,
    #[error("bad party byte {0} in tag file")]
    BadParty(u8),
    #[error("bad detector code {0} in tag file")]
    BadDetector(u8),
    #[error("truncated record in tag file")]
    Truncated,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Ordered detections for one party.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagStream {
    party: Party,
    events: Vec<TagEvent>,
}

impl TagStream {
    /// Build from events already sorted ascending by tick.
    pub fn new(party: Party, events: Vec<TagEvent>) -> Result<Self, TimeTagError> {
        for (i, w) in events.windows(2).enumerate() {
            if w[1].tick < w[0].tick {
                return Err(TimeTagError::Unsorted(i + 1));
            }
        }
        for ev in &events {
            if ev.detector.party() != party {
                return Err(TimeTagError::WrongParty {
                    detector: ev.detector,
                    party,
                });
            }
        }
        Ok(TagStream { party, events })
    }

    /// Build from events in any order; sorts by (tick, detector).
    pub fn from_unsorted(party: Party, mut events: Vec<TagEvent>) -> Result<Self, TimeTagError> {
        events.sort_by_key(|e| (e.tick, e.detector));
        TagStream::new(party, events)
    }

    pub fn party(&self) -> Party {
        self.party
    }

    pub fn events(&self) -> &[TagEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// All events shifted by a constant. Order is preserved.
    pub fn shifted(&self, delta: TimeTick) -> TagStream {
        TagStream {
            party: self.party,
            events: self
                .events
                .iter()
                .map(|e| TagEvent {
                    tick: e.tick + delta,
                    detector: e.detector,
                })
                .collect(),
        }
    }

    /// Events with tick in `[start, end)`, as a borrowed slice.
    pub fn slice_window(&self, start: TimeTick, end: TimeTick) -> &[TagEvent] {
        let lo = self.events.partition_point(|e| e.tick < start);
        let hi = self.events.partition_point(|e| e.tick < end);
        &self.events[lo..hi]
    }

    pub fn first_tick(&self) -> Option<TimeTick> {
        self.events.first().map(|e| e.tick)
    }

    pub fn last_tick(&self) -> Option<TimeTick> {
        self.events.last().map(|e| e.tick)
    }
}

/// Number of pairs `(a_i, b_j)` with `|a_i - (b_j + shift)| <= window`.
///
/// Set-cardinality semantics: one `b_j` may pair with several `a_i` and vice
/// versa. Two-pointer sweep, `O(|a| + |b| + pairs)`.
pub fn count_coincidences_shifted(
    a: &[TagEvent],
    b: &[TagEvent],
    shift: TimeTick,
    window: TimeTick,
) -> u64 {
    debug_assert!(window.ps() > 0, "coincidence window must be positive");
    let w = window.ps();
    let s = shift.ps();
    let mut lo = 0usize;
    let mut hi = 0usize;
    let mut count = 0u64;
    for ev in a {
        let t = ev.tick.ps();
        // b_j + s within [t - w, t + w]  <=>  b_j within [t - w - s, t + w - s]
        let lo_bound = t.saturating_sub(w).saturating_sub(s);
        let hi_bound = t.saturating_add(w).saturating_sub(s);
        while lo < b.len() && b[lo].tick.ps() < lo_bound {
            lo += 1;
        }
        if hi < lo {
            hi = lo;
        }
        while hi < b.len() && b[hi].tick.ps() <= hi_bound {
            hi += 1;
        }
        count += (hi - lo) as u64;
    }
    count
}

/// [`count_coincidences_shifted`] with zero shift.
pub fn count_coincidences(a: &TagStream, b: &TagStream, window: TimeTick) -> u64 {
    count_coincidences_shifted(a.events(), b.events(), TimeTick::ZERO, window)
}

/// Coincidence counts for every delay applied to `b`. Evaluated as an
/// order-preserving (optionally parallel) map over the delay grid.
pub fn coincidence_histogram(
    a: &TagStream,
    b: &TagStream,
    delays: &[TimeTick],
    window: TimeTick,
) -> Vec<(TimeTick, u64)> {
    let counts = par::map_slice(delays, |&d| {
        count_coincidences_shifted(a.events(), b.events(), d, window)
    });
    delays.iter().copied().zip(counts).collect()
}

/// Sequential reference for [`coincidence_histogram`]; used by the benches.
pub fn coincidence_histogram_seq(
    a: &TagStream,
    b: &TagStream,
    delays: &[TimeTick],
    window: TimeTick,
) -> Vec<(TimeTick, u64)> {
    let counts = par::map_slice_seq(delays, |&d| {
        count_coincidences_shifted(a.events(), b.events(), d, window)
    });
    delays.iter().copied().zip(counts).collect()
}

/// Inclusive delay grid `start, start+step, ..., <=end`.
pub fn delay_grid(start: TimeTick, end: TimeTick, step: TimeTick) -> Vec<TimeTick> {
    assert!(step.ps() > 0, "delay step must be positive");
    let mut out = Vec::new();
    let mut v = start.ps();
    while v <= end.ps() {
        out.push(TimeTick::from_ps(v));
        v += step.ps();
    }
    out
}

const QTT_MAGIC: &[u8; 4] = b"QTT1";

/// Write a stream in the binary tag-file format: magic `QTT1`, one party
/// byte (0 Alice, 1 Bob), then little-endian `(u64 tick_ps, u8 detector)`
/// records.
pub fn write_qtt<W: Write>(stream: &TagStream, mut w: W) -> Result<(), TimeTagError> {
    w.write_all(QTT_MAGIC)?;
    w.write_all(&[match stream.party() {
        Party::Alice => 0u8,
        Party::Bob => 1u8,
    }])?;
    for ev in stream.events() {
        let tick = u64::try_from(ev.tick.ps()).map_err(|_| TimeTagError::NegativeTick(ev.tick))?;
        w.write_all(&tick.to_le_bytes())?;
        w.write_all(&[ev.detector.code()])?;
    }
    Ok(())
}

/// Read a stream written by [`write_qtt`].
pub fn read_qtt<R: Read>(mut r: R) -> Result<TagStream, TimeTagError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != QTT_MAGIC {
        return Err(TimeTagError::BadMagic);
    }
    let mut party_byte = [0u8; 1];
    r.read_exact(&mut party_byte)?;
    let party = match party_byte[0] {
        0 => Party::Alice,
        1 => Party::Bob,
        b => return Err(TimeTagError::BadParty(b)),
    };
    let mut events = Vec::new();
    let mut rec = [0u8; 9];
    loop {
        let mut filled = 0;
        while filled < rec.len() {
            let n = r.read(&mut rec[filled..])?;
            if n == 0 {
                break;
            }
            filled += n;
        }
        if filled == 0 {
            break;
        }
        if filled < rec.len() {
            return Err(TimeTagError::Truncated);
        }
        let raw = u64::from_le_bytes(rec[..8].try_into().unwrap());
        let tick = i64::try_from(raw).map_err(|_| TimeTagError::TickRange(raw))?;
        let detector = DetectorId::from_code(rec[8]).ok_or(TimeTagError::BadDetector(rec[8]))?;
        events.push(TagEvent {
            tick: TimeTick::from_ps(tick),
            detector,
        });
    }
    TagStream::new(party, events)
}
