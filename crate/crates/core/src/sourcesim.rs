//! Statistical stand-in for the entangled photon source, channels, and
//! detectors.
//!
//! Pair births follow a homogeneous Poisson process. Each photon of a pair
//! independently survives its arm (channel loss times detector efficiency),
//! picks a measurement basis uniformly (passive analyzer), and lands on the
//! detector implied by its basis and outcome bit. Matching-basis outcome bits
//! agree with probability `(1 + V) / 2`; mismatched bases are uncorrelated.
//! Pair emission is instantaneous: signal and idler are born on the same
//! tick, and all timing spread comes from per-detection Gaussian jitter.
//! Background counts are independent per-detector Poisson processes with
//! uniform timestamps. Bob's clock is then distorted by
//! `t -> t + offset + drift * t`.
//!
//! All randomness comes from ChaCha8 keyed by the config seed, with a fixed
//! substream per purpose (pair process, one per detector for background), so
//! output is reproducible for a given seed regardless of the `parallel`
//! feature.

use crate::par;
use crate::timetag::{Basis, DetectorId, Party, TagEvent, TagStream, TimeTick, PS_PER_S};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("invalid source config: {0}")]
    InvalidConfig(String),
}

/// Knobs for one simulated acquisition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    /// Entangled pair production rate, pairs per second.
    pub pair_rate: f64,
    /// Acquisition length in seconds.
    pub duration: f64,
    /// Two-photon interference visibility, in [0, 1].
    pub visibility: f64,
    /// Channel loss per arm in dB; applied to both arms unless overridden.
    pub channel_loss_db: f64,
    /// Per-arm overrides for asymmetric links.
    pub alice_loss_db: Option<f64>,
    pub bob_loss_db: Option<f64>,
    /// Detector quantum efficiency, in [0, 1].
    pub detector_efficiency: f64,
    /// Background counts per second per detector.
    pub background_rate: f64,
    /// Gaussian timing jitter sigma per detection, picoseconds.
    pub jitter_sigma_ps: i64,
    /// Constant clock offset injected into Bob's tags, picoseconds.
    pub clock_offset_ps: i64,
    /// Clock drift injected into Bob's tags, picoseconds per picosecond.
    pub drift_rate: f64,
    /// PRNG seed; fixes the full output.
    pub seed: u64,
}

impl Default for SourceConfig {
    /// Desk-scale operating point: source parameters as measured on the
    /// bench (10^4 pairs/s, visibility 0.873, 65% detectors, 100/s
    /// background), with lossless channels and a 2 s acquisition so a run
    /// yields roughly 8k coincident pairs.
    fn default() -> Self {
        SourceConfig {
            pair_rate: 10_000.0,
            duration: 2.0,
            visibility: 0.873,
            channel_loss_db: 0.0,
            alice_loss_db: None,
            bob_loss_db: None,
            detector_efficiency: 0.65,
            background_rate: 100.0,
            jitter_sigma_ps: 350,
            clock_offset_ps: 0,
            drift_rate: 0.0,
            seed: 1,
        }
    }
}

impl SourceConfig {
    /// Full-scale operating point: 10.3 dB per arm, 200 s accumulation.
    pub fn paper_scale(mut self) -> Self {
        self.channel_loss_db = 10.3;
        self.duration = 200.0;
        self
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        let bad = |m: &str| Err(SourceError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.visibility) {
            return bad("visibility must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.detector_efficiency) {
            return bad("detector_efficiency must lie in [0, 1]");
        }
        if !(self.pair_rate >= 0.0) || !self.pair_rate.is_finite() {
            return bad("pair_rate must be finite and non-negative");
        }
        if !(self.background_rate >= 0.0) || !self.background_rate.is_finite() {
            return bad("background_rate must be finite and non-negative");
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return bad("duration must be positive");
        }
        if self.channel_loss_db < 0.0
            || self.alice_loss_db.is_some_and(|l| l < 0.0)
            || self.bob_loss_db.is_some_and(|l| l < 0.0)
        {
            return bad("channel loss must be non-negative");
        }
        if self.jitter_sigma_ps < 0 {
            return bad("jitter_sigma_ps must be non-negative");
        }
        if !self.drift_rate.is_finite() {
            return bad("drift_rate must be finite");
        }
        Ok(())
    }

    fn arm_survival(&self, party: Party) -> f64 {
        let loss_db = match party {
            Party::Alice => self.alice_loss_db.unwrap_or(self.channel_loss_db),
            Party::Bob => self.bob_loss_db.unwrap_or(self.channel_loss_db),
        };
        10f64.powf(-loss_db / 10.0) * self.detector_efficiency
    }

    /// Expected one-to-one coincidence rate before jitter and windowing.
    pub fn expected_pair_detection_rate(&self) -> f64 {
        self.pair_rate * self.arm_survival(Party::Alice) * self.arm_survival(Party::Bob)
    }

    pub fn duration_ticks(&self) -> TimeTick {
        TimeTick::from_ps((self.duration * PS_PER_S as f64).round() as i64)
    }
}

/// Intrinsic matching-basis error probability implied by visibility alone,
/// before accidental coincidences: `(1 - v) / 2`.
pub fn qber_from_visibility(v: f64) -> f64 {
    assert!((0.0..=1.0).contains(&v), "visibility out of range");
    (1.0 - v) / 2.0
}

/// A pair for which both photons were detected: Alice's recorded tick and
/// Bob's tick before the clock transform.
#[derive(Debug, Clone, Copy)]
pub struct TruePair {
    pub alice_tick: TimeTick,
    pub bob_tick_raw: TimeTick,
}

/// What the simulator knows and the parties do not.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub clock_offset: TimeTick,
    pub drift_rate: f64,
    /// Pair births over the run.
    pub pairs_born: u64,
    pub alice_pair_detections: u64,
    pub bob_pair_detections: u64,
    /// Pairs detected on both sides, in birth order.
    pub coincident_pairs: Vec<TruePair>,
}

impl GroundTruth {
    /// Offset of Bob's clock relative to Alice's at true time `t`.
    pub fn offset_at(&self, t: TimeTick) -> TimeTick {
        TimeTick::from_ps(
            self.clock_offset.ps() + (self.drift_rate * t.ps() as f64).round() as i64,
        )
    }
}

/// Bob's recorded timestamp for a detection at true tick `t`.
fn bob_clock(t: i64, offset_ps: i64, drift: f64) -> i64 {
    t + offset_ps + (drift * t as f64).round() as i64
}

const PAIR_STREAM: u64 = 0;
const DETECTOR_STREAM_BASE: u64 = 1;

/// Produce one correlated acquisition.
pub fn generate(config: &SourceConfig) -> Result<(TagStream, TagStream, GroundTruth), SourceError> {
    config.validate()?;

    let duration_ps = config.duration * PS_PER_S as f64;
    let p_alice = config.arm_survival(Party::Alice);
    let p_bob = config.arm_survival(Party::Bob);
    let agree = (1.0 + config.visibility) / 2.0;
    let sigma = config.jitter_sigma_ps as f64;
    let jitter = if sigma > 0.0 {
        Some(Normal::new(0.0, sigma).expect("sigma validated"))
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(PAIR_STREAM);

    let mut alice_events = Vec::new();
    let mut bob_events = Vec::new();
    let mut truth = GroundTruth {
        clock_offset: TimeTick::from_ps(config.clock_offset_ps),
        drift_rate: config.drift_rate,
        pairs_born: 0,
        alice_pair_detections: 0,
        bob_pair_detections: 0,
        coincident_pairs: Vec::new(),
    };

    if config.pair_rate > 0.0 {
        let gap = Exp::new(config.pair_rate / PS_PER_S as f64).expect("rate validated");
        let mut birth = gap.sample(&mut rng);
        while birth < duration_ps {
            truth.pairs_born += 1;
            let birth_tick = birth.round() as i64;

            let alice_hit = rng.gen_bool(p_alice);
            let bob_hit = rng.gen_bool(p_bob);

            let mut alice_tick = None;
            if alice_hit {
                let basis = if rng.gen_bool(0.5) { Basis::Rect } else { Basis::Diag };
                let bit = rng.gen_bool(0.5);
                let mut t = birth_tick;
                if let Some(j) = jitter {
                    t += j.sample(&mut rng).round() as i64;
                }
                alice_events.push(TagEvent {
                    tick: TimeTick::from_ps(t),
                    detector: DetectorId::from_mapping(Party::Alice, basis, bit),
                });
                truth.alice_pair_detections += 1;
                alice_tick = Some((TimeTick::from_ps(t), basis, bit));
            }
            if bob_hit {
                let basis = if rng.gen_bool(0.5) { Basis::Rect } else { Basis::Diag };
                // Conditioned on Alice's result only when both photons were
                // measured in the same basis; every other case is uniform.
                let bit = match alice_tick {
                    Some((_, a_basis, a_bit)) if a_basis == basis => {
                        if rng.gen_bool(agree) {
                            a_bit
                        } else {
                            !a_bit
                        }
                    }
                    _ => rng.gen_bool(0.5),
                };
                let mut t = birth_tick;
                if let Some(j) = jitter {
                    t += j.sample(&mut rng).round() as i64;
                }
                bob_events.push(TagEvent {
                    tick: TimeTick::from_ps(t),
                    detector: DetectorId::from_mapping(Party::Bob, basis, bit),
                });
                truth.bob_pair_detections += 1;
                if let Some((a_tick, _, _)) = alice_tick {
                    truth.coincident_pairs.push(TruePair {
                        alice_tick: a_tick,
                        bob_tick_raw: TimeTick::from_ps(t),
                    });
                }
            }

            birth += gap.sample(&mut rng);
        }
    }

    // Background: independent per-detector Poisson processes, one PRNG
    // substream each so the per-detector map can fan out without touching
    // the output.
    let background: Vec<Vec<TagEvent>> = par::map_slice(&DetectorId::ALL, |&det| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DETECTOR_STREAM_BASE + det.code() as u64);
        let mean = config.background_rate * config.duration;
        if mean <= 0.0 {
            return Vec::new();
        }
        let n = Poisson::new(mean).expect("mean positive").sample(&mut rng) as u64;
        (0..n)
            .map(|_| TagEvent {
                tick: TimeTick::from_ps(rng.gen_range(0.0..duration_ps) as i64),
                detector: det,
            })
            .collect()
    });
    for events in background {
        for ev in events {
            match ev.detector.party() {
                Party::Alice => alice_events.push(ev),
                Party::Bob => bob_events.push(ev),
            }
        }
    }

    // Bob's tags pass through his skewed clock; Alice's are the reference.
    for ev in &mut bob_events {
        ev.tick = TimeTick::from_ps(bob_clock(
            ev.tick.ps(),
            config.clock_offset_ps,
            config.drift_rate,
        ));
    }

    let alice = TagStream::from_unsorted(Party::Alice, alice_events)
        .expect("generated events belong to alice");
    let bob =
        TagStream::from_unsorted(Party::Bob, bob_events).expect("generated events belong to bob");
    Ok((alice, bob, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timetag::map_detector;
    use std::collections::BTreeMap;

    fn lossless_quiet(seed: u64) -> SourceConfig {
        SourceConfig {
            pair_rate: 5_000.0,
            duration: 1.0,
            visibility: 1.0,
            channel_loss_db: 0.0,
            detector_efficiency: 1.0,
            background_rate: 0.0,
            jitter_sigma_ps: 0,
            clock_offset_ps: 0,
            drift_rate: 0.0,
            seed,
            ..SourceConfig::default()
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let cfg = SourceConfig::default();
        let (a1, b1, t1) = generate(&cfg).unwrap();
        let (a2, b2, t2) = generate(&cfg).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(t1.pairs_born, t2.pairs_born);
        let (a3, _, _) = generate(&SourceConfig {
            seed: cfg.seed + 1,
            ..cfg
        })
        .unwrap();
        assert_ne!(a1, a3);
    }

    #[test]
    fn perfect_source_has_zero_matching_basis_errors() {
        let (alice, bob, truth) = generate(&lossless_quiet(11)).unwrap();
        assert_eq!(alice.len(), bob.len());
        assert_eq!(truth.coincident_pairs.len(), alice.len());

        // No jitter, no offset: pair partners share a tick exactly.
        let bob_by_tick: BTreeMap<i64, DetectorId> = bob
            .events()
            .iter()
            .map(|e| (e.tick.ps(), e.detector))
            .collect();
        let mut matching = 0;
        for ev in alice.events() {
            let bd = bob_by_tick[&ev.tick.ps()];
            let (a_basis, a_bit) = map_detector(ev.detector);
            let (b_basis, b_bit) = map_detector(bd);
            if a_basis == b_basis {
                matching += 1;
                assert_eq!(a_bit, b_bit, "matching-basis bits must agree at V=1");
            }
        }
        assert!(matching > alice.len() / 3);
    }

    #[test]
    fn qber_from_visibility_examples() {
        assert_eq!(qber_from_visibility(1.0), 0.0);
        assert_eq!(qber_from_visibility(0.0), 0.5);
        assert!((qber_from_visibility(0.873) - 0.0635).abs() < 1e-12);
    }

    #[test]
    fn visibility_error_rate_matches_prediction() {
        let mut cfg = lossless_quiet(5);
        cfg.visibility = 0.873;
        cfg.pair_rate = 20_000.0;
        let (alice, bob, _) = generate(&cfg).unwrap();
        let bob_by_tick: BTreeMap<i64, DetectorId> = bob
            .events()
            .iter()
            .map(|e| (e.tick.ps(), e.detector))
            .collect();
        let mut matching = 0u64;
        let mut errors = 0u64;
        for ev in alice.events() {
            let bd = bob_by_tick[&ev.tick.ps()];
            let (a_basis, a_bit) = map_detector(ev.detector);
            let (b_basis, b_bit) = map_detector(bd);
            if a_basis == b_basis {
                matching += 1;
                if a_bit != b_bit {
                    errors += 1;
                }
            }
        }
        let qber = errors as f64 / matching as f64;
        let expected = qber_from_visibility(0.873);
        let sigma = (expected * (1.0 - expected) / matching as f64).sqrt();
        assert!(
            (qber - expected).abs() < 5.0 * sigma,
            "qber {qber} expected {expected} (5 sigma {})",
            5.0 * sigma
        );
    }

    #[test]
    fn per_detector_counts_track_poisson_expectation() {
        // Pool counts over 10 seeds and compare each detector against its
        // expected rate within 5 sigma.
        let mut counts: BTreeMap<DetectorId, u64> = BTreeMap::new();
        let mut cfg = SourceConfig::default();
        cfg.duration = 0.5;
        for seed in 0..10 {
            cfg.seed = 100 + seed;
            let (alice, bob, _) = generate(&cfg).unwrap();
            for ev in alice.events().iter().chain(bob.events()) {
                *counts.entry(ev.detector).or_default() += 1;
            }
        }
        let runs = 10.0;
        let p_arm = 10f64.powf(-cfg.channel_loss_db / 10.0) * cfg.detector_efficiency;
        let expected_per_det =
            runs * cfg.duration * (cfg.pair_rate * p_arm / 4.0 + cfg.background_rate);
        for det in DetectorId::ALL {
            let n = counts[&det] as f64;
            let sigma = expected_per_det.sqrt();
            assert!(
                (n - expected_per_det).abs() < 5.0 * sigma,
                "{det:?}: {n} vs {expected_per_det} (sigma {sigma})"
            );
        }
    }

    #[test]
    fn pair_deltas_have_sqrt2_jitter_spread() {
        let mut cfg = lossless_quiet(42);
        cfg.jitter_sigma_ps = 400;
        cfg.pair_rate = 20_000.0;
        let (_, _, truth) = generate(&cfg).unwrap();
        let deltas: Vec<f64> = truth
            .coincident_pairs
            .iter()
            .map(|p| (p.bob_tick_raw - p.alice_tick).ps() as f64)
            .collect();
        let n = deltas.len() as f64;
        assert!(n > 5_000.0);
        let mean = deltas.iter().sum::<f64>() / n;
        let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        let expected = 2f64.sqrt() * 400.0;
        assert!(mean.abs() < 5.0 * expected / n.sqrt(), "mean {mean}");
        assert!(
            (var.sqrt() - expected).abs() < 0.05 * expected,
            "std {} expected {expected}",
            var.sqrt()
        );
    }

    #[test]
    fn clock_transform_applied_to_bob() {
        let mut cfg = lossless_quiet(17);
        cfg.clock_offset_ps = 10_000; // 10 ns
        cfg.drift_rate = 4e-9; // 1 ns per 250 ms
        let (_, bob, truth) = generate(&cfg).unwrap();
        for pair in truth.coincident_pairs.iter().take(50) {
            let raw = pair.bob_tick_raw.ps();
            let expected = raw + 10_000 + (4e-9 * raw as f64).round() as i64;
            assert!(bob
                .events()
                .iter()
                .any(|e| e.tick.ps() == expected));
        }
        // Offset query helper agrees at t = 250 ms.
        let t = TimeTick::from_ms(250);
        assert_eq!(truth.offset_at(t).ps(), 10_000 + 1_000);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SourceConfig::default();
        cfg.visibility = 1.2;
        assert!(generate(&cfg).is_err());
        let mut cfg = SourceConfig::default();
        cfg.duration = 0.0;
        assert!(generate(&cfg).is_err());
        let mut cfg = SourceConfig::default();
        cfg.channel_loss_db = -3.0;
        assert!(generate(&cfg).is_err());
    }
}
