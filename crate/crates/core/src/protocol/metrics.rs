//! Per-codeblock wall-time accounting for one cycle.

use serde::{Deserialize, Serialize};
use std::time::Instant;

/// The measured pipeline stages, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Codeblock {
    SignalAccumulation,
    Synchronization,
    TimeTagFiltering,
    Sifting,
    QberEstimation,
    ErrorCorrection,
    PrivacyAmplification,
    Obfuscation,
    PqcKeyShare,
    MessageEncDec,
    ClassicalCommunications,
}

impl Codeblock {
    pub const ALL: [Codeblock; 11] = [
        Codeblock::SignalAccumulation,
        Codeblock::Synchronization,
        Codeblock::TimeTagFiltering,
        Codeblock::Sifting,
        Codeblock::QberEstimation,
        Codeblock::ErrorCorrection,
        Codeblock::PrivacyAmplification,
        Codeblock::Obfuscation,
        Codeblock::PqcKeyShare,
        Codeblock::MessageEncDec,
        Codeblock::ClassicalCommunications,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Codeblock::SignalAccumulation => "Signal Accumulation",
            Codeblock::Synchronization => "Synchronization",
            Codeblock::TimeTagFiltering => "Time Tag Filtering",
            Codeblock::Sifting => "Sifting",
            Codeblock::QberEstimation => "QBER Estimation",
            Codeblock::ErrorCorrection => "Error Correction",
            Codeblock::PrivacyAmplification => "Privacy Amplification",
            Codeblock::Obfuscation => "Obfuscation",
            Codeblock::PqcKeyShare => "PQC Key Share",
            Codeblock::MessageEncDec => "Message Enc-Dec",
            Codeblock::ClassicalCommunications => "Classical Communications",
        }
    }
}

/// Seconds spent per codeblock over one cycle, plus the cycle total.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CycleMetrics {
    seconds: [f64; 11],
    pub total_seconds: f64,
}

impl CycleMetrics {
    pub fn new() -> CycleMetrics {
        CycleMetrics::default()
    }

    pub fn add(&mut self, block: Codeblock, seconds: f64) {
        self.seconds[block as usize] += seconds;
    }

    pub fn get(&self, block: Codeblock) -> f64 {
        self.seconds[block as usize]
    }

    pub fn rows(&self) -> impl Iterator<Item = (Codeblock, f64)> + '_ {
        Codeblock::ALL.iter().map(|&b| (b, self.get(b)))
    }
}

/// Lap timer for attributing spans to codeblocks.
pub struct Stopwatch(Instant);

impl Stopwatch {
    pub fn start() -> Stopwatch {
        Stopwatch(Instant::now())
    }

    /// Seconds since start or the previous lap.
    pub fn lap(&mut self) -> f64 {
        let now = Instant::now();
        let dt = now.duration_since(self.0).as_secs_f64();
        self.0 = now;
        dt
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_cover_all_codeblocks_in_order() {
        let mut m = CycleMetrics::new();
        m.add(Codeblock::Sifting, 0.5);
        m.add(Codeblock::Sifting, 0.25);
        let rows: Vec<_> = m.rows().collect();
        assert_eq!(rows.len(), 11);
        assert_eq!(rows[0].0.label(), "Signal Accumulation");
        assert_eq!(rows[10].0.label(), "Classical Communications");
        assert_eq!(m.get(Codeblock::Sifting), 0.75);
    }
}
