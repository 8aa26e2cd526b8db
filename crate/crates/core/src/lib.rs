//! Two-party key establishment over simulated entangled photon pairs, with
//! obfuscated hybrid data encryption.
//!
//! The crate is organized around the pipeline a real deployment would run:
//!
//! - [`timetag`]: detection events, detector-to-bit mapping, coincidence
//!   counting kernels, and the binary tag-file format.
//! - [`sourcesim`]: statistical stand-in for the entangled photon source,
//!   free-space channels, and detectors. Produces correlated tag streams with
//!   configurable loss, visibility, jitter, background, clock offset and drift.
//! - [`sync`]: GPS-free clock recovery. A coarse cross-correlation scan on the
//!   first acquisition round, then per-round fine alignment that tracks drift.
//! - [`postproc`]: turns aligned streams into identical secret keys: time
//!   filtering, sifting, error-rate estimation, LDPC syndrome reconciliation,
//!   universal-hash authentication, Toeplitz privacy amplification, key rate.
//! - [`primitives`]: OTP, AES-256-CTR, LWE public-key encryption, and the
//!   consumable key ledgers that feed them.
//! - [`obfuscation`]: the encrypted instruction sequence. A public mapping
//!   table, a masked sequence identifier, and sequential multi-primitive
//!   encryption/decryption of data messages.
//! - [`protocol`]: two-party session orchestration over in-process or TCP
//!   transports, one full hybrid cycle, and the plain-QKD baseline mode.
//! - [`experiments`]: seed-deterministic experiment drivers (timing-error
//!   sweep, synchronization demo, overhead table) emitting delimited text.
//!
//! With the default `parallel` feature the shift scans, histograms, and
//! Monte-Carlo sweeps fan out over rayon; disabling it yields a fully
//! sequential build with identical outputs.

pub mod bits;
pub mod config;
pub mod experiments;
pub mod obfuscation;
pub mod par;
pub mod postproc;
pub mod primitives;
pub mod protocol;
pub mod sourcesim;
pub mod sync;
pub mod timetag;
