//! Whole-system configuration: one struct both parties must agree on,
//! serialized as human-readable TOML and digest-compared at handshake.

use crate::primitives::lwe::LweParams;
use crate::sourcesim::SourceConfig;
use crate::sync::SyncParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config serialize error: {0}")]
    Serialize(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub source: SourceConfig,
    pub sync: SyncParams,
    pub lwe: LweParams,
    /// Coincidence window for time filtering, picoseconds.
    pub sift_window_ps: i64,
    /// AES key bits drawn per reservation.
    pub n_aes_bits: usize,
    /// Upper bound on key-derivation sessions per cycle.
    pub max_sessions_per_cycle: usize,
    /// Pool bits held back for authentication once the PSK auth partition
    /// runs dry.
    pub mac_reserve_bits: usize,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            source: SourceConfig::default(),
            sync: SyncParams::default(),
            lwe: LweParams::desk(),
            sift_window_ps: 1_000,
            n_aes_bits: 256,
            max_sessions_per_cycle: 8,
            mac_reserve_bits: 512,
        }
    }
}

impl SystemConfig {
    /// Full-scale source settings behind the desk-scale default.
    pub fn paper_scale(mut self) -> Self {
        self.source = self.source.paper_scale();
        self
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string_pretty(self).map_err(|e| ConfigError::Serialize(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<SystemConfig, ConfigError> {
        toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Digest compared during the handshake; any parameter difference
    /// aborts the cycle before key material is consumed.
    pub fn digest(&self) -> [u8; 32] {
        let canon = self.to_toml().expect("config serializes");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        h.finalize().into()
    }
}
