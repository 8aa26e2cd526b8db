//! Two-party session orchestration.
//!
//! One cycle runs handshake, sequence derivation, key derivation (as many
//! acquisition sessions as the pending message demands, bounded by the
//! config cap), auxiliary key setup, and data transfer. Bob is the data
//! sender and drives; Alice is the receiver. Each party is one sequential
//! state machine; the two run concurrently and share nothing but the
//! transport.
//!
//! The simulated source stands in for the shared entangled-photon hardware:
//! both parties derive the identical acquisition from the shared config
//! seed and keep only their own detector stream. Everything that crosses
//! the wire is framed, disposition-tagged, and recorded in a transcript.

pub mod metrics;
pub mod transport;
pub mod wire;

use crate::bits::{pack_bits, unpack_bits};
use crate::config::SystemConfig;
use crate::obfuscation::{
    decode_is, derive_is, otp_demand_bits, seq_decrypt, seq_encrypt, EncryptedIdentifier,
    InstructionSequence, MappingTable, Primitive, SeqDecKeys, SeqEncKeys,
};
use crate::postproc::ldpc::{block_digest, pad_blocks, reconcile_key_blocks, LdpcCode};
use crate::postproc::toeplitz::{privacy_amplify, PaSeed};
use crate::postproc::wcmac::{wc_mac_tag, wc_mac_verify, MacKey, MacTag};
use crate::postproc::{key_rate, sample_positions, strip_positions};
use crate::primitives::lwe::{pq_keygen, LweParams, LwePublicKey, LweSecretKey};
use crate::primitives::{AesKey, CryptoError, NonceLedger, Partition, PskLedger, QkdKeyPool};
use crate::sourcesim::generate;
use crate::sync::run_sync;
use crate::timetag::{map_detector, Basis, Party, TagEvent, TagStream, TimeTick};

use metrics::{Codeblock, CycleMetrics, Stopwatch};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transport::Transport;
use wire::{
    bytes_to_ticks, ticks_to_bytes, AbortReason, Disposition, MessageType, ProtocolError,
    WireMessage, PROTOCOL_VERSION,
};

/// Cycle phases in execution order. Baseline mode skips `Obfuscation` and
/// `AuxKeys`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Handshake,
    Obfuscation,
    QkdDerivation,
    AuxKeys,
    DataTransfer,
    Done,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Hybrid,
    Baseline,
}

impl Mode {
    fn as_byte(self) -> u8 {
        match self {
            Mode::Hybrid => 0,
            Mode::Baseline => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Mode> {
        match b {
            0 => Some(Mode::Hybrid),
            1 => Some(Mode::Baseline),
            _ => None,
        }
    }
}

/// Deliberate misbehavior for negative-path tests.
#[derive(Debug, Clone, Default)]
pub struct FaultPlan {
    /// Skip the auxiliary-key phase even when the sequence needs it.
    pub skip_aux_keys: bool,
    /// Burn this many mask bits before the cycle (cursor desync).
    pub burn_pi_bits: usize,
    /// Flip one bit of the masked identifier on the wire (sender side).
    pub tamper_pi_bit: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

/// One classical message as it appeared on the wire.
#[derive(Debug, Clone)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub msg_type: MessageType,
    pub disposition: Disposition,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    /// Concatenated frame bytes, for byte-scan audits and determinism
    /// comparisons.
    pub fn wire_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.extend(WireMessage::new(e.msg_type, e.body.clone()).encode());
        }
        out
    }
}

/// Plaintext views of the secrecy-critical payloads of a cycle, retained
/// for the transcript-encryption audit.
#[derive(Debug, Clone, Default)]
pub struct AuditArtifacts {
    pub identifier_bits: Vec<u8>,
    pub is_canonical: String,
    pub alice_tick_payloads: Vec<Vec<u8>>,
    pub bob_tick_payloads: Vec<Vec<u8>>,
    pub bases_payloads: Vec<Vec<u8>>,
    pub syndrome_payloads: Vec<Vec<u8>>,
    pub data_body: Vec<u8>,
}

/// One key-derivation session's outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionStats {
    /// Disclosed-subset error-rate estimate.
    pub q: f64,
    /// Reconciled bits entering privacy amplification.
    pub n_reconciled: usize,
    /// Secret bits appended to the pool.
    pub grown: usize,
}

/// What one party got out of a completed cycle.
#[derive(Debug, Clone)]
pub struct CycleReport {
    /// The decrypted message (receiver side only).
    pub delivered: Option<Vec<u8>>,
    pub metrics: CycleMetrics,
    /// Mean error-rate estimate over the cycle's key sessions.
    pub qber: Option<f64>,
    /// Secret bits grown into the pool this cycle.
    pub key_bits_grown: usize,
    /// Secret-key throughput over the stamped accumulation time.
    pub skr: f64,
    pub sessions: usize,
    pub session_stats: Vec<SessionStats>,
    pub artifacts: AuditArtifacts,
}

/// Per-party protocol state surviving across cycles.
pub struct Session {
    pub role: Party,
    pub mode: Mode,
    pub phase: Phase,
    pub config: SystemConfig,
    pub table: MappingTable,
    pub ledger: PskLedger,
    pub pool: QkdKeyPool,
    pub cycle_index: u32,
    pub fault: FaultPlan,
    /// Pin the sender's sequence choice; `None` draws uniformly from the
    /// table. Ignored on the receiver side.
    pub is_choice: Option<Vec<u8>>,
    code: &'static LdpcCode,
    session_nonces: NonceLedger,
    data_nonces: NonceLedger,
    sessions_run: u64,
    rng: ChaCha8Rng,
    /// Separate stream for draws on the key-derivation path (estimation
    /// nonce, amplification seed) so the QKD trajectory is identical across
    /// modes for one seed; `rng` feeds nonces and filler, which only the
    /// hybrid transcript consumes.
    qkd_rng: ChaCha8Rng,
    transcript: Transcript,
    session_aes: Option<AesKey>,
    comm_seconds: f64,
}

const RNG_STREAM_BASE: u64 = 64;

impl Session {
    pub fn new(
        role: Party,
        mode: Mode,
        config: SystemConfig,
        table: MappingTable,
        ledger: PskLedger,
    ) -> Session {
        let role_idx = match role {
            Party::Alice => 0,
            Party::Bob => 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.source.seed);
        rng.set_stream(RNG_STREAM_BASE + role_idx);
        let mut qkd_rng = ChaCha8Rng::seed_from_u64(config.source.seed);
        qkd_rng.set_stream(RNG_STREAM_BASE + 2 + role_idx);
        Session {
            role,
            mode,
            phase: Phase::Handshake,
            config,
            table,
            ledger,
            pool: QkdKeyPool::new(),
            cycle_index: 0,
            fault: FaultPlan::default(),
            is_choice: None,
            code: LdpcCode::shipped_4096(),
            session_nonces: NonceLedger::new(),
            data_nonces: NonceLedger::new(),
            sessions_run: 0,
            rng,
            qkd_rng,
            transcript: Transcript::default(),
            session_aes: None,
            comm_seconds: 0.0,
        }
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    /// Run one full cycle as the data sender.
    pub fn run_cycle_bob(
        &mut self,
        t: &mut dyn Transport,
        message: &[u8],
    ) -> Result<CycleReport, ProtocolError> {
        assert_eq!(self.role, Party::Bob, "sender cycle requires the Bob role");
        let pool_mark = self.pool.len_bits();
        let result = self.bob_cycle_inner(t, message);
        self.finish_cycle(result, pool_mark)
    }

    /// Run one full cycle as the data receiver.
    pub fn run_cycle_alice(&mut self, t: &mut dyn Transport) -> Result<CycleReport, ProtocolError> {
        assert_eq!(self.role, Party::Alice, "receiver cycle requires the Alice role");
        let pool_mark = self.pool.len_bits();
        let result = self.alice_cycle_inner(t);
        self.finish_cycle(result, pool_mark)
    }

    fn finish_cycle(
        &mut self,
        result: Result<CycleReport, ProtocolError>,
        pool_mark: usize,
    ) -> Result<CycleReport, ProtocolError> {
        match result {
            Ok(report) => {
                self.phase = Phase::Done;
                self.cycle_index += 1;
                Ok(report)
            }
            Err(e) => {
                // Key material grown in an aborted cycle is quarantined,
                // never returned to the pool.
                self.pool.quarantine_after(pool_mark.max(self.pool.consumed()));
                self.phase = Phase::Aborted;
                Err(e)
            }
        }
    }

    fn enter(&mut self, next: Phase) {
        debug_assert!(
            next > self.phase || (next == Phase::Handshake && self.phase != Phase::Handshake),
            "phase order violated: {:?} -> {next:?}",
            self.phase
        );
        self.phase = next;
    }

    // ----- framed, disposition-aware channel helpers -----

    fn disposition_for(&self, msg_type: MessageType) -> Disposition {
        use MessageType::*;
        match (self.mode, msg_type) {
            (Mode::Hybrid, Tags | Bases | QberSample | Syndrome | PaSeed) => Disposition::Aes,
            (Mode::Baseline, Data) => Disposition::Otp,
            _ => Disposition::Cleartext,
        }
    }

    fn send(
        &mut self,
        t: &mut dyn Transport,
        msg_type: MessageType,
        plaintext: &[u8],
    ) -> Result<(), ProtocolError> {
        let disposition = self.disposition_for(msg_type);
        let body = match disposition {
            Disposition::Cleartext => plaintext.to_vec(),
            Disposition::Aes => {
                let key = self
                    .session_aes
                    .ok_or_else(|| CryptoError::KeyExhausted("session AES key unset".into()))?;
                let mut nonce = [0u8; 16];
                self.rng.fill_bytes(&mut nonce);
                let ct = crate::primitives::aes_encrypt(
                    plaintext,
                    &key,
                    &nonce,
                    &mut self.session_nonces,
                )?;
                let mut body = nonce.to_vec();
                body.extend(ct);
                body
            }
            Disposition::Otp => crate::primitives::otp_encrypt(plaintext, &mut self.pool)?,
        };
        let msg = WireMessage::new(msg_type, body.clone());
        self.transcript.entries.push(TranscriptEntry {
            direction: Direction::Sent,
            msg_type,
            disposition,
            body,
        });
        let mut sw = Stopwatch::start();
        let r = t.send(&msg);
        self.comm_seconds += sw.lap();
        r
    }

    fn recv_expect(
        &mut self,
        t: &mut dyn Transport,
        expected: MessageType,
    ) -> Result<Vec<u8>, ProtocolError> {
        let mut sw = Stopwatch::start();
        let msg = t.recv()?;
        self.comm_seconds += sw.lap();
        let disposition = self.disposition_for(msg.msg_type);
        self.transcript.entries.push(TranscriptEntry {
            direction: Direction::Received,
            msg_type: msg.msg_type,
            disposition,
            body: msg.body.clone(),
        });
        if msg.msg_type == MessageType::Abort {
            let reason = msg
                .body
                .first()
                .and_then(|&b| AbortReason::from_byte(b))
                .unwrap_or(AbortReason::PeerAbort);
            let detail = String::from_utf8_lossy(msg.body.get(1..).unwrap_or(&[])).into_owned();
            return Err(ProtocolError::Aborted {
                by_peer: true,
                reason,
                detail,
            });
        }
        if msg.msg_type != expected {
            return Err(ProtocolError::UnexpectedType {
                expected: expected.name(),
                got: msg.msg_type.name(),
            });
        }
        match disposition {
            Disposition::Cleartext => Ok(msg.body),
            Disposition::Aes => {
                let key = self
                    .session_aes
                    .ok_or_else(|| CryptoError::KeyExhausted("session AES key unset".into()))?;
                if msg.body.len() < 16 {
                    return Err(ProtocolError::Framing("aes body shorter than nonce".into()));
                }
                let nonce: [u8; 16] = msg.body[..16].try_into().unwrap();
                Ok(crate::primitives::aes_decrypt(&msg.body[16..], &key, &nonce))
            }
            Disposition::Otp => Ok(crate::primitives::otp_decrypt(&msg.body, &mut self.pool)?),
        }
    }

    /// Send an abort frame (best effort) and produce the local error.
    fn abort(
        &mut self,
        t: &mut dyn Transport,
        reason: AbortReason,
        detail: impl Into<String>,
    ) -> ProtocolError {
        let detail = detail.into();
        let mut body = vec![reason as u8];
        body.extend(detail.as_bytes());
        let msg = WireMessage::new(MessageType::Abort, body.clone());
        self.transcript.entries.push(TranscriptEntry {
            direction: Direction::Sent,
            msg_type: MessageType::Abort,
            disposition: Disposition::Cleartext,
            body,
        });
        let _ = t.send(&msg);
        ProtocolError::Aborted {
            by_peer: false,
            reason,
            detail,
        }
    }

    /// Fresh one-time MAC key: the PSK auth partition until exhausted, then
    /// reserved pool bits. Both parties draw at the same protocol points.
    fn mac_key(&mut self) -> Result<MacKey, ProtocolError> {
        let slice = match self.ledger.take_bytes(Partition::Auth, MacKey::BYTES) {
            Ok(s) => s,
            Err(CryptoError::KeyExhausted(_)) => {
                crate::bits::bits_to_bytes(&self.pool.take_bits(MacKey::BYTES * 8)?)
            }
            Err(e) => return Err(e.into()),
        };
        Ok(MacKey::from_slice(&slice))
    }

    /// Both parties derive the identical acquisition from the shared seed
    /// and keep their own detector stream.
    fn acquire(&mut self) -> Result<(TagStream, TagStream), ProtocolError> {
        let mut source = self.config.source.clone();
        source.seed = source
            .seed
            .wrapping_add((self.sessions_run + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.sessions_run += 1;
        let (alice, bob, _truth) = generate(&source)?;
        Ok((alice, bob))
    }

    fn handshake_payload(&self) -> Vec<u8> {
        let mut body = vec![PROTOCOL_VERSION];
        body.extend(self.cycle_index.to_le_bytes());
        body.push(self.mode.as_byte());
        body
    }

    fn check_hello(&mut self, t: &mut dyn Transport, body: &[u8]) -> Result<(), ProtocolError> {
        if body.len() != 6 || body[0] != PROTOCOL_VERSION {
            return Err(self.abort(
                t,
                AbortReason::VersionMismatch,
                format!("hello version {:?}", body.first()),
            ));
        }
        let peer_cycle = u32::from_le_bytes(body[1..5].try_into().unwrap());
        if peer_cycle != self.cycle_index {
            return Err(self.abort(
                t,
                AbortReason::Replay,
                format!("cycle {peer_cycle}, expected {}", self.cycle_index),
            ));
        }
        if Mode::from_byte(body[5]) != Some(self.mode) {
            return Err(self.abort(t, AbortReason::VersionMismatch, "mode mismatch"));
        }
        Ok(())
    }

    fn config_payload(&self) -> Vec<u8> {
        let mut body = self.config.digest().to_vec();
        body.extend(self.table.digest());
        body.extend(self.ledger.digest());
        body
    }

    fn check_config(&mut self, t: &mut dyn Transport, body: &[u8]) -> Result<(), ProtocolError> {
        if body.len() != 96 {
            return Err(self.abort(t, AbortReason::Malformed, "config frame size"));
        }
        let local = self.config_payload();
        if body != local {
            let what = if body[..32] != local[..32] {
                "system config"
            } else if body[32..64] != local[32..64] {
                "mapping table"
            } else {
                "pre-shared key"
            };
            return Err(self.abort(t, AbortReason::DigestMismatch, what));
        }
        Ok(())
    }

    fn reserve_session_aes(&mut self) -> Result<(), ProtocolError> {
        if self.mode == Mode::Hybrid && self.session_aes.is_none() {
            let bytes = self
                .ledger
                .take_bytes(Partition::Aes, self.config.n_aes_bits / 8)?;
            self.session_aes = Some(AesKey::from_bytes(&bytes[..32]));
        }
        Ok(())
    }

    // ----- the key-derivation session shared by both roles -----

    /// One acquisition-to-pool session. Returns (qber, grown bits).
    fn qkd_session(
        &mut self,
        t: &mut dyn Transport,
        metrics: &mut CycleMetrics,
        artifacts: &mut AuditArtifacts,
    ) -> Result<SessionStats, ProtocolError> {
        let window = TimeTick::from_ps(self.config.sift_window_ps);
        let is_bob = self.role == Party::Bob;

        let mut sw = Stopwatch::start();
        let (alice_full, bob_full) = self.acquire()?;
        // Replay mode stamps the nominal acquisition span rather than the
        // simulator's generation time.
        metrics.add(Codeblock::SignalAccumulation, self.config.source.duration);
        sw.lap();

        // Tick exchange: Alice sends hers, Bob synchronizes and returns his
        // aligned array. Detector labels stay local.
        let (alice_ticks, bob_ticks): (Vec<i64>, Vec<i64>);
        if is_bob {
            let payload = self.recv_expect(t, MessageType::Tags)?;
            artifacts.alice_tick_payloads.push(payload.clone());
            alice_ticks = bytes_to_ticks(&payload)?;
            let alice_stream = ticks_as_stream(Party::Alice, &alice_ticks);

            sw.lap();
            let (aligned, _trace) = match run_sync(&alice_stream, &bob_full, &self.config.sync) {
                Ok(v) => v,
                Err(e) => return Err(self.abort(t, AbortReason::SyncFailed, e.to_string())),
            };
            metrics.add(Codeblock::Synchronization, sw.lap());

            let payload = ticks_to_bytes(&aligned.events().iter().map(|e| e.tick.ps()).collect::<Vec<_>>());
            artifacts.bob_tick_payloads.push(payload.clone());
            self.send(t, MessageType::Tags, &payload)?;
            // Bob filters against his aligned detector-bearing stream.
            bob_ticks = aligned.events().iter().map(|e| e.tick.ps()).collect();
            let pairs_input = aligned;
            return self.session_tail(t, metrics, artifacts, alice_ticks, bob_ticks, pairs_input, window);
        } else {
            let payload =
                ticks_to_bytes(&alice_full.events().iter().map(|e| e.tick.ps()).collect::<Vec<_>>());
            artifacts.alice_tick_payloads.push(payload.clone());
            self.send(t, MessageType::Tags, &payload)?;
            alice_ticks = alice_full.events().iter().map(|e| e.tick.ps()).collect();

            let payload = self.recv_expect(t, MessageType::Tags)?;
            artifacts.bob_tick_payloads.push(payload.clone());
            bob_ticks = bytes_to_ticks(&payload)?;
            return self.session_tail(t, metrics, artifacts, alice_ticks, bob_ticks, alice_full, window);
        }
    }

    /// Filtering, sifting, estimation, reconciliation, and amplification,
    /// written once for both roles. `own_stream` is this party's
    /// detector-bearing stream (aligned for Bob).
    #[allow(clippy::too_many_arguments)]
    fn session_tail(
        &mut self,
        t: &mut dyn Transport,
        metrics: &mut CycleMetrics,
        artifacts: &mut AuditArtifacts,
        alice_ticks: Vec<i64>,
        bob_ticks: Vec<i64>,
        own_stream: TagStream,
        window: TimeTick,
    ) -> Result<SessionStats, ProtocolError> {
        let is_bob = self.role == Party::Bob;
        let mut sw = Stopwatch::start();

        // One-to-one time filtering over the tick arrays both sides hold.
        let a_stream = ticks_as_stream(Party::Alice, &alice_ticks);
        let b_stream = ticks_as_stream(Party::Bob, &bob_ticks);
        let pairs = crate::sync::match_pairs_one_to_one(
            a_stream.events(),
            b_stream.events(),
            TimeTick::ZERO,
            window,
        );
        if pairs.is_empty() {
            return Err(self.abort(t, AbortReason::EmptyKey, "no coincidences"));
        }
        let n_raw = pairs.len();

        // Own bits and bases at the matched positions. The matched tick of
        // this party indexes into its detector-bearing stream.
        let own_ticks: Vec<i64> = own_stream.events().iter().map(|e| e.tick.ps()).collect();
        let own_sorted = own_stream.events();
        let mut bits = Vec::with_capacity(n_raw);
        let mut bases = Vec::with_capacity(n_raw);
        for &(ai, bj) in &pairs {
            let tick = if is_bob { bob_ticks[bj] } else { alice_ticks[ai] };
            let idx = own_ticks.partition_point(|&x| x < tick);
            let ev: &TagEvent = &own_sorted[idx];
            let (basis, bit) = map_detector(ev.detector);
            bits.push(bit as u8);
            bases.push((basis == Basis::Diag) as u8);
        }
        metrics.add(Codeblock::TimeTagFiltering, sw.lap());

        // Basis exchange and sifting.
        let peer_bases = if is_bob {
            let theirs = self.recv_expect(t, MessageType::Bases)?;
            let payload = pack_bits(&bases);
            artifacts.bases_payloads.push(payload.clone());
            artifacts.bases_payloads.push(theirs.clone());
            self.send(t, MessageType::Bases, &payload)?;
            unpack_bits(&theirs, n_raw)
        } else {
            let payload = pack_bits(&bases);
            artifacts.bases_payloads.push(payload.clone());
            self.send(t, MessageType::Bases, &payload)?;
            let theirs = self.recv_expect(t, MessageType::Bases)?;
            artifacts.bases_payloads.push(theirs.clone());
            unpack_bits(&theirs, n_raw)
        };
        let sifted: Vec<u8> = bits
            .iter()
            .zip(bases.iter().zip(&peer_bases))
            .filter_map(|(&b, (&m, &p))| (m == p).then_some(b))
            .collect();
        metrics.add(Codeblock::Sifting, sw.lap());

        // Error-rate estimation on a disclosed random subset.
        let sample = n_raw / 4;
        if sifted.len() < sample || sample == 0 {
            return Err(self.abort(t, AbortReason::EmptyKey, "sifted key too short"));
        }
        let (q, rest) = if is_bob {
            let body = self.recv_expect(t, MessageType::QberSample)?;
            if body.len() < 12 {
                return Err(self.abort(t, AbortReason::Malformed, "qber sample frame"));
            }
            let nonce = u64::from_le_bytes(body[..8].try_into().unwrap());
            let count = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
            if count != sample {
                return Err(self.abort(t, AbortReason::Malformed, "qber sample size"));
            }
            let disclosed_bits = unpack_bits(&body[12..], count);
            let positions = sample_positions(sifted.len(), count, nonce);
            let mismatches = positions
                .iter()
                .zip(&disclosed_bits)
                .filter(|(&i, &d)| sifted[i] != d)
                .count();
            let q = mismatches as f64 / count as f64;
            self.send(t, MessageType::QberSample, &q.to_le_bytes())?;
            (q, strip_positions(&sifted, &positions))
        } else {
            let nonce: u64 = self.qkd_rng.gen();
            let positions = sample_positions(sifted.len(), sample, nonce);
            let disclosed: Vec<u8> = positions.iter().map(|&i| sifted[i]).collect();
            let mut body = nonce.to_le_bytes().to_vec();
            body.extend((sample as u32).to_le_bytes());
            body.extend(pack_bits(&disclosed));
            self.send(t, MessageType::QberSample, &body)?;
            let reply = self.recv_expect(t, MessageType::QberSample)?;
            if reply.len() != 8 {
                return Err(self.abort(t, AbortReason::Malformed, "qber reply frame"));
            }
            let q = f64::from_le_bytes(reply.try_into().unwrap());
            (q, strip_positions(&sifted, &positions))
        };
        metrics.add(Codeblock::QberEstimation, sw.lap());

        // Reconciliation: Bob publishes MAC-authenticated syndromes, Alice
        // decodes toward them, both compare per-block digests.
        let n_bits = rest.len();
        let reconciled: Vec<u8> = if is_bob {
            let blocks = pad_blocks(&rest, self.code.n());
            let mut payload = (n_bits as u32).to_le_bytes().to_vec();
            payload.extend((blocks.len() as u32).to_le_bytes());
            for block in &blocks {
                payload.extend(pack_bits(&self.code.syndrome(block)));
            }
            artifacts.syndrome_payloads.push(payload.clone());
            self.send(t, MessageType::Syndrome, &payload)?;
            let mac = self.mac_key()?;
            let tag = wc_mac_tag(&payload, mac);
            self.send_mac(t, MacSubtype::SyndromeTag, &tag.to_bytes())?;

            // Alice reports per-block decode results and digests.
            let verdict = self.recv_mac(t, MacSubtype::KeyDigest)?;
            let (oks, digests) = decode_key_digest(&verdict)
                .map_err(|m| self.abort(t, AbortReason::Malformed, m))?;
            if oks.len() != blocks.len() {
                return Err(self.abort(t, AbortReason::Malformed, "digest count"));
            }
            let trailing = n_bits % self.code.n();
            let mut keep = Vec::with_capacity(blocks.len());
            let mut kept_bits = Vec::new();
            for (bi, block) in blocks.iter().enumerate() {
                let real_len = if bi + 1 == blocks.len() && trailing != 0 {
                    trailing
                } else {
                    self.code.n()
                };
                let mine = block_digest(&block[..real_len]);
                let ok = oks[bi] && digests[bi] == mine;
                keep.push(ok as u8);
                if ok {
                    kept_bits.extend_from_slice(&block[..real_len]);
                }
            }
            self.send_mac(t, MacSubtype::KeyDigestAck, &keep)?;
            kept_bits
        } else {
            let payload = self.recv_expect(t, MessageType::Syndrome)?;
            artifacts.syndrome_payloads.push(payload.clone());
            let mac = self.mac_key()?;
            let tag_body = self.recv_mac(t, MacSubtype::SyndromeTag)?;
            if tag_body.len() != 8 {
                return Err(self.abort(t, AbortReason::Malformed, "syndrome tag size"));
            }
            let tag = MacTag::from_bytes(tag_body.try_into().unwrap());
            if !wc_mac_verify(&payload, mac, tag) {
                return Err(self.abort(t, AbortReason::MacFailure, "syndrome tag"));
            }
            if payload.len() < 8 {
                return Err(self.abort(t, AbortReason::Malformed, "syndrome frame"));
            }
            let peer_bits = u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize;
            let block_count = u32::from_le_bytes(payload[4..8].try_into().unwrap()) as usize;
            if peer_bits != n_bits {
                return Err(self.abort(t, AbortReason::Malformed, "key length mismatch"));
            }
            let syn_bytes = self.code.syndrome_len().div_ceil(8);
            if payload.len() != 8 + block_count * syn_bytes {
                return Err(self.abort(t, AbortReason::Malformed, "syndrome payload size"));
            }
            let syndromes: Vec<Vec<u8>> = (0..block_count)
                .map(|i| {
                    unpack_bits(
                        &payload[8 + i * syn_bytes..8 + (i + 1) * syn_bytes],
                        self.code.syndrome_len(),
                    )
                })
                .collect();
            let corrected = reconcile_key_blocks(&rest, &syndromes, q.max(1e-4), self.code);

            let mut body = (corrected.len() as u32).to_le_bytes().to_vec();
            for block in &corrected {
                match block {
                    Some(bits) => {
                        body.push(1);
                        body.extend(block_digest(bits).to_le_bytes());
                    }
                    None => {
                        body.push(0);
                        body.extend(0u64.to_le_bytes());
                    }
                }
            }
            self.send_mac(t, MacSubtype::KeyDigest, &body)?;
            let keep = self.recv_mac(t, MacSubtype::KeyDigestAck)?;
            if keep.len() != corrected.len() {
                return Err(self.abort(t, AbortReason::Malformed, "keep mask size"));
            }
            corrected
                .into_iter()
                .zip(&keep)
                .filter_map(|(block, &k)| if k == 1 { block } else { None })
                .flatten()
                .collect()
        };
        metrics.add(Codeblock::ErrorCorrection, sw.lap());

        // Privacy amplification: Bob draws the seed, both compress.
        let n_final = reconciled.len();
        let report = key_rate(q, self.code.rate(), n_final, self.config.source.duration)
            .map_err(|e| self.abort(t, AbortReason::Malformed, e.to_string()))?;
        let grown = if is_bob {
            let mut seed: PaSeed = [0u8; 32];
            self.qkd_rng.fill_bytes(&mut seed);
            let mut body = seed.to_vec();
            body.extend((report.final_len as u32).to_le_bytes());
            self.send(t, MessageType::PaSeed, &body)?;
            self.amplify_into_pool(&reconciled, report.r, &seed, report.final_len)
        } else {
            let body = self.recv_expect(t, MessageType::PaSeed)?;
            if body.len() != 36 {
                return Err(self.abort(t, AbortReason::Malformed, "pa seed frame"));
            }
            let seed: PaSeed = body[..32].try_into().unwrap();
            let declared = u32::from_le_bytes(body[32..36].try_into().unwrap()) as usize;
            if declared != report.final_len {
                return Err(self.abort(
                    t,
                    AbortReason::PaMismatch,
                    format!("final length {declared} != {}", report.final_len),
                ));
            }
            self.amplify_into_pool(&reconciled, report.r, &seed, report.final_len)
        };
        metrics.add(Codeblock::PrivacyAmplification, sw.lap());

        Ok(SessionStats {
            q,
            n_reconciled: n_final,
            grown,
        })
    }

    fn amplify_into_pool(&mut self, bits: &[u8], r: f64, seed: &PaSeed, final_len: usize) -> usize {
        if final_len == 0 || bits.is_empty() {
            return 0;
        }
        match privacy_amplify(bits, r, seed) {
            Ok(key) => {
                debug_assert_eq!(key.len(), final_len);
                self.pool.append_bits(&key);
                key.len()
            }
            Err(_) => 0,
        }
    }

    fn send_mac(
        &mut self,
        t: &mut dyn Transport,
        subtype: MacSubtype,
        payload: &[u8],
    ) -> Result<(), ProtocolError> {
        let mut body = vec![subtype as u8];
        body.extend(payload);
        self.send(t, MessageType::Mac, &body)
    }

    fn recv_mac(
        &mut self,
        t: &mut dyn Transport,
        expected: MacSubtype,
    ) -> Result<Vec<u8>, ProtocolError> {
        let body = self.recv_expect(t, MessageType::Mac)?;
        if body.first() != Some(&(expected as u8)) {
            return Err(ProtocolError::Framing(format!(
                "mac subtype {:?}, expected {expected:?}",
                body.first()
            )));
        }
        Ok(body[1..].to_vec())
    }

    // ----- full cycles -----

    fn bob_cycle_inner(
        &mut self,
        t: &mut dyn Transport,
        message: &[u8],
    ) -> Result<CycleReport, ProtocolError> {
        let mut metrics = CycleMetrics::new();
        let mut artifacts = AuditArtifacts::default();
        let cycle_sw = Stopwatch::start();
        let mut sw = Stopwatch::start();
        self.comm_seconds = 0.0;
        self.phase = Phase::Handshake;

        self.send(t, MessageType::Hello, &self.handshake_payload())?;
        let hello = self.recv_expect(t, MessageType::Hello)?;
        self.check_hello(t, &hello)?;
        self.send(t, MessageType::Config, &self.config_payload())?;
        let config = self.recv_expect(t, MessageType::Config)?;
        self.check_config(t, &config)?;
        self.reserve_session_aes()?;

        // Sequence derivation.
        let is = if self.mode == Mode::Hybrid {
            self.enter(Phase::Obfuscation);
            sw.lap();
            if self.fault.burn_pi_bits > 0 {
                let n = self.fault.burn_pi_bits;
                let _ = self.ledger.take_bits(Partition::Pi, n);
            }
            let choice = self.is_choice.clone();
            let (is, mut pi) =
                derive_is(&mut self.ledger, &self.table, choice.as_deref(), &mut self.rng)
                    .map_err(|e| self.abort(t, AbortReason::KeyExhausted, e.to_string()))?;
            if let Some(bit) = self.fault.tamper_pi_bit {
                let idx = bit % pi.bits.len();
                pi.bits[idx] ^= 1;
            }
            artifacts.identifier_bits = pi.bits.clone();
            artifacts.is_canonical = is.canonical();
            self.send(t, MessageType::Pi, &pi.to_bytes())?;
            metrics.add(Codeblock::Obfuscation, sw.lap());
            Some(is)
        } else {
            None
        };

        // Key derivation until the pool covers the message demand.
        self.enter(Phase::QkdDerivation);
        let demand = self.otp_demand(is.as_ref(), message.len())?;
        let mut session_results: Vec<SessionStats> = Vec::new();
        loop {
            session_results.push(self.qkd_session(t, &mut metrics, &mut artifacts)?);
            let more = self.pool.available() < demand
                && session_results.len() < self.config.max_sessions_per_cycle;
            self.send(t, MessageType::Mac, &[MacSubtype::SessionControl as u8, more as u8])?;
            if !more {
                break;
            }
        }
        let sessions = session_results.len();
        let mean_q = (sessions > 0)
            .then(|| session_results.iter().map(|s| s.q).sum::<f64>() / sessions as f64);
        let grown_total: usize = session_results.iter().map(|s| s.grown).sum();
        if self.pool.available() < demand {
            return Err(self.abort(
                t,
                AbortReason::KeyExhausted,
                format!(
                    "pool {} below demand {demand} after {sessions} sessions",
                    self.pool.available()
                ),
            ));
        }

        // Auxiliary keys.
        let mut data_aes: Option<AesKey> = None;
        let mut peer_pk: Option<LwePublicKey> = None;
        if let Some(is) = &is {
            self.enter(Phase::AuxKeys);
            sw.lap();
            if !self.fault.skip_aux_keys {
                if is.contains(Primitive::PqEnc) {
                    let body = self.recv_expect(t, MessageType::PqPubkey)?;
                    peer_pk = Some(
                        decode_pubkey(&body)
                            .map_err(|m| self.abort(t, AbortReason::Malformed, m))?,
                    );
                }
                if is.contains(Primitive::Aes) {
                    let bytes = self
                        .ledger
                        .take_bytes(Partition::Aes, self.config.n_aes_bits / 8)?;
                    data_aes = Some(AesKey::from_bytes(&bytes[..32]));
                }
            }
            metrics.add(Codeblock::PqcKeyShare, sw.lap());
        }

        // Data transfer.
        self.enter(Phase::DataTransfer);
        sw.lap();
        let data_body = match &is {
            Some(is) => {
                let mut keys = SeqEncKeys {
                    otp_pool: &mut self.pool,
                    aes_key: data_aes,
                    nonce_ledger: &mut self.data_nonces,
                    peer_pk: peer_pk.as_ref(),
                    rng: &mut self.rng,
                };
                match seq_encrypt(message, is, &mut keys) {
                    Ok(c) => c,
                    Err(e) => {
                        let reason = match e {
                            crate::obfuscation::ObfuscationError::MissingPublicKey
                            | crate::obfuscation::ObfuscationError::MissingAesKey => {
                                AbortReason::MissingKey
                            }
                            _ => AbortReason::KeyExhausted,
                        };
                        return Err(self.abort(t, reason, e.to_string()));
                    }
                }
            }
            None => message.to_vec(), // baseline: OTP applied by disposition
        };
        self.send(t, MessageType::Data, &data_body)?;
        let mac = self.mac_key()?;
        let tag = wc_mac_tag(message, mac);
        self.send_mac(t, MacSubtype::MessageTag, &tag.to_bytes())?;
        metrics.add(Codeblock::MessageEncDec, sw.lap());
        artifacts.data_body = self
            .transcript
            .entries
            .iter()
            .rev()
            .find(|e| e.msg_type == MessageType::Data)
            .map(|e| e.body.clone())
            .unwrap_or_default();

        metrics.add(Codeblock::ClassicalCommunications, self.comm_seconds);
        metrics.total_seconds = {
            let mut sw = cycle_sw;
            sw.lap()
        };
        let accumulation = metrics.get(Codeblock::SignalAccumulation).max(1e-9);
        Ok(CycleReport {
            delivered: None,
            metrics,
            qber: mean_q,
            key_bits_grown: grown_total,
            skr: grown_total as f64 / accumulation,
            sessions,
            session_stats: session_results,
            artifacts,
        })
    }

    fn alice_cycle_inner(&mut self, t: &mut dyn Transport) -> Result<CycleReport, ProtocolError> {
        let mut metrics = CycleMetrics::new();
        let mut artifacts = AuditArtifacts::default();
        let cycle_sw = Stopwatch::start();
        let mut sw = Stopwatch::start();
        self.comm_seconds = 0.0;
        self.phase = Phase::Handshake;

        let hello = self.recv_expect(t, MessageType::Hello)?;
        self.check_hello(t, &hello)?;
        self.send(t, MessageType::Hello, &self.handshake_payload())?;
        let config = self.recv_expect(t, MessageType::Config)?;
        self.check_config(t, &config)?;
        self.send(t, MessageType::Config, &self.config_payload())?;
        self.reserve_session_aes()?;

        let is = if self.mode == Mode::Hybrid {
            self.enter(Phase::Obfuscation);
            sw.lap();
            if self.fault.burn_pi_bits > 0 {
                let n = self.fault.burn_pi_bits;
                let _ = self.ledger.take_bits(Partition::Pi, n);
            }
            let body = self.recv_expect(t, MessageType::Pi)?;
            let pi = EncryptedIdentifier::from_bytes(&body)
                .map_err(|e| self.abort(t, AbortReason::Malformed, e.to_string()))?;
            artifacts.identifier_bits = pi.bits.clone();
            let is = decode_is(&pi, &mut self.ledger, &self.table)
                .map_err(|e| self.abort(t, AbortReason::Malformed, e.to_string()))?;
            artifacts.is_canonical = is.canonical();
            metrics.add(Codeblock::Obfuscation, sw.lap());
            Some(is)
        } else {
            None
        };

        self.enter(Phase::QkdDerivation);
        let mut session_results: Vec<SessionStats> = Vec::new();
        loop {
            session_results.push(self.qkd_session(t, &mut metrics, &mut artifacts)?);
            let control = self.recv_mac(t, MacSubtype::SessionControl)?;
            if control != [1] {
                break;
            }
        }
        let sessions = session_results.len();
        let mean_q = (sessions > 0)
            .then(|| session_results.iter().map(|s| s.q).sum::<f64>() / sessions as f64);
        let grown_total: usize = session_results.iter().map(|s| s.grown).sum();

        let mut data_aes: Option<AesKey> = None;
        let mut secret_key: Option<LweSecretKey> = None;
        if let Some(is) = &is {
            self.enter(Phase::AuxKeys);
            sw.lap();
            if !self.fault.skip_aux_keys {
                if is.contains(Primitive::PqEnc) {
                    let (pk, sk) = pq_keygen(&self.config.lwe, self.rng.gen())
                        .map_err(|e| self.abort(t, AbortReason::Malformed, e.to_string()))?;
                    secret_key = Some(sk);
                    self.send(t, MessageType::PqPubkey, &encode_pubkey(&pk))?;
                }
                if is.contains(Primitive::Aes) {
                    let bytes = self
                        .ledger
                        .take_bytes(Partition::Aes, self.config.n_aes_bits / 8)?;
                    data_aes = Some(AesKey::from_bytes(&bytes[..32]));
                }
            }
            metrics.add(Codeblock::PqcKeyShare, sw.lap());
        }

        self.enter(Phase::DataTransfer);
        sw.lap();
        let data_body = self.recv_expect(t, MessageType::Data)?;
        artifacts.data_body = self
            .transcript
            .entries
            .iter()
            .rev()
            .find(|e| e.msg_type == MessageType::Data)
            .map(|e| e.body.clone())
            .unwrap_or_default();
        let delivered = match &is {
            Some(is) => {
                let mut keys = SeqDecKeys {
                    otp_pool: &mut self.pool,
                    aes_key: data_aes,
                    secret_key: secret_key.as_ref(),
                };
                match seq_decrypt(&data_body, is, &mut keys) {
                    Ok(m) => m,
                    Err(e) => {
                        let reason = match e {
                            crate::obfuscation::ObfuscationError::MissingSecretKey
                            | crate::obfuscation::ObfuscationError::MissingAesKey => {
                                AbortReason::MissingKey
                            }
                            crate::obfuscation::ObfuscationError::Crypto(
                                CryptoError::KeyExhausted(_),
                            ) => AbortReason::KeyExhausted,
                            _ => AbortReason::Malformed,
                        };
                        return Err(self.abort(t, reason, e.to_string()));
                    }
                }
            }
            None => data_body, // baseline: disposition already removed OTP
        };
        let mac = self.mac_key()?;
        let tag_body = self.recv_mac(t, MacSubtype::MessageTag)?;
        if tag_body.len() != 8 {
            return Err(self.abort(t, AbortReason::Malformed, "message tag size"));
        }
        let tag = MacTag::from_bytes(tag_body.try_into().unwrap());
        if !wc_mac_verify(&delivered, mac, tag) {
            return Err(self.abort(t, AbortReason::MacFailure, "message tag"));
        }
        metrics.add(Codeblock::MessageEncDec, sw.lap());

        metrics.add(Codeblock::ClassicalCommunications, self.comm_seconds);
        metrics.total_seconds = {
            let mut sw = cycle_sw;
            sw.lap()
        };
        let accumulation = metrics.get(Codeblock::SignalAccumulation).max(1e-9);
        Ok(CycleReport {
            delivered: Some(delivered),
            metrics,
            qber: mean_q,
            key_bits_grown: grown_total,
            skr: grown_total as f64 / accumulation,
            sessions,
            session_stats: session_results,
            artifacts,
        })
    }

    /// Pool bits one data transfer will consume, plus the MAC reserve.
    fn otp_demand(
        &self,
        is: Option<&InstructionSequence>,
        msg_len: usize,
    ) -> Result<usize, ProtocolError> {
        let base = match is {
            Some(is) => otp_demand_bits(is, msg_len, Some(self.config.lwe.n))
                .map_err(ProtocolError::Obfuscation)?,
            None => msg_len * 8,
        };
        Ok(base + self.config.mac_reserve_bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum MacSubtype {
    SyndromeTag = 1,
    KeyDigest = 2,
    KeyDigestAck = 3,
    MessageTag = 4,
    SessionControl = 5,
}

fn decode_key_digest(body: &[u8]) -> Result<(Vec<bool>, Vec<u64>), String> {
    if body.len() < 4 {
        return Err("digest frame too short".into());
    }
    let count = u32::from_le_bytes(body[..4].try_into().unwrap()) as usize;
    if body.len() != 4 + count * 9 {
        return Err("digest frame size".into());
    }
    let mut oks = Vec::with_capacity(count);
    let mut digests = Vec::with_capacity(count);
    for i in 0..count {
        let base = 4 + i * 9;
        oks.push(body[base] == 1);
        digests.push(u64::from_le_bytes(body[base + 1..base + 9].try_into().unwrap()));
    }
    Ok((oks, digests))
}

fn encode_pubkey(pk: &LwePublicKey) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + 2 * (pk.a.len() + pk.b.len()));
    out.extend((pk.params.n as u32).to_le_bytes());
    out.extend(pk.params.q.to_le_bytes());
    out.extend(pk.params.error_bound.to_le_bytes());
    out.extend(pk.params.security_strength.to_le_bytes());
    for &v in pk.a.iter().chain(&pk.b) {
        out.extend(v.to_le_bytes());
    }
    out
}

fn decode_pubkey(body: &[u8]) -> Result<LwePublicKey, String> {
    if body.len() < 14 {
        return Err("pubkey frame too short".into());
    }
    let params = LweParams {
        n: u32::from_le_bytes(body[0..4].try_into().unwrap()) as usize,
        q: u32::from_le_bytes(body[4..8].try_into().unwrap()),
        error_bound: u32::from_le_bytes(body[8..12].try_into().unwrap()),
        security_strength: u16::from_le_bytes(body[12..14].try_into().unwrap()),
    };
    params.validate().map_err(|e| e.to_string())?;
    let m = params.samples();
    let expected = 14 + 2 * (m * params.n + m);
    if body.len() != expected {
        return Err(format!("pubkey frame size {} != {expected}", body.len()));
    }
    let mut vals = body[14..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()));
    let a: Vec<u16> = vals.by_ref().take(m * params.n).collect();
    let b: Vec<u16> = vals.collect();
    if a.iter().chain(&b).any(|&v| v as u32 >= params.q) {
        return Err("pubkey coordinate out of range".into());
    }
    Ok(LwePublicKey { params, a, b })
}

fn ticks_as_stream(party: Party, ticks: &[i64]) -> TagStream {
    let det = match party {
        Party::Alice => crate::timetag::DetectorId::D1,
        Party::Bob => crate::timetag::DetectorId::D5,
    };
    TagStream::from_unsorted(
        party,
        ticks
            .iter()
            .map(|&t| TagEvent {
                tick: TimeTick::from_ps(t),
                detector: det,
            })
            .collect(),
    )
    .expect("tick arrays sort cleanly")
}

/// Outcome of driving both parties over an in-process transport.
pub struct PairOutcome {
    pub alice: Result<CycleReport, ProtocolError>,
    pub bob: Result<CycleReport, ProtocolError>,
}

/// Run one cycle with both parties as threads over an in-process channel.
pub fn run_cycle_pair(
    alice: &mut Session,
    bob: &mut Session,
    message: &[u8],
) -> PairOutcome {
    let (mut ta, mut tb) = transport::InProcessTransport::pair();
    std::thread::scope(|scope| {
        let alice_handle = scope.spawn(move || alice.run_cycle_alice(&mut ta));
        let bob_res = bob.run_cycle_bob(&mut tb, message);
        let alice_res = alice_handle.join().expect("alice thread");
        PairOutcome {
            alice: alice_res,
            bob: bob_res,
        }
    })
}

/// Convenience constructor: a matched pair of sessions sharing one PSK
/// file, table, and config.
pub fn session_pair(
    mode: Mode,
    config: &SystemConfig,
    table: &MappingTable,
    psk_file: &[u8],
) -> Result<(Session, Session), ProtocolError> {
    let alice_ledger = PskLedger::read_from(psk_file)?;
    let bob_ledger = PskLedger::read_from(psk_file)?;
    Ok((
        Session::new(Party::Alice, mode, config.clone(), table.clone(), alice_ledger),
        Session::new(Party::Bob, mode, config.clone(), table.clone(), bob_ledger),
    ))
}

/// A PSK sized generously for multi-cycle test runs.
pub fn default_psk(seed: Option<u64>) -> Vec<u8> {
    crate::primitives::generate_psk(4096, 4096, 64, seed)
}

pub use self::wire::ProtocolError as Error;
