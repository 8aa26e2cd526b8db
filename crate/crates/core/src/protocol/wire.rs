//! Classical-channel framing.
//!
//! Every frame is `[1-byte type][4-byte big-endian length][body]`. The
//! framing layer knows nothing about encryption; dispositions are applied
//! to bodies by the session before framing and recorded in the transcript.

use std::io::{self, Read, Write};
use thiserror::Error;

use crate::obfuscation::ObfuscationError;
use crate::postproc::PostprocError;
use crate::primitives::CryptoError;
use crate::sourcesim::SourceError;
use crate::sync::SyncError;

pub const PROTOCOL_VERSION: u8 = 1;

/// Frames above this size indicate a corrupt length prefix.
pub const MAX_FRAME_BYTES: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    Config = 2,
    Pi = 3,
    Tags = 4,
    Bases = 5,
    QberSample = 6,
    Syndrome = 7,
    Mac = 8,
    PaSeed = 9,
    PqPubkey = 10,
    Data = 11,
    Abort = 12,
}

impl MessageType {
    pub fn from_byte(b: u8) -> Option<MessageType> {
        use MessageType::*;
        Some(match b {
            1 => Hello,
            2 => Config,
            3 => Pi,
            4 => Tags,
            5 => Bases,
            6 => QberSample,
            7 => Syndrome,
            8 => Mac,
            9 => PaSeed,
            10 => PqPubkey,
            11 => Data,
            12 => Abort,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        use MessageType::*;
        match self {
            Hello => "HELLO",
            Config => "CONFIG",
            Pi => "PI",
            Tags => "TAGS",
            Bases => "BASES",
            QberSample => "QBER_SAMPLE",
            Syndrome => "SYNDROME",
            Mac => "MAC",
            PaSeed => "PA_SEED",
            PqPubkey => "PQ_PUBKEY",
            Data => "DATA",
            Abort => "ABORT",
        }
    }
}

/// How a frame body was protected before framing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    Cleartext,
    Aes,
    Otp,
}

impl Disposition {
    pub fn name(self) -> &'static str {
        match self {
            Disposition::Cleartext => "cleartext",
            Disposition::Aes => "aes",
            Disposition::Otp => "otp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: MessageType,
    pub body: Vec<u8>,
}

impl WireMessage {
    pub fn new(msg_type: MessageType, body: Vec<u8>) -> WireMessage {
        WireMessage { msg_type, body }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.body.len());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&(self.body.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<WireMessage, ProtocolError> {
        if bytes.len() < 5 {
            return Err(ProtocolError::Framing("frame shorter than header".into()));
        }
        let msg_type = MessageType::from_byte(bytes[0])
            .ok_or(ProtocolError::UnknownType(bytes[0]))?;
        let len = u32::from_be_bytes(bytes[1..5].try_into().unwrap()) as usize;
        if len > MAX_FRAME_BYTES {
            return Err(ProtocolError::OversizeFrame(len));
        }
        if bytes.len() != 5 + len {
            return Err(ProtocolError::Framing(format!(
                "length prefix {len} disagrees with frame size {}",
                bytes.len() - 5
            )));
        }
        Ok(WireMessage {
            msg_type,
            body: bytes[5..].to_vec(),
        })
    }
}

/// Write one frame; partial writes are completed by `write_all`.
pub fn write_frame<W: Write>(mut w: W, msg: &WireMessage) -> Result<(), ProtocolError> {
    if msg.body.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::OversizeFrame(msg.body.len()));
    }
    w.write_all(&msg.encode()).map_err(map_io)?;
    w.flush().map_err(map_io)
}

/// Read one frame, handling partial reads. A clean EOF before the first
/// header byte is reported as `ConnectionLost`.
pub fn read_frame<R: Read>(mut r: R) -> Result<WireMessage, ProtocolError> {
    let mut header = [0u8; 5];
    r.read_exact(&mut header).map_err(map_io)?;
    let msg_type =
        MessageType::from_byte(header[0]).ok_or(ProtocolError::UnknownType(header[0]))?;
    let len = u32::from_be_bytes(header[1..5].try_into().unwrap()) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(ProtocolError::OversizeFrame(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(map_io)?;
    Ok(WireMessage { msg_type, body })
}

fn map_io(e: io::Error) -> ProtocolError {
    match e.kind() {
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::BrokenPipe => ProtocolError::ConnectionLost,
        _ => ProtocolError::Io(e),
    }
}

/// Why a cycle was aborted; carried in the ABORT body.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AbortReason {
    VersionMismatch = 1,
    DigestMismatch = 2,
    Replay = 3,
    SyncFailed = 4,
    MacFailure = 5,
    KeyExhausted = 6,
    EmptyKey = 7,
    PaMismatch = 8,
    MissingKey = 9,
    Malformed = 10,
    PeerAbort = 11,
}

impl AbortReason {
    pub fn from_byte(b: u8) -> Option<AbortReason> {
        use AbortReason::*;
        Some(match b {
            1 => VersionMismatch,
            2 => DigestMismatch,
            3 => Replay,
            4 => SyncFailed,
            5 => MacFailure,
            6 => KeyExhausted,
            7 => EmptyKey,
            8 => PaMismatch,
            9 => MissingKey,
            10 => Malformed,
            11 => PeerAbort,
            _ => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("connection lost")]
    ConnectionLost,
    #[error("frame length {0} exceeds the 64 MiB cap")]
    OversizeFrame(usize),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("framing error: {0}")]
    Framing(String),
    #[error("expected {expected} frame, got {got}")]
    UnexpectedType {
        expected: &'static str,
        got: &'static str,
    },
    #[error("cycle aborted ({}): {reason:?} {detail}", if *.by_peer { "by peer" } else { "locally" })]
    Aborted {
        by_peer: bool,
        reason: AbortReason,
        detail: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Postproc(#[from] PostprocError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Obfuscation(#[from] ObfuscationError),
    #[error(transparent)]
    Source(#[from] SourceError),
}

/// Tick-array payload helpers; tags cross the channel as ticks only, the
/// detector labels never leave a party.
pub fn ticks_to_bytes(ticks: &[i64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(ticks.len() * 8);
    for t in ticks {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

pub fn bytes_to_ticks(bytes: &[u8]) -> Result<Vec<i64>, ProtocolError> {
    if bytes.len() % 8 != 0 {
        return Err(ProtocolError::Framing("tick payload not 8-aligned".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_roundtrip_many_random_bodies() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut buf = Vec::new();
        let mut msgs = Vec::new();
        for _ in 0..200 {
            let len = rng.gen_range(0..2000);
            let body: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let msg = WireMessage::new(MessageType::Data, body);
            write_frame(&mut buf, &msg).unwrap();
            msgs.push(msg);
        }
        let mut r = &buf[..];
        for expected in &msgs {
            assert_eq!(&read_frame(&mut r).unwrap(), expected);
        }
        assert!(matches!(
            read_frame(&mut r),
            Err(ProtocolError::ConnectionLost)
        ));
    }

    #[test]
    fn torn_frame_is_an_error_not_a_desync() {
        let msg = WireMessage::new(MessageType::Tags, vec![1, 2, 3, 4, 5]);
        let mut bytes = msg.encode();
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(
            read_frame(&bytes[..]),
            Err(ProtocolError::ConnectionLost)
        ));
    }

    #[test]
    fn oversize_and_unknown_frames_rejected() {
        let mut bytes = vec![MessageType::Data as u8];
        bytes.extend_from_slice(&(u32::MAX).to_be_bytes());
        assert!(matches!(
            read_frame(&bytes[..]),
            Err(ProtocolError::OversizeFrame(_))
        ));

        let bytes = [99u8, 0, 0, 0, 0];
        assert!(matches!(
            read_frame(&bytes[..]),
            Err(ProtocolError::UnknownType(99))
        ));
    }

    #[test]
    fn tick_payload_roundtrip() {
        let ticks = vec![0i64, -5, 1 << 40, i64::MAX];
        assert_eq!(bytes_to_ticks(&ticks_to_bytes(&ticks)).unwrap(), ticks);
        assert!(bytes_to_ticks(&[1, 2, 3]).is_err());
    }
}
