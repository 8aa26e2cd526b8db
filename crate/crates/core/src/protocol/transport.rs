//! Transport implementations: in-process channel pair and TCP.
//!
//! Both move whole encoded frames, exactly once, in order. The in-process
//! transport still round-trips through the byte encoding so transcripts are
//! identical across transports for identical seeds.

use super::wire::{read_frame, write_frame, ProtocolError, WireMessage};
use std::collections::VecDeque;
use std::net::TcpStream;
use std::sync::mpsc;

pub trait Transport: Send {
    fn send(&mut self, msg: &WireMessage) -> Result<(), ProtocolError>;
    fn recv(&mut self) -> Result<WireMessage, ProtocolError>;
}

/// One end of an in-process duplex channel.
pub struct InProcessTransport {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
}

impl InProcessTransport {
    pub fn pair() -> (InProcessTransport, InProcessTransport) {
        let (tx_a, rx_b) = mpsc::channel();
        let (tx_b, rx_a) = mpsc::channel();
        (
            InProcessTransport { tx: tx_a, rx: rx_a },
            InProcessTransport { tx: tx_b, rx: rx_b },
        )
    }
}

impl Transport for InProcessTransport {
    fn send(&mut self, msg: &WireMessage) -> Result<(), ProtocolError> {
        self.tx
            .send(msg.encode())
            .map_err(|_| ProtocolError::ConnectionLost)
    }

    fn recv(&mut self) -> Result<WireMessage, ProtocolError> {
        let bytes = self.rx.recv().map_err(|_| ProtocolError::ConnectionLost)?;
        WireMessage::decode(&bytes)
    }
}

/// Length-prefixed framing over a TCP stream.
pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> TcpTransport {
        stream.set_nodelay(true).ok();
        TcpTransport { stream }
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, msg: &WireMessage) -> Result<(), ProtocolError> {
        write_frame(&mut self.stream, msg)
    }

    fn recv(&mut self) -> Result<WireMessage, ProtocolError> {
        read_frame(&mut self.stream)
    }
}

/// Scripted endpoint for driving one protocol half in tests: `recv` pops
/// from `incoming`, `send` records into `sent`.
#[derive(Default)]
pub struct MockTransport {
    pub incoming: VecDeque<WireMessage>,
    pub sent: Vec<WireMessage>,
}

impl MockTransport {
    pub fn scripted(frames: Vec<WireMessage>) -> MockTransport {
        MockTransport {
            incoming: frames.into(),
            sent: Vec::new(),
        }
    }
}

impl Transport for MockTransport {
    fn send(&mut self, msg: &WireMessage) -> Result<(), ProtocolError> {
        self.sent.push(msg.clone());
        Ok(())
    }

    fn recv(&mut self) -> Result<WireMessage, ProtocolError> {
        self.incoming
            .pop_front()
            .ok_or(ProtocolError::ConnectionLost)
    }
}
