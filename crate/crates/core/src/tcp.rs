//! Simulated reliable byte streams: explicit sequence numbers, cumulative
//! acks, and a fixed retransmission timeout. No windows, no congestion
//! control, no checksums.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::ids::StreamId;
use crate::netgate::SocketState;

pub const DEFAULT_RTO: Duration = Duration::from_millis(200);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegKind {
    Syn,
    SynAck,
    Data,
    Ack,
    Fin,
}

impl SegKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Syn => "SYN",
            Self::SynAck => "SYNACK",
            Self::Data => "DATA",
            Self::Ack => "ACK",
            Self::Fin => "FIN",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub stream: StreamId,
    /// Direction: client to server when true.
    pub to_server: bool,
    pub kind: SegKind,
    pub seq: u64,
    pub ack: u64,
    pub payload: Vec<u8>,
    /// Set on the pure ack a recovering server sends after taking over; the
    /// peer answers by retransmitting anything unacknowledged immediately.
    pub probe: bool,
}

impl Segment {
    pub fn end_seq(&self) -> u64 {
        self.seq + self.payload.len() as u64
    }
}

/// One side of a stream.
#[derive(Debug, Clone, Default)]
pub struct TcpEndpoint {
    pub snd_una: u64,
    pub snd_nxt: u64,
    /// Bytes in `[snd_una, snd_nxt)`.
    pub write_queue: VecDeque<u8>,
    pub last_tx: Option<Instant>,
    pub rcv_nxt: u64,
    /// Received but unread bytes, ending at `rcv_nxt`.
    pub recv_queue: VecDeque<u8>,
    pub peer_fin: bool,
}

impl TcpEndpoint {
    pub fn read_seq(&self) -> u64 {
        self.rcv_nxt - self.recv_queue.len() as u64
    }

    /// Queues bytes for transmission and returns the segment to put on the wire.
    pub fn send(&mut self, stream: StreamId, to_server: bool, bytes: &[u8], now: Instant) -> Segment {
        let seq = self.snd_nxt;
        self.write_queue.extend(bytes.iter().copied());
        self.snd_nxt += bytes.len() as u64;
        self.last_tx = Some(now);
        Segment {
            stream,
            to_server,
            kind: SegKind::Data,
            seq,
            ack: self.rcv_nxt,
            payload: bytes.to_vec(),
            probe: false,
        }
    }

    /// Accepts in-order data, trimming any prefix already received. Returns
    /// the number of new bytes appended.
    pub fn on_data(&mut self, seq: u64, payload: &[u8]) -> usize {
        let end = seq + payload.len() as u64;
        if seq > self.rcv_nxt || end <= self.rcv_nxt {
            return 0;
        }
        let skip = (self.rcv_nxt - seq) as usize;
        let fresh = &payload[skip..];
        self.recv_queue.extend(fresh.iter().copied());
        self.rcv_nxt = end;
        fresh.len()
    }

    pub fn on_ack(&mut self, ack: u64) {
        if ack > self.snd_una && ack <= self.snd_nxt {
            let n = (ack - self.snd_una) as usize;
            self.write_queue.drain(..n);
            self.snd_una = ack;
            self.last_tx = if self.snd_una == self.snd_nxt { None } else { Some(Instant::now()) };
        }
    }

    pub fn read(&mut self, max: usize) -> (u64, Vec<u8>) {
        let start = self.read_seq();
        let n = max.min(self.recv_queue.len());
        (start, self.recv_queue.drain(..n).collect())
    }

    pub fn ack_segment(&self, stream: StreamId, to_server: bool) -> Segment {
        Segment {
            stream,
            to_server,
            kind: SegKind::Ack,
            seq: self.snd_nxt,
            ack: self.rcv_nxt,
            payload: Vec::new(),
            probe: false,
        }
    }

    /// Everything unacknowledged as one segment, if any.
    pub fn retransmission(&mut self, stream: StreamId, to_server: bool, now: Instant) -> Option<Segment> {
        if self.snd_una == self.snd_nxt {
            return None;
        }
        self.last_tx = Some(now);
        Some(Segment {
            stream,
            to_server,
            kind: SegKind::Data,
            seq: self.snd_una,
            ack: self.rcv_nxt,
            payload: self.write_queue.iter().copied().collect(),
            probe: false,
        })
    }

    pub fn retransmit_due(&self, now: Instant, rto: Duration) -> bool {
        matches!(self.last_tx, Some(t) if self.snd_una < self.snd_nxt && now.duration_since(t) >= rto)
    }

    pub fn to_state(&self) -> SocketState {
        SocketState {
            sent_seq: self.snd_nxt,
            acked_seq: self.snd_una,
            rcv_seq: self.rcv_nxt,
            recv_queue: self.recv_queue.iter().copied().collect(),
            write_queue: self.write_queue.iter().copied().collect(),
        }
    }

    pub fn from_state(s: &SocketState) -> Self {
        Self {
            snd_una: s.acked_seq,
            snd_nxt: s.sent_seq,
            write_queue: s.write_queue.iter().copied().collect(),
            last_tx: None,
            rcv_nxt: s.rcv_seq,
            recv_queue: s.recv_queue.iter().copied().collect(),
            peer_fin: false,
        }
    }
}
