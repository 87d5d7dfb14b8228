//! Backup-side packet path: the output gate, the incoming-packet recorder and
//! socket reconstruction for the replay-to-live transition.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::StreamId;
use crate::ndlog::EpochLog;
use crate::tcp::{SegKind, Segment};

/// Server-side state of one stream.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SocketState {
    pub sent_seq: u64,
    pub acked_seq: u64,
    pub rcv_seq: u64,
    /// Received but unread bytes, ending at `rcv_seq`.
    pub recv_queue: Vec<u8>,
    /// Sent but unacknowledged bytes, `[acked_seq, sent_seq)`.
    pub write_queue: Vec<u8>,
}

impl SocketState {
    pub fn read_seq(&self) -> u64 {
        self.rcv_seq - self.recv_queue.len() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseRequest {
    pub stream: StreamId,
    pub release_seq: u64,
}

/// Holds server output until a release request covers it.
#[derive(Debug, Default)]
pub struct GateState {
    release: HashMap<StreamId, u64>,
    fifo: VecDeque<ReleaseRequest>,
    held: HashMap<StreamId, VecDeque<Segment>>,
    known: HashSet<StreamId>,
    acked_incoming: HashMap<StreamId, u64>,
    ack_forwarded: HashMap<StreamId, u64>,
    stopped: bool,
    ignored: u64,
}

impl GateState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open_stream(&mut self, stream: StreamId) {
        self.known.insert(stream);
    }

    pub fn close_stream(&mut self, stream: StreamId) {
        self.known.remove(&stream);
        self.held.remove(&stream);
    }

    pub fn release_seq(&self, stream: StreamId) -> u64 {
        self.release.get(&stream).copied().unwrap_or(0)
    }

    /// Highest sequence number of client data the server has acknowledged.
    pub fn acked_incoming(&self, stream: StreamId) -> u64 {
        self.acked_incoming.get(&stream).copied().unwrap_or(0)
    }

    pub fn held_bytes(&self, stream: StreamId) -> usize {
        self.held.get(&stream).map_or(0, |q| q.iter().map(|s| s.payload.len()).sum())
    }

    pub fn ignored_requests(&self) -> u64 {
        self.ignored
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    pub fn submit(&mut self, r: ReleaseRequest) {
        if !self.known.contains(&r.stream) {
            log::warn!("release request for unknown stream {}", r.stream);
            self.ignored += 1;
            return;
        }
        self.fifo.push_back(r);
    }

    /// Applies queued requests in arrival order and returns what they release.
    pub fn pump(&mut self) -> Vec<Segment> {
        let mut out = Vec::new();
        if self.stopped {
            return out;
        }
        while let Some(r) = self.fifo.pop_front() {
            let cur = self.release.entry(r.stream).or_insert(0);
            if r.release_seq > *cur {
                *cur = r.release_seq;
            }
            self.drain_stream(r.stream, &mut out);
        }
        out
    }

    /// Takes one server-to-client segment. Returns what may leave now.
    pub fn offer(&mut self, seg: Segment) -> Vec<Segment> {
        let mut out = Vec::new();
        let stream = seg.stream;
        let acked = self.acked_incoming.entry(stream).or_insert(0);
        if seg.kind != SegKind::Syn && seg.ack > *acked {
            *acked = seg.ack;
        }
        if self.stopped {
            return out;
        }
        match seg.kind {
            SegKind::Data if !seg.payload.is_empty() => {
                self.known.insert(stream);
                let ack = seg.ack;
                self.held.entry(stream).or_default().push_back(seg);
                self.drain_stream(stream, &mut out);
                if self.held_bytes(stream) > 0 && ack > self.ack_forwarded.get(&stream).copied().unwrap_or(0) {
                    self.ack_forwarded.insert(stream, ack);
                    let release = self.release_seq(stream);
                    out.push(Segment {
                        stream,
                        to_server: false,
                        kind: SegKind::Ack,
                        seq: release,
                        ack,
                        payload: Vec::new(),
                        probe: false,
                    });
                }
            }
            SegKind::Fin => {
                // A FIN must not overtake held data.
                if self.held_bytes(stream) == 0 && seg.seq <= self.release_seq(stream) {
                    out.push(seg);
                }
            }
            _ => {
                if seg.kind == SegKind::SynAck {
                    self.known.insert(stream);
                }
                let f = self.ack_forwarded.entry(stream).or_insert(0);
                *f = (*f).max(seg.ack);
                out.push(seg);
            }
        }
        out
    }

    fn drain_stream(&mut self, stream: StreamId, out: &mut Vec<Segment>) {
        let release = self.release_seq(stream);
        let Some(q) = self.held.get_mut(&stream) else { return };
        while let Some(front) = q.front_mut() {
            if front.end_seq() <= release {
                let seg = q.pop_front().unwrap();
                let f = self.ack_forwarded.entry(stream).or_insert(0);
                *f = (*f).max(seg.ack);
                out.push(seg);
            } else if front.seq < release {
                let n = (release - front.seq) as usize;
                let rest = front.payload.split_off(n);
                let head = Segment { payload: std::mem::replace(&mut front.payload, rest), ..front.clone() };
                front.seq = release;
                out.push(head);
                break;
            } else {
                break;
            }
        }
    }

    /// Stops all releases and discards held packets; they are resent from the
    /// reconstructed write queues.
    pub fn stop(&mut self) {
        self.stopped = true;
        self.held.clear();
        self.fifo.clear();
    }
}

#[derive(Debug, Default, Clone)]
struct StreamRecord {
    base: u64,
    data: Vec<u8>,
    ooo: BTreeMap<u64, Vec<u8>>,
    client_acked: u64,
}

impl StreamRecord {
    fn end(&self) -> u64 {
        self.base + self.data.len() as u64
    }

    fn insert(&mut self, seq: u64, bytes: &[u8]) {
        let end = seq + bytes.len() as u64;
        if end <= self.end() {
            return;
        }
        if seq > self.end() {
            let e = self.ooo.entry(seq).or_default();
            if bytes.len() > e.len() {
                *e = bytes.to_vec();
            }
            return;
        }
        let skip = (self.end() - seq) as usize;
        self.data.extend_from_slice(&bytes[skip..]);
        while let Some((&s, _)) = self.ooo.first_key_value() {
            if s > self.end() {
                break;
            }
            let b = self.ooo.pop_first().unwrap().1;
            if s + b.len() as u64 > self.end() {
                let skip = (self.end() - s) as usize;
                self.data.extend_from_slice(&b[skip..]);
            }
        }
    }
}

/// Incoming client bytes recorded before they are forwarded to the primary,
/// plus the client's acknowledgements of server output.
#[derive(Debug, Default, Clone)]
pub struct PackRecord {
    streams: BTreeMap<StreamId, StreamRecord>,
}

impl PackRecord {
    pub fn new() -> Self {
        Self::default()
    }

    /// Idempotent on retransmitted ranges.
    pub fn record_incoming(&mut self, stream: StreamId, seq: u64, bytes: &[u8]) {
        if bytes.is_empty() {
            self.streams.entry(stream).or_default();
            return;
        }
        self.streams.entry(stream).or_default().insert(seq, bytes);
    }

    pub fn record_client_ack(&mut self, stream: StreamId, ack: u64) {
        let r = self.streams.entry(stream).or_default();
        r.client_acked = r.client_acked.max(ack);
    }

    pub fn client_acked(&self, stream: StreamId) -> u64 {
        self.streams.get(&stream).map_or(0, |r| r.client_acked)
    }

    /// End of the contiguous prefix recorded for `stream`.
    pub fn contiguous_end(&self, stream: StreamId) -> u64 {
        self.streams.get(&stream).map_or(0, StreamRecord::end)
    }

    /// Contiguous bytes from `from` onward, or `None` if `from` was trimmed
    /// or lies beyond the contiguous prefix.
    pub fn contiguous_from(&self, stream: StreamId, from: u64) -> Option<Vec<u8>> {
        let r = match self.streams.get(&stream) {
            Some(r) => r,
            None => return (from == 0).then(Vec::new),
        };
        if from < r.base || from > r.end() {
            return None;
        }
        Some(r.data[(from - r.base) as usize..].to_vec())
    }

    /// Discards bytes below `below`, which the committed checkpoint holds.
    pub fn trim(&mut self, stream: StreamId, below: u64) {
        if let Some(r) = self.streams.get_mut(&stream) {
            if below > r.base {
                let n = ((below - r.base) as usize).min(r.data.len());
                r.data.drain(..n);
                r.base += n as u64;
            }
        }
    }

    pub fn streams(&self) -> impl Iterator<Item = StreamId> + '_ {
        self.streams.keys().copied()
    }
}

/// How far replay advanced each stream's read and write positions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayedIo {
    pub recv_end: BTreeMap<StreamId, u64>,
    pub send_end: BTreeMap<StreamId, u64>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReconstructError {
    #[error("{stream}: recorded input ends at {have}, server acknowledged {acked}")]
    MissingInput { stream: StreamId, have: u64, acked: u64 },
    #[error("{stream}: recorded input no longer covers read position {read_seq}")]
    Trimmed { stream: StreamId, read_seq: u64 },
    #[error("{stream}: no outgoing copy covers bytes from {seq}")]
    MissingOutput { stream: StreamId, seq: u64 },
    #[error("{stream}: replay advanced past the recorded stream")]
    Overrun { stream: StreamId },
}

/// Rebuilds the server side of every stream after replay.
pub fn reconstruct_sockets(
    checkpoint: &BTreeMap<StreamId, SocketState>,
    log: &EpochLog,
    io: &ReplayedIo,
    rec: &PackRecord,
    gate: &GateState,
) -> Result<BTreeMap<StreamId, SocketState>, ReconstructError> {
    let mut out = BTreeMap::new();
    for (&stream, ck) in checkpoint {
        let sent_seq = io.send_end.get(&stream).copied().unwrap_or(0).max(ck.sent_seq);
        let mut outgoing = ck.write_queue.clone();
        let mut end = ck.sent_seq;
        for c in log.copies.iter().filter(|c| c.stream == stream && c.end_seq() > ck.sent_seq) {
            if end >= sent_seq {
                break;
            }
            if c.seq != end {
                return Err(ReconstructError::MissingOutput { stream, seq: end });
            }
            outgoing.extend_from_slice(&c.bytes);
            end = c.end_seq();
        }
        if end < sent_seq {
            return Err(ReconstructError::MissingOutput { stream, seq: end });
        }
        if end > sent_seq {
            return Err(ReconstructError::Overrun { stream });
        }
        let acked_seq = rec.client_acked(stream).max(ck.acked_seq).min(sent_seq);
        let write_queue = outgoing[(acked_seq - ck.acked_seq) as usize..].to_vec();

        let read_seq = io.recv_end.get(&stream).copied().unwrap_or(0).max(ck.read_seq());
        let recv_queue = if read_seq == ck.read_seq() && rec.contiguous_end(stream) <= ck.rcv_seq {
            ck.recv_queue.clone()
        } else {
            rec.contiguous_from(stream, read_seq)
                .ok_or(ReconstructError::Trimmed { stream, read_seq })?
        };
        let rcv_seq = read_seq + recv_queue.len() as u64;
        let acked_in = gate.acked_incoming(stream);
        if rcv_seq < acked_in {
            return Err(ReconstructError::MissingInput { stream, have: rcv_seq, acked: acked_in });
        }
        out.insert(stream, SocketState { sent_seq, acked_seq, rcv_seq, recv_queue, write_queue });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::ThreadId;
    use crate::ndlog::OutgoingCopy;

    const S: StreamId = StreamId::new(1, 80);
    const T: StreamId = StreamId::new(2, 80);

    fn data(stream: StreamId, seq: u64, len: usize) -> Segment {
        Segment { stream, to_server: false, kind: SegKind::Data, seq, ack: 0, payload: vec![7; len], probe: false }
    }

    fn ranges(segs: &[Segment]) -> Vec<(StreamId, u64, u64)> {
        segs.iter().filter(|s| s.kind == SegKind::Data).map(|s| (s.stream, s.seq, s.end_seq())).collect()
    }

    #[test]
    fn covered_packet_is_released() {
        let mut g = GateState::new();
        g.open_stream(S);
        assert!(g.offer(data(S, 0, 100)).is_empty());
        g.submit(ReleaseRequest { stream: S, release_seq: 100 });
        assert_eq!(ranges(&g.pump()), vec![(S, 0, 100)]);
    }

    #[test]
    fn second_packet_held_until_covered() {
        let mut g = GateState::new();
        g.open_stream(S);
        g.offer(data(S, 0, 100));
        g.offer(data(S, 100, 100));
        g.submit(ReleaseRequest { stream: S, release_seq: 100 });
        assert_eq!(ranges(&g.pump()), vec![(S, 0, 100)]);
        assert_eq!(g.held_bytes(S), 100);
        g.submit(ReleaseRequest { stream: S, release_seq: 200 });
        assert_eq!(ranges(&g.pump()), vec![(S, 100, 200)]);
    }

    #[test]
    fn fifo_order_across_streams() {
        let mut g = GateState::new();
        g.open_stream(S);
        g.open_stream(T);
        g.offer(data(T, 0, 10));
        g.offer(data(S, 0, 10));
        g.submit(ReleaseRequest { stream: S, release_seq: 10 });
        g.submit(ReleaseRequest { stream: T, release_seq: 10 });
        assert_eq!(ranges(&g.pump()), vec![(S, 0, 10), (T, 0, 10)]);
    }

    #[test]
    fn partial_cover_splits_segment() {
        let mut g = GateState::new();
        g.open_stream(S);
        g.offer(data(S, 0, 100));
        g.submit(ReleaseRequest { stream: S, release_seq: 40 });
        assert_eq!(ranges(&g.pump()), vec![(S, 0, 40)]);
        assert_eq!(g.held_bytes(S), 60);
    }

    #[test]
    fn unknown_stream_request_ignored() {
        let mut g = GateState::new();
        g.submit(ReleaseRequest { stream: S, release_seq: 10 });
        assert!(g.pump().is_empty());
        assert_eq!(g.ignored_requests(), 1);
    }

    #[test]
    fn held_data_forwards_its_ack() {
        let mut g = GateState::new();
        g.open_stream(S);
        let mut seg = data(S, 0, 10);
        seg.ack = 33;
        let out = g.offer(seg);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].kind, SegKind::Ack);
        assert_eq!(out[0].ack, 33);
        assert_eq!(g.acked_incoming(S), 33);
    }

    #[test]
    fn stopped_gate_releases_nothing() {
        let mut g = GateState::new();
        g.open_stream(S);
        g.offer(data(S, 0, 10));
        g.stop();
        g.submit(ReleaseRequest { stream: S, release_seq: 10 });
        assert!(g.pump().is_empty());
    }

    #[test]
    fn record_is_idempotent_and_reassembles() {
        let mut r = PackRecord::new();
        r.record_incoming(S, 0, &[1; 50]);
        r.record_incoming(S, 0, &[1; 50]);
        assert_eq!(r.contiguous_end(S), 50);
        r.record_incoming(T, 50, &[2; 50]);
        assert_eq!(r.contiguous_end(T), 0);
        r.record_incoming(T, 0, &[1; 50]);
        assert_eq!(r.contiguous_end(T), 100);
        let all = r.contiguous_from(T, 0).unwrap();
        assert_eq!(&all[..50], &[1; 50]);
        assert_eq!(&all[50..], &[2; 50]);
        assert_eq!(r.contiguous_from(StreamId::new(9, 9), 0), Some(Vec::new()));
        r.trim(T, 60);
        assert_eq!(r.contiguous_from(T, 50), None);
        assert_eq!(r.contiguous_from(T, 60).unwrap().len(), 40);
    }

    fn copy(stream: StreamId, seq: u64, bytes: &[u8]) -> OutgoingCopy {
        OutgoingCopy { thread: ThreadId(0), call_seq: 0, stream, seq, bytes: bytes.to_vec(), output_seq: 1, order_index: 0 }
    }

    #[test]
    fn quiet_epoch_reconstructs_checkpoint() {
        let ck = SocketState { sent_seq: 10, acked_seq: 8, rcv_seq: 5, recv_queue: vec![9; 2], write_queue: vec![3; 2] };
        let map = BTreeMap::from([(S, ck.clone())]);
        let got = reconstruct_sockets(&map, &EpochLog::new(1), &ReplayedIo::default(), &PackRecord::new(), &GateState::new())
            .unwrap();
        assert_eq!(got[&S], ck);
    }

    #[test]
    fn released_send_and_unread_request() {
        let ck = SocketState::default();
        let map = BTreeMap::from([(S, ck)]);
        let mut log = EpochLog::new(1);
        log.copies.push(copy(S, 0, &[5; 100]));
        let mut rec = PackRecord::new();
        rec.record_incoming(S, 0, &[6; 50]);
        rec.record_client_ack(S, 100);
        let mut gate = GateState::new();
        gate.open_stream(S);
        let mut seg = data(S, 0, 100);
        seg.ack = 50;
        gate.offer(seg);
        let io = ReplayedIo { recv_end: BTreeMap::new(), send_end: BTreeMap::from([(S, 100)]) };
        let got = reconstruct_sockets(&map, &log, &io, &rec, &gate).unwrap();
        assert_eq!(got[&S].sent_seq, 100);
        assert_eq!(got[&S].acked_seq, 100);
        assert_eq!(got[&S].recv_queue, vec![6; 50]);
        assert_eq!(got[&S].rcv_seq, 50);
        assert!(got[&S].write_queue.is_empty());
    }

    #[test]
    fn unreleased_send_goes_to_write_queue() {
        let map = BTreeMap::from([(S, SocketState::default())]);
        let mut log = EpochLog::new(1);
        log.copies.push(copy(S, 0, b"hello"));
        let io = ReplayedIo { recv_end: BTreeMap::new(), send_end: BTreeMap::from([(S, 5)]) };
        let got = reconstruct_sockets(&map, &log, &io, &PackRecord::new(), &GateState::new()).unwrap();
        assert_eq!(got[&S].write_queue, b"hello");
        assert_eq!(got[&S].acked_seq, 0);
    }

    #[test]
    fn acknowledged_gap_is_failure() {
        let map = BTreeMap::from([(S, SocketState::default())]);
        let mut gate = GateState::new();
        let mut ack = data(S, 0, 0);
        ack.kind = SegKind::Ack;
        ack.ack = 20;
        gate.offer(ack);
        let err = reconstruct_sockets(&map, &EpochLog::new(1), &ReplayedIo::default(), &PackRecord::new(), &gate)
            .unwrap_err();
        assert!(matches!(err, ReconstructError::MissingInput { acked: 20, .. }));
    }
}
