//! Simulated kernel surface: monotonic clock, random source, TCP streams,
//! a descriptor table and a memory-map allocator.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Interrupt, RtError};
use crate::ids::StreamId;
use crate::ndlog::{Rendezvous, ResourceClass};
use crate::netgate::SocketState;
use crate::tcp::{SegKind, Segment, TcpEndpoint, DEFAULT_RTO};

pub type Transmit = Arc<dyn Fn(Segment) + Send + Sync>;

const POLL: Duration = Duration::from_millis(2);
pub const FIRST_FD: i64 = 3;
pub const MAP_BASE: u64 = 0x1000_0000;
pub const PAGE: u64 = 4096;
/// Returned by close on a descriptor that is not open.
pub const EBADF: i64 = -9;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceState {
    pub counters: BTreeMap<ResourceClass, u64>,
    pub fds: BTreeMap<i64, String>,
    pub next_map: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelState {
    pub resources: ResourceState,
    pub accept_queue: Vec<StreamId>,
}

#[derive(Default)]
struct Sockets {
    streams: BTreeMap<StreamId, TcpEndpoint>,
    accept_queue: VecDeque<StreamId>,
}

pub struct Kernel {
    origin: Instant,
    socks: Mutex<Sockets>,
    sock_cv: Condvar,
    res: Mutex<ResourceState>,
    res_cv: Condvar,
    rng: Mutex<ChaCha8Rng>,
    tx: RwLock<Transmit>,
    rto: Duration,
}

impl Kernel {
    pub fn new(origin: Instant, seed: u64) -> Self {
        Self {
            origin,
            socks: Mutex::new(Sockets::default()),
            sock_cv: Condvar::new(),
            res: Mutex::new(ResourceState { next_map: MAP_BASE, ..ResourceState::default() }),
            res_cv: Condvar::new(),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            tx: RwLock::new(Arc::new(|_| {})),
            rto: DEFAULT_RTO,
        }
    }

    pub fn set_transmit(&self, tx: Transmit) {
        *self.tx.write() = tx;
    }

    fn transmit(&self, seg: Segment) {
        let tx = self.tx.read().clone();
        tx(seg);
    }

    pub fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }

    pub fn origin(&self) -> Instant {
        self.origin
    }

    pub fn random(&self, len: usize) -> Vec<u8> {
        let mut buf = vec![0; len];
        self.rng.lock().fill_bytes(&mut buf);
        buf
    }

    pub fn wake(&self) {
        self.sock_cv.notify_all();
        self.res_cv.notify_all();
    }

    // Streams.

    /// Handles a client-to-server segment.
    pub fn on_segment(&self, seg: Segment) {
        let mut s = self.socks.lock();
        match seg.kind {
            SegKind::Syn => {
                if !s.streams.contains_key(&seg.stream) {
                    s.streams.insert(seg.stream, TcpEndpoint::default());
                    s.accept_queue.push_back(seg.stream);
                    self.sock_cv.notify_all();
                }
                drop(s);
                self.transmit(Segment {
                    stream: seg.stream,
                    to_server: false,
                    kind: SegKind::SynAck,
                    seq: 0,
                    ack: 0,
                    payload: Vec::new(),
                    probe: false,
                });
            }
            SegKind::Data | SegKind::Ack | SegKind::Fin => {
                let Some(ep) = s.streams.get_mut(&seg.stream) else { return };
                ep.on_ack(seg.ack);
                if seg.kind == SegKind::Fin {
                    ep.peer_fin = true;
                }
                if !seg.payload.is_empty() {
                    if ep.on_data(seg.seq, &seg.payload) > 0 {
                        self.sock_cv.notify_all();
                    }
                    let ack = ep.ack_segment(seg.stream, false);
                    drop(s);
                    self.transmit(ack);
                }
            }
            SegKind::SynAck => {}
        }
    }

    /// Retransmits everything whose timer expired.
    pub fn tick(&self, now: Instant) {
        let mut out = Vec::new();
        {
            let mut s = self.socks.lock();
            for (id, ep) in s.streams.iter_mut() {
                if ep.retransmit_due(now, self.rto) {
                    out.extend(ep.retransmission(*id, false, now));
                }
            }
        }
        for seg in out {
            self.transmit(seg);
        }
    }

    pub fn accept(&self, check: &dyn Fn() -> Option<Interrupt>) -> Result<StreamId, Interrupt> {
        let mut s = self.socks.lock();
        loop {
            if let Some(id) = s.accept_queue.pop_front() {
                return Ok(id);
            }
            if let Some(i) = check() {
                return Err(i);
            }
            self.sock_cv.wait_for(&mut s, POLL);
        }
    }

    /// Blocks until at least one byte is readable. Returns the stream sequence
    /// number of the first byte and the bytes.
    pub fn recv(
        &self,
        stream: StreamId,
        max: usize,
        check: &dyn Fn() -> Option<Interrupt>,
    ) -> Result<(u64, Vec<u8>), Interrupt> {
        let mut s = self.socks.lock();
        loop {
            let Some(ep) = s.streams.get_mut(&stream) else {
                return Err(Interrupt::Fault(RtError::Kernel(format!("recv on unknown stream {stream}"))));
            };
            if !ep.recv_queue.is_empty() {
                return Ok(ep.read(max));
            }
            if let Some(i) = check() {
                return Err(i);
            }
            self.sock_cv.wait_for(&mut s, POLL);
        }
    }

    /// Queues and transmits; returns the sequence number of the first byte.
    pub fn send(&self, stream: StreamId, bytes: &[u8]) -> Result<u64, RtError> {
        let seg = {
            let mut s = self.socks.lock();
            let ep = s
                .streams
                .get_mut(&stream)
                .ok_or_else(|| RtError::Kernel(format!("send on unknown stream {stream}")))?;
            ep.send(stream, false, bytes, Instant::now())
        };
        let seq = seg.seq;
        self.transmit(seg);
        Ok(seq)
    }

    pub fn sockets(&self) -> BTreeMap<StreamId, SocketState> {
        self.socks.lock().streams.iter().map(|(k, v)| (*k, v.to_state())).collect()
    }

    pub fn socket(&self, stream: StreamId) -> Option<SocketState> {
        self.socks.lock().streams.get(&stream).map(TcpEndpoint::to_state)
    }

    pub fn install_sockets(&self, map: &BTreeMap<StreamId, SocketState>) {
        let mut s = self.socks.lock();
        s.streams = map.iter().map(|(k, v)| (*k, TcpEndpoint::from_state(v))).collect();
        self.sock_cv.notify_all();
    }

    /// Announces a takeover: retransmits unacknowledged output and sends a
    /// probe ack on every stream so peers resend theirs immediately.
    pub fn announce(&self) {
        let now = Instant::now();
        let mut out = Vec::new();
        {
            let mut s = self.socks.lock();
            for (id, ep) in s.streams.iter_mut() {
                out.extend(ep.retransmission(*id, false, now));
                let mut probe = ep.ack_segment(*id, false);
                probe.probe = true;
                out.push(probe);
            }
        }
        for seg in out {
            self.transmit(seg);
        }
    }

    // Shared kernel resources, ordered by rendezvous sequence numbers.

    fn rendezvous<T>(
        &self,
        class: ResourceClass,
        expect: Option<u64>,
        deadline: Instant,
        check: &dyn Fn() -> Option<Interrupt>,
        op: impl FnOnce(&mut ResourceState) -> T,
    ) -> Result<(T, Rendezvous), Interrupt> {
        let mut r = self.res.lock();
        if let Some(seq) = expect {
            loop {
                let cur = r.counters.get(&class).copied().unwrap_or(0);
                if cur + 1 == seq {
                    break;
                }
                if cur >= seq {
                    return Err(Interrupt::Fault(RtError::Divergence(format!(
                        "{class:?} access {seq} already passed (counter {cur})"
                    ))));
                }
                if let Some(i) = check() {
                    return Err(i);
                }
                if Instant::now() >= deadline {
                    return Err(Interrupt::Fault(RtError::Divergence(format!(
                        "timed out waiting for {class:?} access {seq}"
                    ))));
                }
                self.res_cv.wait_for(&mut r, POLL);
            }
        }
        let out = op(&mut r);
        let c = r.counters.entry(class).or_insert(0);
        *c += 1;
        let rv = Rendezvous { class, access_seq: *c };
        self.res_cv.notify_all();
        Ok((out, rv))
    }

    pub fn resource_open(
        &self,
        name: &str,
        expect: Option<u64>,
        deadline: Instant,
        check: &dyn Fn() -> Option<Interrupt>,
    ) -> Result<(i64, Rendezvous), Interrupt> {
        self.rendezvous(ResourceClass::DescriptorTable, expect, deadline, check, |r| {
            let mut fd = FIRST_FD;
            while r.fds.contains_key(&fd) {
                fd += 1;
            }
            r.fds.insert(fd, name.to_string());
            fd
        })
    }

    pub fn resource_close(
        &self,
        fd: i64,
        expect: Option<u64>,
        deadline: Instant,
        check: &dyn Fn() -> Option<Interrupt>,
    ) -> Result<(i64, Rendezvous), Interrupt> {
        self.rendezvous(ResourceClass::DescriptorTable, expect, deadline, check, |r| {
            if r.fds.remove(&fd).is_some() {
                0
            } else {
                EBADF
            }
        })
    }

    pub fn memory_map(
        &self,
        len: u64,
        expect: Option<u64>,
        deadline: Instant,
        check: &dyn Fn() -> Option<Interrupt>,
    ) -> Result<(i64, Rendezvous), Interrupt> {
        self.rendezvous(ResourceClass::MemoryMap, expect, deadline, check, |r| {
            let addr = r.next_map;
            r.next_map += len.div_ceil(PAGE).max(1) * PAGE;
            addr as i64
        })
    }

    pub fn snapshot(&self) -> KernelState {
        KernelState {
            resources: self.res.lock().clone(),
            accept_queue: self.socks.lock().accept_queue.iter().copied().collect(),
        }
    }

    pub fn restore(&self, state: &KernelState, sockets: &BTreeMap<StreamId, SocketState>) {
        *self.res.lock() = state.resources.clone();
        let mut s = self.socks.lock();
        s.streams = sockets.iter().map(|(k, v)| (*k, TcpEndpoint::from_state(v))).collect();
        s.accept_queue = state.accept_queue.iter().copied().collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn never() -> Option<Interrupt> {
        None
    }

    fn far() -> Instant {
        Instant::now() + Duration::from_secs(5)
    }

    #[test]
    fn descriptors_take_lowest_free_slot() {
        let k = Kernel::new(Instant::now(), 1);
        let (a, ra) = k.resource_open("a", None, far(), &never).unwrap();
        let (b, rb) = k.resource_open("b", None, far(), &never).unwrap();
        assert_eq!((a, b), (3, 4));
        assert_eq!((ra.access_seq, rb.access_seq), (1, 2));
        assert_eq!(k.resource_close(a, None, far(), &never).unwrap().0, 0);
        assert_eq!(k.resource_close(a, None, far(), &never).unwrap().0, EBADF);
        assert_eq!(k.resource_open("c", None, far(), &never).unwrap().0, 3);
    }

    #[test]
    fn rendezvous_orders_replayed_opens() {
        let k = Arc::new(Kernel::new(Instant::now(), 1));
        let k2 = k.clone();
        let late = std::thread::spawn(move || k2.resource_open("second", Some(2), far(), &never).unwrap());
        std::thread::sleep(Duration::from_millis(20));
        let first = k.resource_open("first", Some(1), far(), &never).unwrap();
        let second = late.join().unwrap();
        assert_eq!(first.0, 3);
        assert_eq!(second.0, 4);
    }

    #[test]
    fn mmap_rounds_to_pages() {
        let k = Kernel::new(Instant::now(), 1);
        let (a, _) = k.memory_map(1, None, far(), &never).unwrap();
        let (b, _) = k.memory_map(5000, None, far(), &never).unwrap();
        let (c, _) = k.memory_map(1, None, far(), &never).unwrap();
        assert_eq!(a as u64, MAP_BASE);
        assert_eq!(b as u64, MAP_BASE + PAGE);
        assert_eq!(c as u64, MAP_BASE + 3 * PAGE);
    }

    #[test]
    fn syn_data_recv_send() {
        let k = Kernel::new(Instant::now(), 1);
        let sent = Arc::new(Mutex::new(Vec::new()));
        let s2 = sent.clone();
        k.set_transmit(Arc::new(move |seg| s2.lock().push(seg)));
        let id = StreamId::new(0, 80);
        let mk = |kind, seq, payload: &[u8]| Segment { stream: id, to_server: true, kind, seq, ack: 0, payload: payload.to_vec(), probe: false };
        k.on_segment(mk(SegKind::Syn, 0, b""));
        assert_eq!(k.accept(&never).unwrap(), id);
        k.on_segment(mk(SegKind::Data, 0, b"ping"));
        assert_eq!(k.recv(id, 64, &never).unwrap(), (0, b"ping".to_vec()));
        assert_eq!(k.send(id, b"pong").unwrap(), 0);
        let kinds: Vec<_> = sent.lock().iter().map(|s| s.kind).collect();
        assert_eq!(kinds, vec![SegKind::SynAck, SegKind::Ack, SegKind::Data]);
    }
}
