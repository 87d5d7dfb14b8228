//! In-process network simulator: FIFO links with an optional fixed per-hop
//! delay, a routing entry for the advertised service address, fail-stop host
//! isolation, a global output-release observer and an optional wire trace.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::ids::StreamId;
use crate::tcp::{SegKind, Segment};

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Addr {
    Client(u32),
    Host(u8),
    /// The advertised service address; resolved through the routing table.
    Service,
}

impl std::fmt::Display for Addr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Addr::Client(c) => write!(f, "client{c}"),
            Addr::Host(h) => write!(f, "host{h}"),
            Addr::Service => write!(f, "service"),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Body {
    Tcp(Segment),
    LogBatch(Vec<u8>),
    Checkpoint(Vec<u8>),
    CheckpointAck(u64),
    Heartbeat,
}

#[derive(Debug, Clone)]
pub struct Packet {
    pub src: Addr,
    pub dst: Addr,
    pub body: Body,
}

pub trait Endpoint: Send + Sync {
    fn deliver(&self, pkt: Packet);
}

/// Checks that no server byte reaches a client before a log batch (or a
/// checkpoint) covering it has been committed at the backup.
#[derive(Default)]
pub struct Observer {
    enforcing: AtomicBool,
    covered: Mutex<BTreeMap<StreamId, u64>>,
    violations: AtomicU64,
    details: Mutex<Vec<String>>,
    trace: Mutex<Option<Arc<Tracer>>>,
}

impl Observer {
    pub fn set_enforcing(&self, on: bool) {
        self.enforcing.store(on, Ordering::SeqCst);
    }

    pub fn enforcing(&self) -> bool {
        self.enforcing.load(Ordering::SeqCst)
    }

    pub fn cover(&self, stream: StreamId, upto: u64) {
        let mut c = self.covered.lock();
        let e = c.entry(stream).or_insert(0);
        if upto > *e {
            *e = upto;
            if let Some(t) = self.trace.lock().as_ref() {
                t.cover(stream, upto);
            }
        }
    }

    fn check_delivery(&self, seg: &Segment) {
        if !self.enforcing() || seg.kind != SegKind::Data || seg.to_server {
            return;
        }
        let covered = self.covered.lock().get(&seg.stream).copied().unwrap_or(0);
        if seg.end_seq() > covered {
            self.violations.fetch_add(1, Ordering::SeqCst);
            let mut d = self.details.lock();
            if d.len() < 16 {
                d.push(format!("{}: delivered up to {} but covered only {}", seg.stream, seg.end_seq(), covered));
            }
        }
    }

    pub fn violations(&self) -> u64 {
        self.violations.load(Ordering::SeqCst)
    }

    pub fn violation_details(&self) -> Vec<String> {
        self.details.lock().clone()
    }
}

/// JSON-lines record of the simulated wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t_us: u64,
    pub ev: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<StreamId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to_server: Option<bool>,
    #[serde(default)]
    pub seq: u64,
    #[serde(default)]
    pub ack: u64,
    #[serde(default)]
    pub len: u64,
    #[serde(default)]
    pub enforcing: bool,
}

pub struct Tracer {
    origin: Instant,
    out: Mutex<BufWriter<File>>,
}

impl Tracer {
    pub fn create(path: &Path, origin: Instant) -> std::io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{{\"format\":\"wire-trace\",\"version\":{TRACE_FORMAT_VERSION}}}")?;
        Ok(Self { origin, out: Mutex::new(out) })
    }

    fn write(&self, rec: &TraceRecord) {
        let line = serde_json::to_string(rec).expect("trace record serializes");
        let _ = writeln!(self.out.lock(), "{line}");
    }

    fn now_us(&self) -> u64 {
        self.origin.elapsed().as_micros() as u64
    }

    fn packet(&self, pkt: &Packet, dst: Addr, enforcing: bool) {
        let base = TraceRecord {
            t_us: self.now_us(),
            ev: String::new(),
            src: Some(pkt.src.to_string()),
            dst: Some(dst.to_string()),
            stream: None,
            to_server: None,
            seq: 0,
            ack: 0,
            len: 0,
            enforcing,
        };
        let rec = match &pkt.body {
            Body::Tcp(s) => TraceRecord {
                ev: s.kind.name().to_string(),
                stream: Some(s.stream),
                to_server: Some(s.to_server),
                seq: s.seq,
                ack: s.ack,
                len: s.payload.len() as u64,
                ..base
            },
            Body::LogBatch(b) => TraceRecord { ev: "BATCH".into(), len: b.len() as u64, ..base },
            Body::Checkpoint(b) => TraceRecord { ev: "CKPT".into(), len: b.len() as u64, ..base },
            Body::CheckpointAck(e) => TraceRecord { ev: "CKPT_ACK".into(), seq: *e, ..base },
            Body::Heartbeat => return,
        };
        self.write(&rec);
    }

    fn cover(&self, stream: StreamId, upto: u64) {
        self.write(&TraceRecord {
            t_us: self.now_us(),
            ev: "COVER".into(),
            src: None,
            dst: None,
            stream: Some(stream),
            to_server: None,
            seq: upto,
            ack: 0,
            len: 0,
            enforcing: false,
        });
    }

    pub fn flush(&self) {
        let _ = self.out.lock().flush();
    }
}

enum Msg {
    Pkt(Instant, Packet),
    Stop,
}

pub struct Network {
    tx: Sender<Msg>,
    endpoints: RwLock<HashMap<Addr, Arc<dyn Endpoint>>>,
    service_route: RwLock<Addr>,
    down: RwLock<HashSet<Addr>>,
    pub observer: Arc<Observer>,
    tracer: Mutex<Option<Arc<Tracer>>>,
    delay: Duration,
    handle: Mutex<Option<JoinHandle<()>>>,
    delivered: AtomicU64,
}

impl Network {
    pub fn start(delay: Duration) -> Arc<Self> {
        let (tx, rx) = unbounded();
        let net = Arc::new(Self {
            tx,
            endpoints: RwLock::new(HashMap::new()),
            service_route: RwLock::new(Addr::Host(0)),
            down: RwLock::new(HashSet::new()),
            observer: Arc::new(Observer::default()),
            tracer: Mutex::new(None),
            delay,
            handle: Mutex::new(None),
            delivered: AtomicU64::new(0),
        });
        let weak = Arc::downgrade(&net);
        let h = std::thread::Builder::new()
            .name("net".into())
            .spawn(move || dispatch(weak, rx))
            .expect("spawn network thread");
        *net.handle.lock() = Some(h);
        net
    }

    pub fn register(&self, addr: Addr, ep: Arc<dyn Endpoint>) {
        self.endpoints.write().insert(addr, ep);
    }

    pub fn set_service_route(&self, to: Addr) {
        *self.service_route.write() = to;
    }

    pub fn service_route(&self) -> Addr {
        *self.service_route.read()
    }

    /// Fail-stop isolation of a host: nothing in or out from now on.
    pub fn isolate(&self, addr: Addr) {
        self.down.write().insert(addr);
    }

    pub fn is_down(&self, addr: Addr) -> bool {
        self.down.read().contains(&addr)
    }

    pub fn enable_trace(&self, path: &Path, origin: Instant) -> std::io::Result<()> {
        let t = Arc::new(Tracer::create(path, origin)?);
        *self.observer.trace.lock() = Some(t.clone());
        *self.tracer.lock() = Some(t);
        Ok(())
    }

    pub fn send(&self, src: Addr, dst: Addr, body: Body) {
        if self.is_down(src) {
            return;
        }
        let _ = self.tx.send(Msg::Pkt(Instant::now() + self.delay, Packet { src, dst, body }));
    }

    pub fn delivered(&self) -> u64 {
        self.delivered.load(Ordering::Relaxed)
    }

    pub fn shutdown(&self) {
        let _ = self.tx.send(Msg::Stop);
        if let Some(h) = self.handle.lock().take() {
            let _ = h.join();
        }
        if let Some(t) = self.tracer.lock().take() {
            t.flush();
        }
        self.endpoints.write().clear();
    }
}

fn dispatch(net: std::sync::Weak<Network>, rx: Receiver<Msg>) {
    while let Ok(msg) = rx.recv() {
        let (due, pkt) = match msg {
            Msg::Pkt(due, pkt) => (due, pkt),
            Msg::Stop => return,
        };
        let Some(net) = net.upgrade() else { return };
        let now = Instant::now();
        if due > now {
            std::thread::sleep(due - now);
        }
        let dst = match pkt.dst {
            Addr::Service => net.service_route(),
            a => a,
        };
        if net.is_down(pkt.src) || net.is_down(dst) {
            continue;
        }
        if let Addr::Client(_) = dst {
            if let Body::Tcp(seg) = &pkt.body {
                net.observer.check_delivery(seg);
            }
        }
        if let Some(t) = net.tracer.lock().as_ref() {
            t.packet(&pkt, dst, net.observer.enforcing());
        }
        let ep = net.endpoints.read().get(&dst).cloned();
        if let Some(ep) = ep {
            net.delivered.fetch_add(1, Ordering::Relaxed);
            ep.deliver(Packet { dst, ..pkt });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Sink(Mutex<Vec<Packet>>);

    impl Endpoint for Sink {
        fn deliver(&self, pkt: Packet) {
            self.0.lock().push(pkt);
        }
    }

    fn wait_for(sink: &Sink, n: usize) {
        let until = Instant::now() + Duration::from_secs(2);
        while sink.0.lock().len() < n && Instant::now() < until {
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    #[test]
    fn routes_service_and_drops_isolated_hosts() {
        let net = Network::start(Duration::ZERO);
        let a = Arc::new(Sink(Mutex::new(Vec::new())));
        let b = Arc::new(Sink(Mutex::new(Vec::new())));
        net.register(Addr::Host(0), a.clone());
        net.register(Addr::Host(1), b.clone());
        net.send(Addr::Client(0), Addr::Service, Body::Heartbeat);
        wait_for(&a, 1);
        net.set_service_route(Addr::Host(1));
        net.send(Addr::Client(0), Addr::Service, Body::Heartbeat);
        wait_for(&b, 1);
        net.isolate(Addr::Host(1));
        net.send(Addr::Client(0), Addr::Service, Body::Heartbeat);
        net.send(Addr::Client(0), Addr::Host(0), Body::Heartbeat);
        wait_for(&a, 2);
        net.shutdown();
        assert_eq!(a.0.lock().len(), 2);
        assert_eq!(b.0.lock().len(), 1);
    }

    #[test]
    fn observer_flags_uncovered_delivery() {
        let obs = Observer::default();
        obs.set_enforcing(true);
        let s = StreamId::new(0, 80);
        let seg = Segment { stream: s, to_server: false, kind: SegKind::Data, seq: 0, ack: 0, payload: vec![1; 10], probe: false };
        obs.cover(s, 10);
        obs.check_delivery(&seg);
        assert_eq!(obs.violations(), 0);
        let seg2 = Segment { seq: 10, ..seg };
        obs.check_delivery(&seg2);
        assert_eq!(obs.violations(), 1);
    }
}
