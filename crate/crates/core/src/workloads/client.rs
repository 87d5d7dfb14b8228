//! Client side of the simulated transport and the verifying clients.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kv::{Request, Response};
use crate::ids::StreamId;
use crate::net::{Addr, Body, Endpoint, Network, Packet};
use crate::tcp::{SegKind, Segment, TcpEndpoint, DEFAULT_RTO};

const POLL: Duration = Duration::from_millis(2);
const MAX_ERRORS: usize = 20;

#[derive(Default)]
struct Inbox {
    q: Mutex<VecDeque<Segment>>,
    cv: Condvar,
}

struct InboxEndpoint(Arc<Inbox>);

impl Endpoint for InboxEndpoint {
    fn deliver(&self, pkt: Packet) {
        if let Body::Tcp(seg) = pkt.body {
            self.0.q.lock().push_back(seg);
            self.0.cv.notify_all();
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error("connection to port {0} not established")]
    ConnectTimeout(u16),
}

/// One client connection. Every byte ever received is kept so that
/// retransmitted data can be checked against what was already delivered.
pub struct ClientConn {
    net: Arc<Network>,
    stream: StreamId,
    inbox: Arc<Inbox>,
    tcp: TcpEndpoint,
    received: Vec<u8>,
    consumed: usize,
    prefix_mismatches: u64,
}

impl ClientConn {
    pub fn connect(net: &Arc<Network>, client: u32, port: u16, timeout: Duration) -> Result<Self, ClientError> {
        let inbox = Arc::new(Inbox::default());
        net.register(Addr::Client(client), Arc::new(InboxEndpoint(inbox.clone())));
        let stream = StreamId::new(client, port);
        let c = Self {
            net: net.clone(),
            stream,
            inbox,
            tcp: TcpEndpoint::default(),
            received: Vec::new(),
            consumed: 0,
            prefix_mismatches: 0,
        };
        let deadline = Instant::now() + timeout;
        let syn = Segment { stream, to_server: true, kind: SegKind::Syn, seq: 0, ack: 0, payload: Vec::new(), probe: false };
        while Instant::now() < deadline {
            c.transmit(syn.clone());
            let until = (Instant::now() + DEFAULT_RTO).min(deadline);
            while Instant::now() < until {
                for seg in c.take(POLL) {
                    if seg.kind == SegKind::SynAck {
                        return Ok(c);
                    }
                }
            }
        }
        Err(ClientError::ConnectTimeout(port))
    }

    pub fn stream(&self) -> StreamId {
        self.stream
    }

    pub fn prefix_mismatches(&self) -> u64 {
        self.prefix_mismatches
    }

    pub fn received(&self) -> &[u8] {
        &self.received
    }

    fn transmit(&self, seg: Segment) {
        self.net.send(Addr::Client(self.stream.client), Addr::Service, Body::Tcp(seg));
    }

    fn take(&self, wait: Duration) -> Vec<Segment> {
        let mut q = self.inbox.q.lock();
        if q.is_empty() {
            self.inbox.cv.wait_for(&mut q, wait);
        }
        q.drain(..).collect()
    }

    pub fn send(&mut self, bytes: &[u8]) {
        let seg = self.tcp.send(self.stream, true, bytes, Instant::now());
        self.transmit(seg);
    }

    /// Handles arrived segments, waiting up to `wait` for the first one, and
    /// retransmits unacknowledged data when due.
    pub fn poll(&mut self, wait: Duration) {
        for seg in self.take(wait) {
            self.on_segment(seg);
        }
        let now = Instant::now();
        if self.tcp.retransmit_due(now, DEFAULT_RTO) {
            if let Some(seg) = self.tcp.retransmission(self.stream, true, now) {
                self.transmit(seg);
            }
        }
    }

    fn on_segment(&mut self, seg: Segment) {
        match seg.kind {
            SegKind::Data => {
                self.tcp.on_ack(seg.ack);
                let start = seg.seq as usize;
                let overlap_end = (seg.end_seq() as usize).min(self.received.len());
                if start < overlap_end && self.received[start..overlap_end] != seg.payload[..overlap_end - start] {
                    self.prefix_mismatches += 1;
                }
                self.tcp.on_data(seg.seq, &seg.payload);
                let (_, fresh) = self.tcp.read(usize::MAX);
                self.received.extend_from_slice(&fresh);
                self.transmit(self.tcp.ack_segment(self.stream, true));
            }
            SegKind::Ack | SegKind::Fin => {
                self.tcp.on_ack(seg.ack);
                if seg.probe {
                    self.transmit(self.tcp.ack_segment(self.stream, true));
                }
            }
            SegKind::Syn | SegKind::SynAck => {}
        }
    }

    /// Next complete line not yet consumed, without the newline.
    pub fn next_line(&mut self) -> Option<String> {
        let rest = &self.received[self.consumed..];
        let pos = rest.iter().position(|&b| b == b'\n')?;
        let line = String::from_utf8_lossy(&rest[..pos]).into_owned();
        self.consumed += pos + 1;
        Some(line)
    }

    /// Waits for the next line until `deadline`.
    pub fn wait_line(&mut self, deadline: Instant) -> Option<String> {
        loop {
            if let Some(l) = self.next_line() {
                return Some(l);
            }
            if Instant::now() >= deadline {
                return None;
            }
            self.poll(POLL);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvClientConfig {
    pub client: u32,
    pub keys: u32,
    pub set_ratio: f64,
    pub seed: u64,
    pub response_timeout: Duration,
    /// Stop after this many operations.
    pub op_limit: Option<u64>,
}

impl KvClientConfig {
    pub fn new(client: u32, seed: u64) -> Self {
        Self { client, keys: 32, set_ratio: 0.5, seed, response_timeout: Duration::from_secs(5), op_limit: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KvClientReport {
    pub client: u32,
    pub ops: u64,
    pub gets: u64,
    pub sets: u64,
    pub error_count: u64,
    pub errors: Vec<String>,
    pub prefix_mismatches: u64,
    pub stuck: bool,
    pub mean_latency_us: f64,
    /// Arrival time of each response, in milliseconds since the run origin.
    pub arrivals_ms: Vec<f64>,
}

impl KvClientReport {
    fn error(&mut self, e: String) {
        self.error_count += 1;
        if self.errors.len() < MAX_ERRORS {
            self.errors.push(e);
        }
    }
}

/// Closed-loop client over a disjoint key set, checking every response
/// against a shadow map of its own writes.
pub fn run_kv_client(mut conn: ClientConn, cfg: &KvClientConfig, stop: &AtomicBool, origin: Instant) -> KvClientReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((cfg.client as u64) << 32));
    let mut shadow: BTreeMap<String, (String, u64)> = BTreeMap::new();
    let mut rep = KvClientReport { client: cfg.client, ..KvClientReport::default() };
    let mut total_latency = 0.0;
    let mut id = 0u64;
    while !stop.load(Ordering::SeqCst) && cfg.op_limit.map_or(true, |l| rep.ops < l) {
        id += 1;
        let key = format!("c{}k{}", cfg.client, rng.gen_range(0..cfg.keys));
        let req = if rng.gen_bool(cfg.set_ratio) {
            Request::Set { id, key, value: format!("v{}x{id}", cfg.client) }
        } else {
            Request::Get { id, key }
        };
        let sent = Instant::now();
        conn.send(req.encode().as_bytes());
        let Some(line) = conn.wait_line(sent + cfg.response_timeout) else {
            rep.error(format!("no response to request {id}"));
            rep.stuck = true;
            break;
        };
        let now = Instant::now();
        total_latency += now.duration_since(sent).as_secs_f64() * 1e6;
        rep.arrivals_ms.push(now.duration_since(origin).as_secs_f64() * 1e3);
        rep.ops += 1;
        check_response(&req, &line, &mut shadow, &mut rep);
    }
    let grace = Instant::now() + Duration::from_millis(20);
    while Instant::now() < grace {
        conn.poll(POLL);
    }
    while let Some(extra) = conn.next_line() {
        rep.error(format!("unexpected extra response {extra:?}"));
    }
    if rep.ops > 0 {
        rep.mean_latency_us = total_latency / rep.ops as f64;
    }
    rep.prefix_mismatches = conn.prefix_mismatches();
    rep
}

fn check_response(req: &Request, line: &str, shadow: &mut BTreeMap<String, (String, u64)>, rep: &mut KvClientReport) {
    let Some(resp) = Response::parse(line) else {
        rep.error(format!("unparsable response {line:?}"));
        return;
    };
    let (rid, version, value) = match resp {
        Response::Ok { id, version, value, .. } => (id, version, value),
        Response::Err { id, msg } => {
            rep.error(format!("request {id} failed: {msg}"));
            return;
        }
    };
    if rid != req.id() {
        rep.error(format!("response id {rid} while waiting for {}", req.id()));
        return;
    }
    match req {
        Request::Get { key, .. } => {
            rep.gets += 1;
            let (want_v, want_ver) = shadow.get(key).cloned().unwrap_or_else(|| ("-".into(), 0));
            if value != want_v || version != want_ver {
                rep.error(format!("GET {key}: got ({value}, {version}), expected ({want_v}, {want_ver})"));
            }
        }
        Request::Set { key, value: v, .. } => {
            rep.sets += 1;
            let want_ver = shadow.get(key).map_or(0, |e| e.1) + 1;
            if version != want_ver || &value != v {
                rep.error(format!("SET {key}: version {version}, expected {want_ver}"));
            }
            shadow.insert(key.clone(), (v.clone(), want_ver));
        }
    }
}

/// Waits for the batch job's digest line.
pub fn await_digest(conn: &mut ClientConn, timeout: Duration) -> Option<String> {
    let line = conn.wait_line(Instant::now() + timeout)?;
    line.strip_prefix("DIGEST ").map(str::to_string)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub ok: bool,
    pub ops: u64,
    pub error_count: u64,
    pub prefix_mismatches: u64,
    pub mismatches: Vec<String>,
}

/// Combines client reports into one verdict.
pub fn verify_run(reports: &[KvClientReport]) -> Verdict {
    let mut v = Verdict { ok: true, ..Verdict::default() };
    for r in reports {
        v.ops += r.ops;
        v.error_count += r.error_count;
        v.prefix_mismatches += r.prefix_mismatches;
        for e in &r.errors {
            v.mismatches.push(format!("client {}: {e}", r.client));
        }
        if r.prefix_mismatches > 0 {
            v.mismatches.push(format!("client {}: {} retransmitted segments differ from delivered bytes", r.client, r.prefix_mismatches));
        }
    }
    v.ok = v.error_count == 0 && v.prefix_mismatches == 0;
    v
}

/// JSON form of a set of client reports and their verdict.
pub fn client_report_json(reports: &[KvClientReport]) -> serde_json::Value {
    let slim: Vec<_> = reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "client": r.client,
                "ops": r.ops,
                "gets": r.gets,
                "sets": r.sets,
                "errors": r.errors,
                "error_count": r.error_count,
                "prefix_mismatches": r.prefix_mismatches,
                "stuck": r.stuck,
                "mean_latency_us": r.mean_latency_us,
            })
        })
        .collect();
    serde_json::json!({ "verdict": verify_run(reports), "clients": slim })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok(id: u64, version: u64, value: &str) -> String {
        Response::Ok { id, version, value: value.into(), stat: 0, token: "0".into() }.encode().trim_end().to_string()
    }

    #[test]
    fn shadow_map_accepts_consistent_history() {
        let mut shadow = BTreeMap::new();
        let mut rep = KvClientReport::default();
        let set = Request::Set { id: 1, key: "a".into(), value: "x".into() };
        check_response(&set, &ok(1, 1, "x"), &mut shadow, &mut rep);
        let get = Request::Get { id: 2, key: "a".into() };
        check_response(&get, &ok(2, 1, "x"), &mut shadow, &mut rep);
        let miss = Request::Get { id: 3, key: "b".into() };
        check_response(&miss, &ok(3, 0, "-"), &mut shadow, &mut rep);
        assert_eq!(rep.error_count, 0);
        assert!(verify_run(&[rep]).ok);
    }

    #[test]
    fn lost_and_doubled_effects_are_flagged() {
        let mut shadow = BTreeMap::new();
        let mut rep = KvClientReport::default();
        let set = Request::Set { id: 1, key: "a".into(), value: "x".into() };
        check_response(&set, &ok(1, 2, "x"), &mut shadow, &mut rep);
        let get = Request::Get { id: 2, key: "a".into() };
        check_response(&get, &ok(2, 0, "-"), &mut shadow, &mut rep);
        check_response(&get, &ok(1, 1, "x"), &mut shadow, &mut rep);
        assert_eq!(rep.error_count, 3);
        let v = verify_run(&[rep]);
        assert!(!v.ok);
        assert_eq!(v.mismatches.len(), 3);
    }
}
