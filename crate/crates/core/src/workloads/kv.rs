//! Multi-threaded in-memory key-value server.
//!
//! Wire grammar, one request or response per line:
//!
//! ```text
//! request  = id SP "GET" SP key LF
//!          | id SP "SET" SP key SP value LF
//! response = id SP "OK" SP version SP value SP stat SP token LF
//!          | id SP "ERR" SP message LF
//! ```
//!
//! `key` and `value` contain no whitespace. A GET of a missing key answers
//! version 0 and value `-`. `stat` is the shared statistics counter as read
//! (without a lock) while handling the request, and `token` is 16 hex digits
//! of kernel randomness for a SET and `0` for a GET.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::lockset::Lockset;
use crate::checkpoint::{App, AppFactory};
use crate::ids::{LockId, StreamId, ThreadId};
use crate::ndlog::LockOp;
use crate::runtime::{Op, OpResult, Program, Step, SysCall};

pub const KV_PORT: u16 = 7000;
const RECV_MAX: u32 = 4096;
const RESOURCE_EVERY: u64 = 50;

/// Deliberately broken server behaviour, for checking that verification
/// notices it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KvFault {
    /// Every n-th SET on a worker answers OK without storing.
    LostWrite { every: u64 },
    /// Every n-th response on a worker is sent twice.
    DuplicateResponse { every: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvConfig {
    pub workers: u32,
    pub shards: u32,
    /// Unsynchronized statistics-counter writes per second across all workers.
    pub race_knob: f64,
    /// Offset of the racy-write schedule, as a fraction of its period.
    pub race_phase: f64,
    /// Busy work between reading the counter and storing it in a racy update.
    pub racy_gap: Duration,
    /// Busy work after the racy store, before the worker's next call.
    pub racy_hold: Duration,
    pub fault: Option<KvFault>,
    pub lockset: bool,
}

impl Default for KvConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            shards: 8,
            race_knob: 0.0,
            race_phase: 0.0,
            racy_gap: Duration::from_micros(600),
            racy_hold: Duration::from_millis(4),
            fault: None,
            lockset: cfg!(debug_assertions),
        }
    }
}

impl KvConfig {
    /// Time in nanoseconds of racy-write slot `k`.
    fn slot_ns(&self, k: u64) -> u64 {
        ((k as f64 + self.race_phase) * 1e9 / self.race_knob) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Request {
    Get { id: u64, key: String },
    Set { id: u64, key: String, value: String },
}

impl Request {
    pub fn id(&self) -> u64 {
        match self {
            Self::Get { id, .. } | Self::Set { id, .. } => *id,
        }
    }

    pub fn key(&self) -> &str {
        match self {
            Self::Get { key, .. } | Self::Set { key, .. } => key,
        }
    }

    pub fn encode(&self) -> String {
        match self {
            Self::Get { id, key } => format!("{id} GET {key}\n"),
            Self::Set { id, key, value } => format!("{id} SET {key} {value}\n"),
        }
    }
}

/// Parses one request line (without the newline). The error carries the id
/// text, if any, and a message.
pub fn parse_request(line: &str) -> Result<Request, (String, String)> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    let id_text = parts.first().map(|s| s.to_string()).unwrap_or_else(|| "?".into());
    let id: u64 = parts
        .first()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ("?".to_string(), "bad request id".to_string()))?;
    match parts.as_slice() {
        [_, "GET", key] => Ok(Request::Get { id, key: key.to_string() }),
        [_, "SET", key, value] => Ok(Request::Set { id, key: key.to_string(), value: value.to_string() }),
        [_, "GET", ..] | [_, "SET", ..] => Err((id_text, "wrong argument count".into())),
        [_, cmd, ..] => Err((id_text, format!("unknown command {cmd}"))),
        _ => Err((id_text, "empty request".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Ok { id: u64, version: u64, value: String, stat: u64, token: String },
    Err { id: String, msg: String },
}

impl Response {
    pub fn encode(&self) -> String {
        match self {
            Self::Ok { id, version, value, stat, token } => format!("{id} OK {version} {value} {stat} {token}\n"),
            Self::Err { id, msg } => format!("{id} ERR {msg}\n"),
        }
    }

    pub fn parse(line: &str) -> Option<Response> {
        let mut it = line.splitn(3, ' ');
        let id = it.next()?;
        match it.next()? {
            "OK" => {
                let rest: Vec<&str> = it.next()?.split(' ').collect();
                let [version, value, stat, token] = rest.as_slice() else { return None };
                Some(Self::Ok {
                    id: id.parse().ok()?,
                    version: version.parse().ok()?,
                    value: value.to_string(),
                    stat: stat.parse().ok()?,
                    token: token.to_string(),
                })
            }
            "ERR" => Some(Self::Err { id: id.to_string(), msg: it.next().unwrap_or("").to_string() }),
            _ => None,
        }
    }
}

pub fn shard_of(key: &str, shards: u32) -> u32 {
    let h = key.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    (h % shards as u64) as u32
}

type Store = BTreeMap<String, (String, u64)>;

#[derive(Debug, Default)]
struct Shard {
    map: Store,
    dirty: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Image {
    Full { shards: Vec<Store>, stat: u64, racy_writes: u64 },
    /// Changed keys only; a key mapped to `None` was removed.
    Delta { shards: Vec<BTreeMap<String, Option<(String, u64)>>>, stat: u64, racy_writes: u64 },
}

pub struct KvServer {
    cfg: KvConfig,
    shards: Vec<Mutex<Shard>>,
    /// Shared statistics counter written without synchronization.
    stat: AtomicU64,
    racy_writes: AtomicU64,
    accepted: AtomicU64,
    lockset: Option<Arc<Lockset>>,
}

impl KvServer {
    pub fn new(cfg: KvConfig) -> Arc<Self> {
        Self::with_store(cfg, vec![Store::new(); 0], 0, 0)
    }

    fn with_store(cfg: KvConfig, stores: Vec<Store>, stat: u64, racy_writes: u64) -> Arc<Self> {
        assert!(cfg.workers > 0 && cfg.shards > 0);
        let mut shards: Vec<Mutex<Shard>> = stores.into_iter().map(|map| Mutex::new(Shard { map, dirty: BTreeSet::new() })).collect();
        shards.resize_with(cfg.shards as usize, || Mutex::new(Shard::default()));
        let lockset = cfg.lockset.then(|| Arc::new(Lockset::new()));
        Arc::new(Self {
            cfg,
            shards,
            stat: AtomicU64::new(stat),
            racy_writes: AtomicU64::new(racy_writes),
            accepted: AtomicU64::new(0),
            lockset,
        })
    }

    pub fn config(&self) -> &KvConfig {
        &self.cfg
    }

    /// Connections accepted by workers of this instance.
    pub fn accepted(&self) -> u64 {
        self.accepted.load(Ordering::SeqCst)
    }

    pub fn racy_writes(&self) -> u64 {
        self.racy_writes.load(Ordering::SeqCst)
    }

    pub fn stat(&self) -> u64 {
        self.stat.load(Ordering::Relaxed)
    }

    pub fn lockset(&self) -> Option<&Arc<Lockset>> {
        self.lockset.as_ref()
    }

    pub fn get(&self, key: &str) -> Option<(String, u64)> {
        self.shards[shard_of(key, self.cfg.shards) as usize].lock().map.get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.shards.iter().map(|s| s.lock().map.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn note(&self, var: &str, t: ThreadId, held: Option<u32>, write: bool) {
        if let Some(l) = &self.lockset {
            let held: BTreeSet<LockId> = held.map(LockId).into_iter().collect();
            l.access(var, t, &held, write);
        }
    }
}

impl App for KvServer {
    fn capture(&self, incremental: bool) -> (Vec<u8>, bool) {
        let stat = self.stat.load(Ordering::SeqCst);
        let racy_writes = self.racy_writes.load(Ordering::SeqCst);
        let image = if incremental {
            let shards = self
                .shards
                .iter()
                .map(|s| {
                    let mut s = s.lock();
                    let dirty = std::mem::take(&mut s.dirty);
                    dirty.into_iter().map(|k| { let v = s.map.get(&k).cloned(); (k, v) }).collect()
                })
                .collect();
            Image::Delta { shards, stat, racy_writes }
        } else {
            let shards = self
                .shards
                .iter()
                .map(|s| {
                    let mut s = s.lock();
                    s.dirty.clear();
                    s.map.clone()
                })
                .collect();
            Image::Full { shards, stat, racy_writes }
        };
        (bincode::serialize(&image).expect("serialize store"), incremental)
    }

    fn program(self: Arc<Self>, t: ThreadId, snap: Option<&[u8]>) -> Result<Box<dyn Program>, String> {
        let s = match snap {
            Some(b) => bincode::deserialize(b).map_err(|e| format!("worker snapshot: {e}"))?,
            None => WorkerState::new(t, &self.cfg),
        };
        Ok(Box::new(KvWorker { app: self, t, s }))
    }
}

pub struct KvFactory {
    pub cfg: KvConfig,
}

impl AppFactory for KvFactory {
    fn restore(&self, state: &[u8]) -> Result<Arc<dyn App>, String> {
        match bincode::deserialize(state).map_err(|e| format!("store image: {e}"))? {
            Image::Full { shards, stat, racy_writes } => {
                if shards.len() != self.cfg.shards as usize {
                    return Err(format!("image has {} shards, configured {}", shards.len(), self.cfg.shards));
                }
                Ok(KvServer::with_store(self.cfg.clone(), shards, stat, racy_writes))
            }
            Image::Delta { .. } => Err("cannot restore from a delta image".into()),
        }
    }

    fn merge_delta(&self, base: &[u8], delta: &[u8]) -> Result<Vec<u8>, String> {
        let Image::Full { mut shards, .. } = bincode::deserialize(base).map_err(|e| e.to_string())? else {
            return Err("delta base is not a full image".into());
        };
        let Image::Delta { shards: d, stat, racy_writes } = bincode::deserialize(delta).map_err(|e| e.to_string())? else {
            return Err("not a delta image".into());
        };
        if d.len() != shards.len() {
            return Err("shard count mismatch".into());
        }
        for (m, changes) in shards.iter_mut().zip(d) {
            for (k, v) in changes {
                match v {
                    Some(v) => m.insert(k, v),
                    None => m.remove(&k),
                };
            }
        }
        Ok(bincode::serialize(&Image::Full { shards, stat, racy_writes }).expect("serialize store"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Phase {
    Accept,
    Recv,
    Clock,
    Lock,
    Unlock,
    Random,
    Send,
    Open,
    Close,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WorkerState {
    phase: Phase,
    stream: Option<StreamId>,
    inbuf: Vec<u8>,
    req: Option<Request>,
    bad: Option<(String, String)>,
    now_ns: u64,
    stat_seen: u64,
    version: u64,
    value: String,
    out: Vec<u8>,
    served: u64,
    sets: u64,
    next_slot: u64,
    fd: i64,
}

impl WorkerState {
    fn new(t: ThreadId, _cfg: &KvConfig) -> Self {
        Self {
            phase: Phase::Accept,
            stream: None,
            inbuf: Vec::new(),
            req: None,
            bad: None,
            now_ns: 0,
            stat_seen: 0,
            version: 0,
            value: String::new(),
            out: Vec::new(),
            served: 0,
            sets: 0,
            next_slot: t.0 as u64,
            fd: -1,
        }
    }
}

struct KvWorker {
    app: Arc<KvServer>,
    t: ThreadId,
    s: WorkerState,
}

impl KvWorker {
    fn shard(&self) -> u32 {
        shard_of(self.s.req.as_ref().map(|r| r.key()).unwrap_or(""), self.app.cfg.shards)
    }

    /// Takes the next complete line from the input buffer, if any.
    fn next_line(&mut self) -> Option<String> {
        let pos = self.s.inbuf.iter().position(|&b| b == b'\n')?;
        let line: Vec<u8> = self.s.inbuf.drain(..=pos).collect();
        Some(String::from_utf8_lossy(&line[..pos]).into_owned())
    }

    fn start_next(&mut self) {
        match self.next_line() {
            Some(line) => {
                match parse_request(&line) {
                    Ok(r) => {
                        self.s.req = Some(r);
                        self.s.bad = None;
                    }
                    Err(e) => {
                        self.s.req = None;
                        self.s.bad = Some(e);
                    }
                }
                self.s.phase = Phase::Clock;
            }
            None => self.s.phase = Phase::Recv,
        }
    }

    fn apply(&mut self) {
        let Some(req) = self.s.req.clone() else { return };
        let shard = self.shard();
        self.app.note(&format!("shard{shard}"), self.t, Some(shard), matches!(req, Request::Set { .. }));
        let mut sh = self.app.shards[shard as usize].lock();
        match req {
            Request::Get { key, .. } => {
                let (v, ver) = sh.map.get(&key).cloned().unwrap_or_else(|| ("-".into(), 0));
                self.s.value = v;
                self.s.version = ver;
            }
            Request::Set { key, value, .. } => {
                self.s.sets += 1;
                let ver = sh.map.get(&key).map(|e| e.1).unwrap_or(0) + 1;
                let lost = matches!(self.app.cfg.fault, Some(KvFault::LostWrite { every }) if self.s.sets % every == 0);
                if !lost {
                    sh.map.insert(key.clone(), (value.clone(), ver));
                    sh.dirty.insert(key);
                }
                self.s.value = value;
                self.s.version = ver;
            }
        }
    }

    fn maybe_racy_write(&mut self) {
        let cfg = &self.app.cfg;
        if cfg.race_knob <= 0.0 || self.s.now_ns < cfg.slot_ns(self.s.next_slot) {
            return;
        }
        let workers = cfg.workers as u64;
        while cfg.slot_ns(self.s.next_slot) <= self.s.now_ns {
            self.s.next_slot += workers;
        }
        self.app.note("stat", self.t, None, false);
        let v = self.app.stat.load(Ordering::Relaxed);
        let until = Instant::now() + cfg.racy_gap;
        while Instant::now() < until {
            std::hint::spin_loop();
        }
        self.app.note("stat", self.t, None, true);
        self.app.stat.store(v + 1, Ordering::Relaxed);
        self.app.racy_writes.fetch_add(1, Ordering::SeqCst);
        let until = Instant::now() + cfg.racy_hold;
        while Instant::now() < until {
            std::hint::spin_loop();
        }
    }

    fn finish_response(&mut self, token: String) {
        let resp = match (&self.s.req, &self.s.bad) {
            (Some(r), _) => Response::Ok {
                id: r.id(),
                version: self.s.version,
                value: self.s.value.clone(),
                stat: self.s.stat_seen,
                token,
            },
            (None, Some((id, msg))) => Response::Err { id: id.clone(), msg: msg.clone() },
            (None, None) => Response::Err { id: "?".into(), msg: "no request".into() },
        };
        let mut out = resp.encode().into_bytes();
        if let Some(KvFault::DuplicateResponse { every }) = self.app.cfg.fault {
            if (self.s.served + 1) % every == 0 {
                out.extend_from_slice(&out.clone());
            }
        }
        self.s.out = out;
        self.s.phase = Phase::Send;
    }
}

impl Program for KvWorker {
    fn next_op(&mut self) -> Step {
        let stream = self.s.stream.unwrap_or(StreamId::new(0, KV_PORT));
        Step::Op(match self.s.phase {
            Phase::Accept => Op::Sys(SysCall::StreamAccept),
            Phase::Recv => Op::Sys(SysCall::StreamRecv { stream, max: RECV_MAX }),
            Phase::Clock => Op::Sys(SysCall::ClockRead),
            Phase::Lock => Op::Lock { lock: LockId(self.shard()), op: LockOp::Acquire },
            Phase::Unlock => Op::Lock { lock: LockId(self.shard()), op: LockOp::Release },
            Phase::Random => Op::Sys(SysCall::RandomRead { len: 8 }),
            Phase::Send => Op::Sys(SysCall::StreamSend { stream, bytes: self.s.out.clone() }),
            Phase::Open => Op::Sys(SysCall::ResourceOpen { name: format!("stats-{}", self.t.0) }),
            Phase::Close => Op::Sys(SysCall::ResourceClose { fd: self.s.fd }),
            Phase::Done => return Step::Done,
        })
    }

    fn complete(&mut self, r: OpResult) {
        match self.s.phase {
            Phase::Accept => {
                self.s.stream = r.stream;
                self.app.accepted.fetch_add(1, Ordering::SeqCst);
                self.s.phase = Phase::Recv;
            }
            Phase::Recv => {
                if r.payload.is_empty() {
                    self.s.phase = Phase::Done;
                    return;
                }
                self.s.inbuf.extend_from_slice(&r.payload);
                self.start_next();
            }
            Phase::Clock => {
                self.s.now_ns = r.value as u64;
                if self.app.cfg.race_knob > 0.0 {
                    self.app.note("stat", self.t, None, false);
                }
                self.s.stat_seen = self.app.stat.load(Ordering::Relaxed);
                self.maybe_racy_write();
                self.s.phase = if self.s.req.is_some() { Phase::Lock } else { Phase::Send };
                if self.s.req.is_none() {
                    self.finish_response("0".into());
                }
            }
            Phase::Lock => {
                self.apply();
                self.s.phase = Phase::Unlock;
            }
            Phase::Unlock => {
                if matches!(self.s.req, Some(Request::Set { .. })) {
                    self.s.phase = Phase::Random;
                } else {
                    self.finish_response("0".into());
                }
            }
            Phase::Random => {
                let token: String = r.payload.iter().map(|b| format!("{b:02x}")).collect();
                self.finish_response(token);
            }
            Phase::Send => {
                self.s.served += 1;
                self.s.out.clear();
                if self.s.served % RESOURCE_EVERY == 0 {
                    self.s.phase = Phase::Open;
                } else {
                    self.start_next();
                }
            }
            Phase::Open => {
                self.s.fd = r.value;
                self.s.phase = Phase::Close;
            }
            Phase::Close => {
                self.s.fd = -1;
                self.start_next();
            }
            Phase::Done => {}
        }
    }

    fn snapshot(&self) -> Vec<u8> {
        bincode::serialize(&self.s).expect("serialize worker state")
    }
}
