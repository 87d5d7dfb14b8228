//! Primary and backup hosts: the epoch loop, the logging thread, heartbeat
//! failure detection, log-batch and checkpoint ingestion on the backup, and
//! both failover procedures.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, App, AppFactory, Checkpoint, EpochConfig};
use crate::ids::ThreadId;
use crate::ndlog::{EpochLog, EventLog, LogBatch};
use crate::net::{Addr, Body, Endpoint, Network, Packet};
use crate::netgate::{reconstruct_sockets, GateState, PackRecord, ReleaseRequest};
use crate::runtime::{Mitigation, Phase, ReplayState, RtError, Runtime, RuntimeConfig};
use crate::tcp::{SegKind, Segment};

pub const PRIMARY: Addr = Addr::Host(0);
pub const BACKUP: Addr = Addr::Host(1);

const TICK: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeartbeatConfig {
    pub interval: Duration,
    pub timeout: Duration,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        Self { interval: Duration::from_millis(30), timeout: Duration::from_millis(90) }
    }
}

impl HeartbeatConfig {
    pub fn new(interval: Duration, timeout: Duration) -> Self {
        assert!(timeout >= interval * 2, "heartbeat timeout must be at least twice the interval");
        Self { interval, timeout }
    }
}

#[derive(Debug, Clone)]
pub struct ReplicationConfig {
    pub epoch: EpochConfig,
    pub heartbeat: HeartbeatConfig,
    pub mitigation: Mitigation,
    pub ring_capacity: usize,
    /// Without a backup the server runs unreplicated (stock).
    pub replicated: bool,
    pub stall_tick: Duration,
}

impl Default for ReplicationConfig {
    fn default() -> Self {
        Self {
            epoch: EpochConfig::new(Duration::from_millis(100)),
            heartbeat: HeartbeatConfig::default(),
            mitigation: Mitigation::Off,
            ring_capacity: 1024,
            replicated: true,
            stall_tick: Duration::from_millis(10),
        }
    }
}

impl ReplicationConfig {
    fn runtime(&self) -> RuntimeConfig {
        RuntimeConfig { mitigation: self.mitigation, turn_timeout: self.epoch.turn_timeout() }
    }
}

struct Service {
    stop: Arc<AtomicBool>,
    handles: Mutex<Vec<JoinHandle<()>>>,
}

impl Service {
    fn new() -> Self {
        Self { stop: Arc::new(AtomicBool::new(false)), handles: Mutex::new(Vec::new()) }
    }

    fn spawn(&self, name: &str, f: impl FnOnce(Arc<AtomicBool>) + Send + 'static) {
        let stop = self.stop.clone();
        let h = std::thread::Builder::new().name(name.into()).spawn(move || f(stop)).expect("spawn service thread");
        self.handles.lock().push(h);
    }

    fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
        let hs: Vec<_> = self.handles.lock().drain(..).collect();
        let me = std::thread::current().id();
        for h in hs {
            if h.thread().id() != me {
                let _ = h.join();
            }
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PrimaryMetrics {
    pub checkpoints: u64,
    pub batches: u64,
    pub epoch_faults: u64,
    pub max_pause_us: u64,
    pub backup_failure_detected: bool,
}

pub struct PrimaryHost {
    net: Weak<Network>,
    pub rt: Arc<Runtime>,
    app: Arc<dyn App>,
    cfg: ReplicationConfig,
    alive: AtomicBool,
    direct: Arc<AtomicBool>,
    last_hb: Mutex<Instant>,
    ack: Mutex<Option<u64>>,
    ack_cv: Condvar,
    collector: Mutex<()>,
    epoch: AtomicU64,
    backup_failed: AtomicBool,
    backup_failed_at: Mutex<Option<Instant>>,
    metrics: Mutex<PrimaryMetrics>,
    workers: Mutex<Vec<JoinHandle<Result<(), RtError>>>>,
    svc: Service,
    logger_svc: Service,
}

impl PrimaryHost {
    pub fn new(net: &Arc<Network>, app: Arc<dyn App>, cfg: ReplicationConfig, origin: Instant, seed: u64) -> Arc<Self> {
        let phase = if cfg.replicated { Phase::Record } else { Phase::Live };
        let rt = Arc::new(Runtime::new(origin, seed, phase, cfg.runtime()));
        let direct = Arc::new(AtomicBool::new(!cfg.replicated));
        let host = Arc::new(Self {
            net: Arc::downgrade(net),
            rt,
            app,
            cfg,
            alive: AtomicBool::new(true),
            direct: direct.clone(),
            last_hb: Mutex::new(Instant::now()),
            ack: Mutex::new(None),
            ack_cv: Condvar::new(),
            collector: Mutex::new(()),
            epoch: AtomicU64::new(0),
            backup_failed: AtomicBool::new(false),
            backup_failed_at: Mutex::new(None),
            metrics: Mutex::new(PrimaryMetrics::default()),
            workers: Mutex::new(Vec::new()),
            svc: Service::new(),
            logger_svc: Service::new(),
        });
        let wnet = Arc::downgrade(net);
        host.rt.kernel.set_transmit(Arc::new(move |seg: Segment| {
            let Some(net) = wnet.upgrade() else { return };
            if direct.load(Ordering::SeqCst) {
                net.send(PRIMARY, Addr::Client(seg.stream.client), Body::Tcp(seg));
            } else {
                net.send(PRIMARY, BACKUP, Body::Tcp(seg));
            }
        }));
        net.register(PRIMARY, Arc::new(PrimaryEndpoint(Arc::downgrade(&host))));
        host
    }

    pub fn metrics(&self) -> PrimaryMetrics {
        self.metrics.lock().clone()
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch.load(Ordering::SeqCst)
    }

    pub fn backup_failed_at(&self) -> Option<Instant> {
        *self.backup_failed_at.lock()
    }

    /// Starts the workload threads.
    pub fn boot(&self, threads: &[ThreadId]) -> Result<(), String> {
        let mut ws = self.workers.lock();
        for &t in threads {
            let prog = self.app.clone().program(t, None)?;
            ws.push(self.rt.spawn(t, prog, None));
        }
        Ok(())
    }

    /// Starts the timer and, when replicated, the logging thread.
    pub fn start_services(self: &Arc<Self>) {
        *self.last_hb.lock() = Instant::now();
        let me = Arc::downgrade(self);
        self.svc.spawn("primary-tick", move |stop| ticker_loop(me, stop, |h: &PrimaryHost| h.tick()));
        if self.cfg.replicated {
            let (tx, rx) = bounded(self.cfg.ring_capacity);
            self.rt.set_notifier(Some(tx));
            let me = Arc::downgrade(self);
            self.logger_svc.spawn("logger", move |stop| logging_thread_loop(me, rx, stop));
        }
    }

    pub fn start_epochs(self: &Arc<Self>) {
        if !self.cfg.replicated {
            return;
        }
        let me = Arc::downgrade(self);
        let len = self.cfg.epoch.epoch_len;
        self.svc.spawn("epoch", move |stop| {
            let mut next = Instant::now() + len;
            while !stop.load(Ordering::SeqCst) {
                let now = Instant::now();
                if now < next {
                    std::thread::sleep((next - now).min(TICK));
                    continue;
                }
                let Some(h) = me.upgrade() else { return };
                if !h.is_alive() || h.direct.load(Ordering::SeqCst) {
                    return;
                }
                h.checkpoint_epoch();
                next = Instant::now() + len;
            }
        });
    }

    fn net(&self) -> Option<Arc<Network>> {
        self.net.upgrade()
    }

    fn tick(&self) {
        if !self.is_alive() {
            return;
        }
        let now = Instant::now();
        self.rt.kernel.tick(now);
        if !self.cfg.replicated || self.direct.load(Ordering::SeqCst) {
            return;
        }
        if let Some(net) = self.net() {
            net.send(PRIMARY, BACKUP, Body::Heartbeat);
        }
        let last = *self.last_hb.lock();
        if now.duration_since(last) >= self.cfg.heartbeat.timeout {
            self.failover_backup();
        }
    }

    /// One collection by the logging thread (or the epoch flush).
    fn ship_batch(&self) {
        let _c = self.collector.lock();
        if self.direct.load(Ordering::SeqCst) {
            return;
        }
        let batch = self.rt.log().collect_batch(self.rt.pbsn());
        if let Some(net) = self.net() {
            net.send(PRIMARY, BACKUP, Body::LogBatch(batch.serialize()));
        }
        self.metrics.lock().batches += 1;
    }

    /// Pause, flush the log, capture, ship, wait for the commit ack, resume.
    pub fn checkpoint_epoch(&self) -> bool {
        let started = Instant::now();
        let token = match checkpoint::pause_all(&self.rt, &self.cfg.epoch) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("epoch pause failed: {e}");
                self.metrics.lock().epoch_faults += 1;
                return false;
            }
        };
        let epoch = self.epoch.load(Ordering::SeqCst);
        *self.ack.lock() = None;
        {
            let _c = self.collector.lock();
            if self.direct.load(Ordering::SeqCst) {
                drop(_c);
                self.rt.pause.resume();
                return false;
            }
            let batch = self.rt.log().collect_batch(self.rt.pbsn());
            let ck = checkpoint::capture(&self.rt, &token, self.app.as_ref(), epoch, self.cfg.epoch.incremental && epoch > 0);
            self.rt.swap_log(EventLog::new(epoch + 1));
            if let Some(net) = self.net() {
                net.send(PRIMARY, BACKUP, Body::LogBatch(batch.serialize()));
                net.send(PRIMARY, BACKUP, Body::Checkpoint(ck.serialize()));
            }
        }
        let committed = self.wait_ack(epoch);
        self.epoch.store(epoch + 1, Ordering::SeqCst);
        {
            let mut m = self.metrics.lock();
            m.batches += 1;
            if committed {
                m.checkpoints += 1;
            }
            m.max_pause_us = m.max_pause_us.max(started.elapsed().as_micros() as u64);
        }
        self.rt.pause.resume();
        committed
    }

    fn wait_ack(&self, epoch: u64) -> bool {
        let deadline = Instant::now() + self.cfg.epoch.pause_timeout().max(self.cfg.heartbeat.timeout * 2);
        let mut a = self.ack.lock();
        loop {
            if *a == Some(epoch) {
                return true;
            }
            if self.backup_failed.load(Ordering::SeqCst) || !self.is_alive() {
                return false;
            }
            if Instant::now() >= deadline {
                drop(a);
                log::warn!("checkpoint {epoch} not acknowledged; treating backup as failed");
                self.failover_backup();
                return false;
            }
            self.ack_cv.wait_for(&mut a, TICK);
        }
    }

    /// Backup lost: stop shipping state and serve clients directly.
    pub fn failover_backup(&self) {
        if self.backup_failed.swap(true, Ordering::SeqCst) {
            return;
        }
        *self.backup_failed_at.lock() = Some(Instant::now());
        self.metrics.lock().backup_failure_detected = true;
        {
            let _c = self.collector.lock();
            self.direct.store(true, Ordering::SeqCst);
            self.rt.stop_recording();
            self.rt.set_notifier(None);
        }
        self.logger_svc.stop.store(true, Ordering::SeqCst);
        if let Some(net) = self.net() {
            net.observer.set_enforcing(false);
            net.set_service_route(PRIMARY);
        }
        self.ack_cv.notify_all();
    }

    fn deliver(&self, pkt: Packet) {
        if !self.is_alive() {
            return;
        }
        match pkt.body {
            Body::Tcp(seg) if seg.to_server => self.rt.kernel.on_segment(seg),
            Body::CheckpointAck(e) => {
                *self.ack.lock() = Some(e);
                self.ack_cv.notify_all();
            }
            Body::Heartbeat => *self.last_hb.lock() = Instant::now(),
            _ => {}
        }
    }

    /// Fail-stop.
    pub fn kill(&self) {
        self.alive.store(false, Ordering::SeqCst);
        if let Some(net) = self.net() {
            net.isolate(PRIMARY);
        }
        self.rt.abort();
        self.ack_cv.notify_all();
    }

    pub fn shutdown(&self) {
        self.alive.store(false, Ordering::SeqCst);
        self.rt.abort();
        self.svc.shutdown();
        self.logger_svc.shutdown();
        for h in self.workers.lock().drain(..) {
            let _ = h.join();
        }
    }
}

struct PrimaryEndpoint(Weak<PrimaryHost>);

impl Endpoint for PrimaryEndpoint {
    fn deliver(&self, pkt: Packet) {
        if let Some(h) = self.0.upgrade() {
            h.deliver(pkt);
        }
    }
}

fn ticker_loop<H>(host: Weak<H>, stop: Arc<AtomicBool>, f: impl Fn(&H)) {
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(TICK);
        let Some(h) = host.upgrade() else { return };
        f(&h);
    }
}

/// Drains send notifications, then ships everything logged since the last
/// collection as one batch.
fn logging_thread_loop(host: Weak<PrimaryHost>, rx: Receiver<()>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::SeqCst) {
        match rx.recv_timeout(Duration::from_millis(20)) {
            Ok(()) => {
                while rx.try_recv().is_ok() {}
                let Some(h) = host.upgrade() else { return };
                if !h.is_alive() {
                    return;
                }
                h.ship_batch();
                drop(h);
                std::thread::sleep(Duration::from_micros(50));
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return,
        }
    }
}

/// Stage timings and outcome of a primary failover.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FailoverReport {
    pub recovered: bool,
    pub reason: Option<String>,
    pub unsupported: bool,
    pub restore_ms: f64,
    pub read_log_ms: f64,
    pub replay_ms: f64,
    pub others_ms: f64,
    pub pending_outputs: usize,
    pub replayed_events: usize,
    pub log_events: usize,
    pub checkpoint_epoch: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BackupMetrics {
    pub batches: u64,
    pub checkpoints: u64,
    pub stale_batches: u64,
    pub faults: u64,
    pub released_segments: u64,
}

enum Mode {
    Replicating,
    Recovering,
    Live(Arc<Runtime>),
    Failed,
}

struct BackupState {
    mode: Mode,
    gate: GateState,
    rec: PackRecord,
    log: EpochLog,
    checkpoint: Option<Checkpoint>,
    deferred: VecDeque<(u64, ReleaseRequest)>,
    queued_syns: Vec<Segment>,
}

pub struct BackupHost {
    me: Weak<BackupHost>,
    net: Weak<Network>,
    factory: Arc<dyn AppFactory>,
    cfg: ReplicationConfig,
    origin: Instant,
    seed: u64,
    alive: AtomicBool,
    st: Mutex<BackupState>,
    bbsn: AtomicU64,
    last_hb: Mutex<Instant>,
    primary_failed: AtomicBool,
    detected_at: Mutex<Option<Instant>>,
    live_at: Mutex<Option<Instant>>,
    report: Mutex<Option<FailoverReport>>,
    report_cv: Condvar,
    metrics: Mutex<BackupMetrics>,
    workers: Mutex<Vec<JoinHandle<Result<(), RtError>>>>,
    svc: Service,
}

impl BackupHost {
    pub fn new(
        net: &Arc<Network>,
        factory: Arc<dyn AppFactory>,
        cfg: ReplicationConfig,
        origin: Instant,
        seed: u64,
    ) -> Arc<Self> {
        let host = Arc::new_cyclic(|me| Self {
            me: me.clone(),
            net: Arc::downgrade(net),
            factory,
            cfg,
            origin,
            seed,
            alive: AtomicBool::new(true),
            st: Mutex::new(BackupState {
                mode: Mode::Replicating,
                gate: GateState::new(),
                rec: PackRecord::new(),
                log: EpochLog::new(0),
                checkpoint: None,
                deferred: VecDeque::new(),
                queued_syns: Vec::new(),
            }),
            bbsn: AtomicU64::new(0),
            last_hb: Mutex::new(Instant::now()),
            primary_failed: AtomicBool::new(false),
            detected_at: Mutex::new(None),
            live_at: Mutex::new(None),
            report: Mutex::new(None),
            report_cv: Condvar::new(),
            metrics: Mutex::new(BackupMetrics::default()),
            workers: Mutex::new(Vec::new()),
            svc: Service::new(),
        });
        net.register(BACKUP, Arc::new(BackupEndpoint(Arc::downgrade(&host))));
        host
    }

    pub fn start_services(self: &Arc<Self>) {
        *self.last_hb.lock() = Instant::now();
        let me = Arc::downgrade(self);
        self.svc.spawn("backup-tick", move |stop| ticker_loop(me, stop, |h: &BackupHost| h.tick()));
    }

    fn net(&self) -> Option<Arc<Network>> {
        self.net.upgrade()
    }

    pub fn bbsn(&self) -> u64 {
        self.bbsn.load(Ordering::SeqCst)
    }

    pub fn metrics(&self) -> BackupMetrics {
        self.metrics.lock().clone()
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    pub fn committed_epoch(&self) -> Option<u64> {
        self.st.lock().checkpoint.as_ref().map(|c| c.epoch_id)
    }

    pub fn current_log(&self) -> EpochLog {
        self.st.lock().log.clone()
    }

    pub fn detected_at(&self) -> Option<Instant> {
        *self.detected_at.lock()
    }

    pub fn live_at(&self) -> Option<Instant> {
        *self.live_at.lock()
    }

    /// The recovered runtime once live.
    pub fn live_runtime(&self) -> Option<Arc<Runtime>> {
        match &self.st.lock().mode {
            Mode::Live(rt) => Some(rt.clone()),
            _ => None,
        }
    }

    pub fn report(&self) -> Option<FailoverReport> {
        self.report.lock().clone()
    }

    pub fn wait_report(&self, timeout: Duration) -> Option<FailoverReport> {
        let deadline = Instant::now() + timeout;
        let mut r = self.report.lock();
        while r.is_none() {
            if self.report_cv.wait_until(&mut r, deadline).timed_out() {
                break;
            }
        }
        r.clone()
    }

    fn tick(&self) {
        if !self.is_alive() {
            return;
        }
        let now = Instant::now();
        let live = match &self.st.lock().mode {
            Mode::Live(rt) => Some(rt.clone()),
            _ => None,
        };
        if let Some(rt) = live {
            rt.kernel.tick(now);
            return;
        }
        if self.primary_failed.load(Ordering::SeqCst) {
            return;
        }
        if let Some(net) = self.net() {
            net.send(BACKUP, PRIMARY, Body::Heartbeat);
        }
        let last = *self.last_hb.lock();
        if now.duration_since(last) >= self.cfg.heartbeat.timeout && !self.primary_failed.swap(true, Ordering::SeqCst) {
            *self.detected_at.lock() = Some(now);
            self.trigger_failover();
        }
    }

    fn trigger_failover(&self) {
        let Some(me) = self.self_arc() else { return };
        let h = std::thread::Builder::new()
            .name("failover".into())
            .spawn(move || {
                let r = me.failover_primary();
                *me.report.lock() = Some(r);
                me.report_cv.notify_all();
            })
            .expect("spawn failover thread");
        self.svc.handles.lock().push(h);
    }

    fn self_arc(&self) -> Option<Arc<BackupHost>> {
        self.me.upgrade()
    }

    fn forward_released(&self, net: &Network, segs: Vec<Segment>) {
        if segs.is_empty() {
            return;
        }
        self.metrics.lock().released_segments += segs.len() as u64;
        for seg in segs {
            net.send(BACKUP, Addr::Client(seg.stream.client), Body::Tcp(seg));
        }
    }

    fn apply_deferred(&self, st: &mut BackupState, net: &Network) {
        let bbsn = self.bbsn();
        while let Some(&(oseq, req)) = st.deferred.front() {
            if oseq > bbsn {
                break;
            }
            st.deferred.pop_front();
            net.observer.cover(req.stream, req.release_seq);
            st.gate.submit(req);
        }
        let out = st.gate.pump();
        self.forward_released(net, out);
    }

    /// Commits one log batch: BBSN first, then entries, then releases.
    pub fn on_batch(&self, bytes: &[u8]) {
        let Some(net) = self.net() else { return };
        let mut st = self.st.lock();
        if !matches!(st.mode, Mode::Replicating) {
            return;
        }
        let b = match LogBatch::deserialize(bytes) {
            Ok(b) => b,
            Err(e) => {
                log::error!("undecodable log batch: {e}");
                self.metrics.lock().faults += 1;
                return;
            }
        };
        self.bbsn.fetch_add(1, Ordering::SeqCst);
        self.metrics.lock().batches += 1;
        if b.epoch != st.log.epoch {
            self.metrics.lock().stale_batches += 1;
            if b.epoch > st.log.epoch {
                log::error!("batch for epoch {} ahead of log epoch {}", b.epoch, st.log.epoch);
                self.metrics.lock().faults += 1;
            }
            self.apply_deferred(&mut st, &net);
            return;
        }
        if let Err(e) = st.log.merge(&b) {
            log::error!("log batch does not continue the log: {e}");
            self.metrics.lock().faults += 1;
            return;
        }
        for c in &b.outgoing_copies {
            st.deferred.push_back((c.output_seq, ReleaseRequest { stream: c.stream, release_seq: c.end_seq() }));
        }
        self.apply_deferred(&mut st, &net);
    }

    pub fn on_checkpoint(&self, bytes: &[u8]) {
        let Some(net) = self.net() else { return };
        let mut st = self.st.lock();
        if !matches!(st.mode, Mode::Replicating) {
            return;
        }
        let ck = match Checkpoint::deserialize(bytes) {
            Ok(c) => c,
            Err(e) => {
                log::error!("undecodable checkpoint: {e}");
                self.metrics.lock().faults += 1;
                return;
            }
        };
        let ck = match &st.checkpoint {
            Some(base) => ck.merged_onto(base, self.factory.as_ref()),
            None => Ok(ck),
        };
        let ck = match ck {
            Ok(c) if !c.workload_is_delta => c,
            Ok(_) => {
                log::error!("delta checkpoint without a base");
                self.metrics.lock().faults += 1;
                return;
            }
            Err(e) => {
                log::error!("checkpoint merge failed: {e}");
                self.metrics.lock().faults += 1;
                return;
            }
        };
        for (&stream, s) in &ck.stream_state {
            st.gate.open_stream(stream);
            net.observer.cover(stream, s.sent_seq);
            st.gate.submit(ReleaseRequest { stream, release_seq: s.sent_seq });
            st.rec.trim(stream, s.read_seq());
        }
        st.deferred.clear();
        st.log = EpochLog::new(ck.epoch_id + 1);
        let epoch = ck.epoch_id;
        st.checkpoint = Some(ck);
        self.metrics.lock().checkpoints += 1;
        let out = st.gate.pump();
        self.forward_released(&net, out);
        drop(st);
        net.send(BACKUP, PRIMARY, Body::CheckpointAck(epoch));
    }

    fn deliver(&self, pkt: Packet) {
        if !self.is_alive() {
            return;
        }
        match pkt.body {
            Body::Tcp(seg) if seg.to_server => self.from_client(seg),
            Body::Tcp(seg) => self.from_primary(seg),
            Body::LogBatch(b) => self.on_batch(&b),
            Body::Checkpoint(c) => self.on_checkpoint(&c),
            Body::Heartbeat => *self.last_hb.lock() = Instant::now(),
            Body::CheckpointAck(_) => {}
        }
    }

    fn from_client(&self, seg: Segment) {
        let Some(net) = self.net() else { return };
        let mut st = self.st.lock();
        match &st.mode {
            Mode::Live(rt) => {
                let rt = rt.clone();
                drop(st);
                rt.kernel.on_segment(seg);
                return;
            }
            Mode::Failed => return,
            _ => {}
        }
        match seg.kind {
            SegKind::Syn => {
                st.gate.open_stream(seg.stream);
                st.rec.record_incoming(seg.stream, 0, &[]);
            }
            SegKind::Data | SegKind::Ack | SegKind::Fin => {
                st.rec.record_incoming(seg.stream, seg.seq, &seg.payload);
                st.rec.record_client_ack(seg.stream, seg.ack);
            }
            SegKind::SynAck => {}
        }
        match st.mode {
            Mode::Replicating => {
                drop(st);
                net.send(BACKUP, PRIMARY, Body::Tcp(seg));
            }
            Mode::Recovering if seg.kind == SegKind::Syn => st.queued_syns.push(seg),
            _ => {}
        }
    }

    fn from_primary(&self, seg: Segment) {
        let Some(net) = self.net() else { return };
        let mut st = self.st.lock();
        if !matches!(st.mode, Mode::Replicating) {
            return;
        }
        let out = st.gate.offer(seg);
        drop(st);
        for s in out {
            if s.kind == SegKind::Data {
                self.metrics.lock().released_segments += 1;
            }
            net.send(BACKUP, Addr::Client(s.stream.client), Body::Tcp(s));
        }
    }

    /// Restores the last committed checkpoint, replays the partial epoch up
    /// to the last released output, rebuilds the sockets and goes live.
    pub fn failover_primary(&self) -> FailoverReport {
        let mut report = FailoverReport::default();
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        let (ck, log) = {
            let mut st = self.st.lock();
            st.mode = Mode::Recovering;
            st.gate.stop();
            (st.checkpoint.clone(), st.log.clone())
        };
        let fail = |report: &mut FailoverReport, st: &mut BackupState, why: String| {
            report.recovered = false;
            report.reason = Some(why);
            st.mode = Mode::Failed;
        };
        let Some(ck) = ck else {
            fail(&mut report, &mut self.st.lock(), "no committed checkpoint".into());
            return report;
        };
        report.checkpoint_epoch = ck.epoch_id;
        report.log_events = log.event_count();

        let t = Instant::now();
        let bbsn = self.bbsn();
        let rs = ReplayState::new(log.clone(), bbsn, self.cfg.mitigation, self.cfg.epoch.turn_timeout());
        report.pending_outputs = rs.initial_pending();
        report.read_log_ms = ms(t.elapsed());

        let t = Instant::now();
        let restored = match checkpoint::restore(
            &ck,
            rs,
            self.factory.as_ref(),
            self.cfg.runtime(),
            self.origin,
            self.seed,
        ) {
            Ok(r) => r,
            Err(e) => {
                fail(&mut report, &mut self.st.lock(), format!("restore: {e}"));
                return report;
            }
        };
        let rt = restored.rt.clone();
        let wnet = self.net.clone();
        rt.kernel.set_transmit(Arc::new(move |seg: Segment| {
            if let Some(net) = wnet.upgrade() {
                net.send(BACKUP, Addr::Client(seg.stream.client), Body::Tcp(seg));
            }
        }));
        report.restore_ms = ms(t.elapsed());

        let t = Instant::now();
        match restored.start() {
            Ok(hs) => self.workers.lock().extend(hs),
            Err(e) => {
                rt.abort();
                fail(&mut report, &mut self.st.lock(), format!("restart threads: {e}"));
                return report;
            }
        }
        let limit = self.cfg.epoch.epoch_len * 10 + Duration::from_secs(2);
        let waited = rt.wait_transition(self.cfg.stall_tick, limit);
        report.replayed_events = restored.replay.replayed();
        if let Err(e) = waited {
            report.unsupported = matches!(e, RtError::Unsupported(_));
            rt.abort();
            fail(&mut report, &mut self.st.lock(), e.to_string());
            report.replay_ms = ms(t.elapsed());
            return report;
        }
        report.replay_ms = ms(t.elapsed());

        let t = Instant::now();
        if let Err(e) = rt.pause.pause_all(self.cfg.epoch.pause_timeout()) {
            rt.abort();
            fail(&mut report, &mut self.st.lock(), format!("transition pause: {e}"));
            return report;
        }
        if let Some(e) = rt.failure() {
            rt.abort();
            fail(&mut report, &mut self.st.lock(), e.to_string());
            return report;
        }
        let io = restored.replay.io();
        {
            let mut st = self.st.lock();
            let sockets = match reconstruct_sockets(&ck.stream_state, &log, &io, &st.rec, &st.gate) {
                Ok(s) => s,
                Err(e) => {
                    rt.abort();
                    fail(&mut report, &mut st, format!("socket reconstruction: {e}"));
                    return report;
                }
            };
            rt.go_live(&sockets);
            st.mode = Mode::Live(rt.clone());
            for syn in std::mem::take(&mut st.queued_syns) {
                rt.kernel.on_segment(syn);
            }
        }
        if let Some(net) = self.net() {
            net.observer.set_enforcing(false);
            net.set_service_route(BACKUP);
        }
        rt.kernel.announce();
        rt.pause.resume();
        *self.live_at.lock() = Some(Instant::now());
        report.others_ms = ms(t.elapsed());
        report.recovered = true;
        report
    }

    pub fn kill(&self) {
        self.alive.store(false, Ordering::SeqCst);
        if let Some(net) = self.net() {
            net.isolate(BACKUP);
        }
        if let Mode::Live(rt) = &self.st.lock().mode {
            rt.abort();
        }
    }

    pub fn shutdown(&self) {
        self.alive.store(false, Ordering::SeqCst);
        if let Mode::Live(rt) = &self.st.lock().mode {
            rt.abort();
        }
        self.svc.shutdown();
        for h in self.workers.lock().drain(..) {
            let _ = h.join();
        }
    }
}

struct BackupEndpoint(Weak<BackupHost>);

impl Endpoint for BackupEndpoint {
    fn deliver(&self, pkt: Packet) {
        if let Some(h) = self.0.upgrade() {
            h.deliver(pkt);
        }
    }
}
