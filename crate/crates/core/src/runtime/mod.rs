//! Interposition layer for workload threads. Every lock operation and every
//! simulated system call goes through [`Runtime::perform`], which records it
//! on the primary, reproduces it from the log on a recovering backup, and
//! executes it directly once live.

pub mod kernel;
pub mod locks;
pub mod pause;
pub mod replay;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::Sender;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Writer;
use crate::ids::{LockId, StreamId, ThreadId};
use crate::ndlog::{params_digest, EventLog, LogError, LockOp, Rendezvous, SyscallEvent, SyscallKind};
use crate::netgate::SocketState;

pub use kernel::{Kernel, KernelState, Transmit};
pub use locks::{LockState, LockTable};
pub use pause::{ParkPoint, PauseController, PauseError, PauseToken, ThreadSnap};
pub use replay::{Mitigation, ReplayState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Record,
    Replay,
    Live,
}

impl Phase {
    fn from_u8(v: u8) -> Self {
        match v {
            0 => Self::Record,
            1 => Self::Replay,
            _ => Self::Live,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SysCall {
    ClockRead,
    RandomRead { len: u32 },
    StreamRecv { stream: StreamId, max: u32 },
    StreamSend { stream: StreamId, bytes: Vec<u8> },
    StreamAccept,
    ResourceOpen { name: String },
    ResourceClose { fd: i64 },
    MemoryMap { len: u64 },
}

impl SysCall {
    pub fn kind(&self) -> SyscallKind {
        match self {
            Self::ClockRead => SyscallKind::ClockRead,
            Self::RandomRead { .. } => SyscallKind::RandomRead,
            Self::StreamRecv { .. } => SyscallKind::StreamRecv,
            Self::StreamSend { .. } => SyscallKind::StreamSend,
            Self::StreamAccept => SyscallKind::StreamAccept,
            Self::ResourceOpen { .. } => SyscallKind::ResourceOpen,
            Self::ResourceClose { .. } => SyscallKind::ResourceClose,
            Self::MemoryMap { .. } => SyscallKind::MemoryMap,
        }
    }

    /// Canonical parameter encoding hashed into `params_digest`.
    pub fn canonical(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.kind() as u8);
        match self {
            Self::ClockRead | Self::StreamAccept => {}
            Self::RandomRead { len } => w.u32(*len),
            Self::StreamRecv { stream, max } => {
                w.u32(stream.client);
                w.u16(stream.port);
                w.u32(*max);
            }
            Self::StreamSend { stream, bytes } => {
                w.u32(stream.client);
                w.u16(stream.port);
                w.bytes(bytes);
            }
            Self::ResourceOpen { name } => w.bytes(name.as_bytes()),
            Self::ResourceClose { fd } => w.i64(*fd),
            Self::MemoryMap { len } => w.u64(*len),
        }
        w.finish()
    }

    pub fn digest(&self) -> u64 {
        params_digest(&self.canonical())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Lock { lock: LockId, op: LockOp },
    Sys(SysCall),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpResult {
    /// Lock return code, byte count, descriptor, address or clock value.
    pub value: i64,
    pub payload: Vec<u8>,
    pub stream: Option<StreamId>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RtError {
    #[error("replay divergence: {0}")]
    Divergence(String),
    #[error("unsupported during replay: {0}")]
    Unsupported(String),
    #[error("{thread} released a lock it does not hold")]
    NotOwner { thread: ThreadId },
    #[error("log consistency fault: {0}")]
    Log(#[from] LogError),
    #[error("kernel: {0}")]
    Kernel(String),
    #[error("runtime aborted")]
    Aborted,
}

/// Why an interruptible wait stopped early.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Interrupt {
    Pause,
    Abort,
    /// Replay ended while waiting; re-drive the operation live.
    Live,
    Fault(RtError),
}

/// Per-thread interposition state.
#[derive(Debug, Clone)]
pub struct ThreadCtx {
    pub thread: ThreadId,
    pub in_rr: bool,
    pub in_hook: bool,
    pub syscall_skipped: bool,
    ops: u64,
    call_seq: u64,
    log_epoch: Option<u64>,
}

impl ThreadCtx {
    pub fn new(thread: ThreadId) -> Self {
        Self { thread, in_rr: false, in_hook: false, syscall_skipped: false, ops: 0, call_seq: 0, log_epoch: None }
    }

    /// Number of operations started so far.
    pub fn ops(&self) -> u64 {
        self.ops
    }
}

pub enum Step {
    Op(Op),
    Done,
}

/// A workload thread written as a resumable state machine.
pub trait Program: Send {
    fn next_op(&mut self) -> Step;
    fn complete(&mut self, r: OpResult);
    /// State from which [`Program::complete`] or [`Program::next_op`] can
    /// continue after restore.
    fn snapshot(&self) -> Vec<u8>;
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub mitigation: Mitigation,
    pub turn_timeout: Duration,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self { mitigation: Mitigation::Off, turn_timeout: Duration::from_millis(200) }
    }
}

/// Runtime part of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeState {
    pub threads: Vec<(ParkPoint, ThreadSnap)>,
    pub locks: BTreeMap<LockId, LockState>,
    pub kernel: KernelState,
}

struct Executed {
    result: OpResult,
    stream_seq: Option<u64>,
    rendezvous: Option<Rendezvous>,
}

pub struct Runtime {
    phase: AtomicU8,
    pub kernel: Kernel,
    pub locks: LockTable,
    pub pause: PauseController,
    log: RwLock<Arc<EventLog>>,
    pbsn: Arc<AtomicU64>,
    notify: RwLock<Option<Sender<()>>>,
    replay: RwLock<Option<Arc<ReplayState>>>,
    cfg: RuntimeConfig,
    aborted: AtomicBool,
    failure: Mutex<Option<RtError>>,
    ops: AtomicU64,
}

impl Runtime {
    pub fn new(origin: Instant, seed: u64, phase: Phase, cfg: RuntimeConfig) -> Self {
        Self {
            phase: AtomicU8::new(phase as u8),
            kernel: Kernel::new(origin, seed),
            locks: LockTable::new(),
            pause: PauseController::new(),
            log: RwLock::new(Arc::new(EventLog::new(0))),
            pbsn: Arc::new(AtomicU64::new(0)),
            notify: RwLock::new(None),
            replay: RwLock::new(None),
            cfg,
            aborted: AtomicBool::new(false),
            failure: Mutex::new(None),
            ops: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.cfg
    }

    pub fn phase(&self) -> Phase {
        Phase::from_u8(self.phase.load(Ordering::SeqCst))
    }

    /// Record to live, used when the backup is lost.
    pub fn stop_recording(&self) {
        if self.phase() == Phase::Record {
            self.phase.store(Phase::Live as u8, Ordering::SeqCst);
        }
    }

    pub fn log(&self) -> Arc<EventLog> {
        self.log.read().clone()
    }

    pub fn swap_log(&self, log: EventLog) -> Arc<EventLog> {
        std::mem::replace(&mut *self.log.write(), Arc::new(log))
    }

    pub fn pbsn(&self) -> &Arc<AtomicU64> {
        &self.pbsn
    }

    pub fn set_notifier(&self, tx: Option<Sender<()>>) {
        *self.notify.write() = tx;
    }

    pub fn ops_performed(&self) -> u64 {
        self.ops.load(Ordering::Relaxed)
    }

    pub fn aborted(&self) -> bool {
        self.aborted.load(Ordering::SeqCst)
    }

    pub fn abort(&self) {
        self.aborted.store(true, Ordering::SeqCst);
        self.pause.abort();
        self.wake_all();
    }

    fn wake_all(&self) {
        self.kernel.wake();
        self.locks.wake();
        if let Some(rs) = self.replay.read().as_ref() {
            rs.wake();
        }
    }

    /// Records the first fault and stops every thread.
    pub fn fail(&self, e: RtError) {
        {
            let mut f = self.failure.lock();
            if f.is_none() {
                log::debug!("runtime failure: {e}");
                *f = Some(e);
            }
        }
        self.abort();
    }

    pub fn failure(&self) -> Option<RtError> {
        self.failure.lock().clone()
    }

    // Replay control.

    pub fn enter_replay(&self, rs: ReplayState) -> Arc<ReplayState> {
        let rs = Arc::new(rs);
        self.locks.enter_replay(&rs.log().lock_logs);
        *self.replay.write() = Some(rs.clone());
        self.phase.store(Phase::Replay as u8, Ordering::SeqCst);
        rs
    }

    pub fn replay_state(&self) -> Option<Arc<ReplayState>> {
        self.replay.read().clone()
    }

    /// Waits until replay has reproduced every counted output. Fails on
    /// divergence, or when every remaining thread is blocked without progress.
    pub fn wait_transition(&self, stall_tick: Duration, limit: Duration) -> Result<(), RtError> {
        let rs = self.replay_state().ok_or_else(|| RtError::Kernel("not replaying".into()))?;
        let deadline = Instant::now() + limit;
        let mut last = rs.progress();
        let mut stalled = 0;
        loop {
            if let Some(e) = self.failure() {
                return Err(e);
            }
            if rs.transition_requested() {
                return Ok(());
            }
            let active = self.pause.active();
            if active == 0 {
                let e = RtError::Divergence(format!("all threads finished with {} outputs pending", rs.pending()));
                self.fail(e.clone());
                return Err(e);
            }
            if Instant::now() >= deadline {
                let e = RtError::Divergence("replay did not finish in time".into());
                self.fail(e.clone());
                return Err(e);
            }
            std::thread::sleep(stall_tick);
            let p = rs.progress();
            if p == last && rs.blocked() >= active && !rs.transition_requested() {
                stalled += 1;
                if stalled >= 2 {
                    let e = RtError::Divergence(format!(
                        "replay stalled with {} outputs pending after {} events",
                        rs.pending(),
                        rs.replayed()
                    ));
                    self.fail(e.clone());
                    return Err(e);
                }
            } else {
                stalled = 0;
            }
            last = p;
        }
    }

    /// Installs reconstructed sockets and switches to live execution. Call
    /// with every thread paused.
    pub fn go_live(&self, sockets: &BTreeMap<StreamId, SocketState>) {
        self.kernel.install_sockets(sockets);
        self.locks.leave_replay();
        let rs = self.replay.write().take();
        self.phase.store(Phase::Live as u8, Ordering::SeqCst);
        if let Some(rs) = rs {
            rs.wake();
        }
    }

    // Checkpoint support.

    pub fn capture_state(&self, token: &PauseToken) -> RuntimeState {
        for (_, t) in &token.threads {
            debug_assert!(!t.in_hook || t.pending.is_some());
        }
        RuntimeState { threads: token.threads.clone(), locks: self.locks.snapshot(), kernel: self.kernel.snapshot() }
    }

    pub fn restore_state(&self, state: &RuntimeState, sockets: &BTreeMap<StreamId, SocketState>) {
        self.locks.restore(state.locks.clone());
        self.kernel.restore(&state.kernel, sockets);
    }

    // Threads.

    /// Registers `t` and runs `prog` on a new OS thread.
    pub fn spawn(
        self: &Arc<Self>,
        t: ThreadId,
        mut prog: Box<dyn Program>,
        resume: Option<ThreadSnap>,
    ) -> JoinHandle<Result<(), RtError>> {
        self.pause.register(t);
        let rt = self.clone();
        std::thread::Builder::new()
            .name(format!("w{}", t.0))
            .spawn(move || {
                let mut ctx = ThreadCtx::new(t);
                let r = rt.run_thread(&mut ctx, prog.as_mut(), resume);
                rt.pause.finish(ThreadSnap {
                    thread: t,
                    in_hook: false,
                    syscall_skipped: false,
                    executed: false,
                    pending: None,
                    result: None,
                    done: true,
                    program: prog.snapshot(),
                });
                if let Err(e) = &r {
                    if *e != RtError::Aborted {
                        rt.fail(e.clone());
                    }
                }
                r
            })
            .expect("spawn workload thread")
    }

    pub fn run_thread(
        &self,
        ctx: &mut ThreadCtx,
        prog: &mut dyn Program,
        resume: Option<ThreadSnap>,
    ) -> Result<(), RtError> {
        if let Some(s) = resume {
            if s.done {
                return Ok(());
            }
            if let Some(op) = s.pending {
                ctx.in_hook = s.in_hook;
                ctx.syscall_skipped = s.in_hook && !s.executed;
                let r = if ctx.in_hook && !ctx.syscall_skipped {
                    let captured = s.result.ok_or_else(|| RtError::Kernel("executed op without result".into()))?;
                    self.redrive_executed(ctx, &*prog, &op, captured)?
                } else {
                    self.perform(ctx, &*prog, &op)?
                };
                prog.complete(r);
            }
        }
        loop {
            match prog.next_op() {
                Step::Done => return Ok(()),
                Step::Op(op) => {
                    let r = self.perform(ctx, &*prog, &op)?;
                    prog.complete(r);
                }
            }
        }
    }

    fn park(
        &self,
        ctx: &ThreadCtx,
        prog: &dyn Program,
        op: &Op,
        point: ParkPoint,
        result: Option<&OpResult>,
    ) -> Result<(), RtError> {
        assert!(!ctx.in_rr, "{} parked inside runtime code", ctx.thread);
        let snap = ThreadSnap {
            thread: ctx.thread,
            in_hook: ctx.in_hook,
            syscall_skipped: ctx.syscall_skipped,
            executed: point == ParkPoint::AfterExec,
            pending: Some(op.clone()),
            result: result.cloned(),
            done: false,
            program: prog.snapshot(),
        };
        self.pause.park(point, snap).map_err(|_| RtError::Aborted)
    }

    fn checker(&self, t: ThreadId, seq: u64, replaying: bool) -> impl Fn() -> Option<Interrupt> + '_ {
        move || {
            if self.aborted() {
                Some(Interrupt::Abort)
            } else if self.pause.should_park(t, seq, ParkPoint::Blocked) {
                Some(Interrupt::Pause)
            } else if replaying && self.phase() == Phase::Live {
                Some(Interrupt::Live)
            } else {
                None
            }
        }
    }

    /// Runs one interposed operation to completion.
    pub fn perform(&self, ctx: &mut ThreadCtx, prog: &dyn Program, op: &Op) -> Result<OpResult, RtError> {
        let seq = ctx.ops;
        ctx.ops += 1;
        loop {
            if self.aborted() {
                return Err(RtError::Aborted);
            }
            if self.pause.should_park(ctx.thread, seq, ParkPoint::BeforeHook) {
                self.park(ctx, prog, op, ParkPoint::BeforeHook, None)?;
                continue;
            }
            ctx.in_hook = true;
            ctx.syscall_skipped = false;
            let r = match self.phase() {
                Phase::Record => self.record_op(ctx, prog, op, seq),
                Phase::Replay => self.replay_op(ctx, op, seq),
                Phase::Live => self.live_op(ctx, op, seq),
            };
            match r {
                Ok(res) => {
                    ctx.in_hook = false;
                    self.ops.fetch_add(1, Ordering::Relaxed);
                    return Ok(res);
                }
                Err(Interrupt::Pause) => {
                    self.park(ctx, prog, op, ParkPoint::Blocked, None)?;
                    ctx.in_hook = false;
                }
                Err(Interrupt::Live) => ctx.in_hook = false,
                Err(Interrupt::Abort) => return Err(RtError::Aborted),
                Err(Interrupt::Fault(e)) => {
                    self.fail(e.clone());
                    return Err(e);
                }
            }
        }
    }

    fn execute(&self, call: &SysCall, expect: Option<u64>, check: &dyn Fn() -> Option<Interrupt>) -> Result<Executed, Interrupt> {
        let deadline = Instant::now() + self.cfg.turn_timeout;
        let plain = |value: i64, payload: Vec<u8>| Executed {
            result: OpResult { value, payload, stream: None },
            stream_seq: None,
            rendezvous: None,
        };
        Ok(match call {
            SysCall::ClockRead => {
                let v = self.kernel.now_ns();
                plain(v as i64, v.to_le_bytes().to_vec())
            }
            SysCall::RandomRead { len } => plain(*len as i64, self.kernel.random(*len as usize)),
            SysCall::StreamRecv { stream, max } => {
                let (seq, bytes) = self.kernel.recv(*stream, *max as usize, check)?;
                Executed {
                    result: OpResult { value: bytes.len() as i64, payload: bytes, stream: Some(*stream) },
                    stream_seq: Some(seq),
                    rendezvous: None,
                }
            }
            SysCall::StreamSend { stream, bytes } => {
                let seq = self.kernel.send(*stream, bytes).map_err(Interrupt::Fault)?;
                Executed {
                    result: OpResult { value: bytes.len() as i64, payload: Vec::new(), stream: Some(*stream) },
                    stream_seq: Some(seq),
                    rendezvous: None,
                }
            }
            SysCall::StreamAccept => {
                let s = self.kernel.accept(check)?;
                Executed {
                    result: OpResult { value: s.client as i64, payload: Vec::new(), stream: Some(s) },
                    stream_seq: None,
                    rendezvous: None,
                }
            }
            SysCall::ResourceOpen { name } => {
                let (fd, rv) = self.kernel.resource_open(name, expect, deadline, check)?;
                Executed { rendezvous: Some(rv), ..plain(fd, Vec::new()) }
            }
            SysCall::ResourceClose { fd } => {
                let (rc, rv) = self.kernel.resource_close(*fd, expect, deadline, check)?;
                Executed { rendezvous: Some(rv), ..plain(rc, Vec::new()) }
            }
            SysCall::MemoryMap { len } => {
                let (addr, rv) = self.kernel.memory_map(*len, expect, deadline, check)?;
                Executed { rendezvous: Some(rv), ..plain(addr, Vec::new()) }
            }
        })
    }

    fn record_op(&self, ctx: &mut ThreadCtx, prog: &dyn Program, op: &Op, seq: u64) -> Result<OpResult, Interrupt> {
        let check = self.checker(ctx.thread, seq, false);
        match op {
            Op::Lock { lock, op: lop } => {
                let log = self.log();
                ctx.in_rr = true;
                let r = self.locks.record(ctx.thread, *lock, *lop, Some(&log), &check);
                ctx.in_rr = false;
                Ok(OpResult { value: r? as i64, ..OpResult::default() })
            }
            Op::Sys(call) => {
                let ex = self.execute(call, None, &check)?;
                if self.pause.should_park(ctx.thread, seq, ParkPoint::AfterExec) {
                    self.park(ctx, prog, op, ParkPoint::AfterExec, Some(&ex.result)).map_err(|_| Interrupt::Abort)?;
                }
                if self.phase() == Phase::Record {
                    self.record_after_hook(ctx, call, &ex).map_err(Interrupt::Fault)?;
                }
                Ok(ex.result)
            }
        }
    }

    fn record_after_hook(&self, ctx: &mut ThreadCtx, call: &SysCall, ex: &Executed) -> Result<(), RtError> {
        ctx.in_rr = true;
        let log = self.log();
        if ctx.log_epoch != Some(log.epoch()) {
            ctx.log_epoch = Some(log.epoch());
            ctx.call_seq = 0;
        }
        let kind = call.kind();
        let keep_payload = matches!(kind, SyscallKind::ClockRead | SyscallKind::RandomRead | SyscallKind::StreamRecv);
        let ev = SyscallEvent {
            thread: ctx.thread,
            call_seq: ctx.call_seq,
            kind,
            params_digest: call.digest(),
            result: ex.result.value,
            payload: if keep_payload { ex.result.payload.clone() } else { Vec::new() },
            stream: ex.result.stream,
            stream_seq: ex.stream_seq,
            rendezvous: ex.rendezvous,
            output_seq: None,
            exit_stamp: 0,
        };
        let copy = match call {
            SysCall::StreamSend { stream, bytes } => Some((*stream, ex.stream_seq.unwrap_or(0), bytes.clone())),
            _ => None,
        };
        let is_send = copy.is_some();
        let r = log.append_syscall_event(ev, copy, |e| {
            e.exit_stamp = self.kernel.now_ns();
            if is_send {
                e.output_seq = Some(self.pbsn.load(Ordering::SeqCst) + 1);
            }
        });
        ctx.in_rr = false;
        r?;
        ctx.call_seq += 1;
        if is_send {
            let tx = self.notify.read().clone();
            if let Some(tx) = tx {
                let _ = tx.send(());
            }
        }
        Ok(())
    }

    fn live_op(&self, ctx: &mut ThreadCtx, op: &Op, seq: u64) -> Result<OpResult, Interrupt> {
        let check = self.checker(ctx.thread, seq, false);
        match op {
            Op::Lock { lock, op: lop } => {
                let rc = self.locks.record(ctx.thread, *lock, *lop, None, &check)?;
                Ok(OpResult { value: rc as i64, ..OpResult::default() })
            }
            Op::Sys(call) => Ok(self.execute(call, None, &check)?.result),
        }
    }

    fn verify(ev: &SyscallEvent, call: &SysCall) -> Result<(), Interrupt> {
        if ev.kind != call.kind() || ev.params_digest != call.digest() {
            return Err(Interrupt::Fault(RtError::Divergence(format!(
                "{} call {}: logged {} with digest {:016x}, replay issued {} with digest {:016x}",
                ev.thread,
                ev.call_seq,
                ev.kind.name(),
                ev.params_digest,
                call.kind().name(),
                call.digest()
            ))));
        }
        Ok(())
    }

    fn replay_op(&self, ctx: &mut ThreadCtx, op: &Op, seq: u64) -> Result<OpResult, Interrupt> {
        let Some(rs) = self.replay_state() else { return Err(Interrupt::Live) };
        let check = self.checker(ctx.thread, seq, true);
        match op {
            Op::Lock { lock, op: lop } => {
                rs.enter_blocked();
                let r = self.locks.replay(ctx.thread, *lock, *lop, self.cfg.turn_timeout, &check);
                rs.leave_blocked();
                let rc = r?;
                rs.bump_progress();
                Ok(OpResult { value: rc as i64, ..OpResult::default() })
            }
            Op::Sys(call) => {
                let Some(ev) = rs.next_event(ctx.thread) else {
                    return Err(rs.wait_exhausted(&check));
                };
                Self::verify(&ev, call)?;
                let result = match call.kind() {
                    SyscallKind::StreamAccept => {
                        return Err(Interrupt::Fault(RtError::Unsupported(format!(
                            "{} accepted a connection after the checkpoint",
                            ctx.thread
                        ))))
                    }
                    k if k.is_consumable() => OpResult { value: ev.result, payload: ev.payload.clone(), stream: ev.stream },
                    _ => {
                        let expect = ev.rendezvous.map(|r| r.access_seq);
                        rs.enter_blocked();
                        let r = self.execute(call, expect, &check);
                        rs.leave_blocked();
                        let ex = r?;
                        if ex.result.value != ev.result {
                            return Err(Interrupt::Fault(RtError::Divergence(format!(
                                "{} call {}: {} returned {}, logged {}",
                                ctx.thread,
                                ev.call_seq,
                                ev.kind.name(),
                                ex.result.value,
                                ev.result
                            ))));
                        }
                        ex.result
                    }
                };
                rs.note_io(&ev);
                rs.complete(&ev, &check)?;
                Ok(result)
            }
        }
    }

    /// Continues a restored thread whose pending call had already taken
    /// effect before the checkpoint: the call is not issued again, and its
    /// captured result is checked against the log.
    pub fn redrive_executed(
        &self,
        ctx: &mut ThreadCtx,
        prog: &dyn Program,
        op: &Op,
        captured: OpResult,
    ) -> Result<OpResult, RtError> {
        let seq = ctx.ops;
        ctx.ops += 1;
        if self.pause.should_park(ctx.thread, seq, ParkPoint::AfterExec) {
            self.park(ctx, prog, op, ParkPoint::AfterExec, Some(&captured))?;
        }
        ctx.in_hook = false;
        let (Op::Sys(call), Phase::Replay, Some(rs)) = (op, self.phase(), self.replay_state()) else {
            return Ok(captured);
        };
        let Some(ev) = rs.next_event(ctx.thread) else { return Ok(captured) };
        let check = self.checker(ctx.thread, seq, true);
        let mismatch = Self::verify(&ev, call).is_err()
            || ev.result != captured.value
            || (ev.kind.is_consumable() && ev.kind != SyscallKind::StreamSend && ev.payload != captured.payload);
        if mismatch {
            let e = RtError::Divergence(format!(
                "{} call {}: captured result differs from the log",
                ctx.thread, ev.call_seq
            ));
            self.fail(e.clone());
            return Err(e);
        }
        rs.note_io(&ev);
        match rs.complete(&ev, &check) {
            Ok(()) => Ok(captured),
            Err(Interrupt::Fault(e)) => {
                self.fail(e.clone());
                Err(e)
            }
            Err(_) => Err(RtError::Aborted),
        }
    }
}
