//! A scripted three-thread program for checkpoints taken between the
//! before-hook and the after-hook of an interposed call.

use std::sync::Arc;
use std::time::{Duration, Instant};

use hybrid_replica::checkpoint::{capture, pause_all, restore, App, AppFactory, Checkpoint, EpochConfig};
use hybrid_replica::ids::{LockId, ThreadId};
use hybrid_replica::ndlog::{EpochLog, EventLog, LockOp};
use hybrid_replica::runtime::{
    Mitigation, Op, OpResult, ParkPoint, Phase, Program, ReplayState, RtError, Runtime, RuntimeConfig, Step, SysCall,
};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

const SHARED: LockId = LockId(0);
pub const OPS_PER_ITER: u64 = 6;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Shared {
    /// Folded under `SHARED`, so its value depends on lock order.
    chain: u64,
    per_thread: Vec<u64>,
}

struct MixApp(Mutex<Shared>);

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MixState {
    step: u8,
    iters: u32,
    fd: i64,
    acc: u64,
}

struct MixProg {
    app: Arc<MixApp>,
    t: ThreadId,
    s: MixState,
}

fn fold(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x100_0000_01b3)
}

impl Program for MixProg {
    fn next_op(&mut self) -> Step {
        if self.s.iters == 0 {
            return Step::Done;
        }
        Step::Op(match self.s.step {
            0 => Op::Lock { lock: SHARED, op: LockOp::Acquire },
            1 => Op::Sys(SysCall::RandomRead { len: 8 }),
            2 => Op::Lock { lock: SHARED, op: LockOp::Release },
            3 => Op::Sys(SysCall::ResourceOpen { name: format!("mix-{}", self.t.0) }),
            4 => Op::Sys(SysCall::ResourceClose { fd: self.s.fd }),
            _ => Op::Sys(SysCall::ClockRead),
        })
    }

    fn complete(&mut self, r: OpResult) {
        match self.s.step {
            1 => {
                let v = u64::from_le_bytes(r.payload[..8].try_into().unwrap());
                let mut g = self.app.0.lock();
                g.chain = fold(g.chain, v);
                self.s.acc = fold(self.s.acc, v);
            }
            3 => {
                self.s.fd = r.value;
                self.s.acc = fold(self.s.acc, r.value as u64);
            }
            4 => self.s.acc = fold(self.s.acc, r.value as u64),
            5 => self.s.acc = fold(self.s.acc, r.value as u64),
            _ => {}
        }
        self.s.step += 1;
        if self.s.step as u64 == OPS_PER_ITER {
            self.s.step = 0;
            self.s.iters -= 1;
            if self.s.iters == 0 {
                self.app.0.lock().per_thread[self.t.0 as usize] = self.s.acc;
            }
        }
    }

    fn snapshot(&self) -> Vec<u8> {
        bincode::serialize(&self.s).unwrap()
    }
}

impl App for MixApp {
    fn capture(&self, _incremental: bool) -> (Vec<u8>, bool) {
        (bincode::serialize(&*self.0.lock()).unwrap(), false)
    }

    fn program(self: Arc<Self>, t: ThreadId, snap: Option<&[u8]>) -> Result<Box<dyn Program>, String> {
        let s = match snap {
            Some(b) => bincode::deserialize(b).map_err(|e| e.to_string())?,
            None => MixState { step: 0, iters: ITERS, fd: -1, acc: 0 },
        };
        Ok(Box::new(MixProg { app: self, t, s }))
    }
}

struct MixFactory;

impl AppFactory for MixFactory {
    fn restore(&self, state: &[u8]) -> Result<Arc<dyn App>, String> {
        Ok(Arc::new(MixApp(Mutex::new(bincode::deserialize(state).map_err(|e| e.to_string())?))))
    }

    fn merge_delta(&self, _base: &[u8], delta: &[u8]) -> Result<Vec<u8>, String> {
        Ok(delta.to_vec())
    }
}

const ITERS: u32 = 40;
const THREADS: u32 = 3;
const WAIT: Duration = Duration::from_secs(10);

fn cfg() -> RuntimeConfig {
    RuntimeConfig { mitigation: Mitigation::Off, turn_timeout: Duration::from_millis(500) }
}

pub struct Recorded {
    pub checkpoint: Checkpoint,
    pub log: EpochLog,
    pub final_state: Vec<u8>,
    pub point: ParkPoint,
}

/// Runs the workload under recording with thread 0 held at `point` of its
/// operation `seq`, checkpoints there, and records to completion.
pub fn record(seq: u64, point: ParkPoint) -> Recorded {
    let origin = Instant::now();
    let rt = Arc::new(Runtime::new(origin, 5, Phase::Record, cfg()));
    let app = Arc::new(MixApp(Mutex::new(Shared { chain: 0, per_thread: vec![0; THREADS as usize] })));
    let mut hs = Vec::new();
    if point == ParkPoint::Blocked {
        // Thread 1 holds the shared lock while thread 0 waits for it.
        rt.pause.set_breakpoint(ThreadId(1), 1, ParkPoint::BeforeHook);
        hs.push(rt.spawn(ThreadId(1), app.clone().program(ThreadId(1), None).unwrap(), None));
        assert!(rt.pause.wait_breakpoint(ThreadId(1), WAIT));
    }
    rt.pause.set_breakpoint(ThreadId(0), seq, point);
    for t in 0..THREADS {
        if point == ParkPoint::Blocked && t == 1 {
            continue;
        }
        hs.push(rt.spawn(ThreadId(t), app.clone().program(ThreadId(t), None).unwrap(), None));
    }
    assert!(rt.pause.wait_breakpoint(ThreadId(0), WAIT), "breakpoint not reached");
    let token = pause_all(&rt, &EpochConfig::new(Duration::from_millis(200))).unwrap();
    let checkpoint = capture(&rt, &token, app.as_ref(), 1, false);
    rt.swap_log(EventLog::new(1));
    rt.pause.resume();
    for h in hs {
        h.join().unwrap().unwrap();
    }
    let point = token.threads.iter().find(|(_, s)| s.thread == ThreadId(0)).unwrap().0;
    Recorded { checkpoint, log: rt.log().snapshot(), final_state: app.capture(false).0, point }
}

/// Restores `c` and replays `log`; returns the final workload state.
pub fn replay(c: &Checkpoint, log: EpochLog) -> Result<Vec<u8>, RtError> {
    let c = Checkpoint::deserialize(&c.serialize()).unwrap();
    let events: usize = log.syscall_logs.values().map(Vec::len).sum();
    let rs = ReplayState::new(log, 0, Mitigation::Off, Duration::from_millis(500));
    let restored = restore(&c, rs, &MixFactory, cfg(), Instant::now(), 99).unwrap();
    let hs = restored.start().unwrap();
    let mut first_err = None;
    for h in hs {
        if let Err(e) = h.join().unwrap() {
            first_err.get_or_insert(e);
        }
    }
    if let Some(e) = restored.rt.failure().or(first_err) {
        return Err(e);
    }
    assert_eq!(restored.replay.replayed(), events, "every logged call replayed once");
    Ok(restored.app.capture(false).0)
}


/// A checkpoint position for thread 0 and how its pending call must be treated.
pub struct Case {
    pub name: &'static str,
    pub seq: u64,
    pub point: ParkPoint,
    /// The call had not taken effect and must be issued again.
    pub skipped: bool,
    pub executed: bool,
}

pub const CASES: [Case; 7] = [
    Case { name: "random read, before hook", seq: OPS_PER_ITER * 3 + 1, point: ParkPoint::BeforeHook, skipped: false, executed: false },
    Case { name: "random read, after execution", seq: OPS_PER_ITER * 3 + 1, point: ParkPoint::AfterExec, skipped: false, executed: true },
    Case { name: "resource open, before hook", seq: OPS_PER_ITER * 5 + 3, point: ParkPoint::BeforeHook, skipped: false, executed: false },
    Case { name: "resource open, after execution", seq: OPS_PER_ITER * 5 + 3, point: ParkPoint::AfterExec, skipped: false, executed: true },
    Case { name: "resource close, after execution", seq: OPS_PER_ITER * 2 + 4, point: ParkPoint::AfterExec, skipped: false, executed: true },
    Case { name: "clock read, after execution", seq: OPS_PER_ITER + 5, point: ParkPoint::AfterExec, skipped: false, executed: true },
    Case { name: "lock acquire, blocked", seq: 0, point: ParkPoint::Blocked, skipped: true, executed: false },
];

/// Records, checkpoints at the case position, restores, replays and compares.
pub fn check(c: &Case) -> Result<(), String> {
    let r = record(c.seq, c.point);
    if r.point != c.point {
        return Err(format!("parked at {:?}", r.point));
    }
    let snap = &r.checkpoint.runtime_state.threads.iter().find(|(_, s)| s.thread == ThreadId(0)).unwrap().1;
    if snap.executed != c.executed || (snap.in_hook && !snap.executed) != c.skipped {
        return Err(format!("captured executed={} in_hook={}", snap.executed, snap.in_hook));
    }
    let replayed = replay(&r.checkpoint, r.log).map_err(|e| e.to_string())?;
    if replayed != r.final_state {
        return Err("replayed state differs from the recorded run".into());
    }
    Ok(())
}

/// Marks the executed open at the case position as not executed; replay
/// must then detect the second execution.
pub fn reexecution_is_detected() -> Result<(), String> {
    let mut r = record(OPS_PER_ITER * 5 + 3, ParkPoint::AfterExec);
    for (p, s) in &mut r.checkpoint.runtime_state.threads {
        if s.thread == ThreadId(0) {
            *p = ParkPoint::Blocked;
            s.executed = false;
            s.result = None;
        }
    }
    match replay(&r.checkpoint, r.log) {
        Err(RtError::Divergence(_)) => Ok(()),
        other => Err(format!("expected divergence, got {other:?}")),
    }
}

/// Alters the captured result of an executed random read; replay must
/// detect that it no longer matches the log.
pub fn altered_result_is_detected() -> Result<(), String> {
    let mut r = record(OPS_PER_ITER * 3 + 1, ParkPoint::AfterExec);
    for (_, s) in &mut r.checkpoint.runtime_state.threads {
        if s.thread == ThreadId(0) {
            s.result.as_mut().unwrap().payload[0] ^= 0xff;
        }
    }
    match replay(&r.checkpoint, r.log) {
        Err(RtError::Divergence(_)) => Ok(()),
        other => Err(format!("expected divergence, got {other:?}")),
    }
}
