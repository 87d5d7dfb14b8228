//! Lock table behind the interposed lock API. Records every completed lock
//! operation in return order; in replay, hands out per-lock turns from the
//! recorded log.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use super::{Interrupt, RtError};
use crate::ids::{LockId, ThreadId};
use crate::ndlog::{EventLog, LockEvent, LockOp, RC_BUSY};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockState {
    pub owner: Option<ThreadId>,
    pub readers: BTreeMap<ThreadId, u32>,
}

impl LockState {
    fn free(&self) -> bool {
        self.owner.is_none() && self.readers.is_empty()
    }
}

struct ReplayLog {
    events: Vec<LockEvent>,
    next: usize,
}

#[derive(Default)]
struct Inner {
    locks: BTreeMap<LockId, LockState>,
    replay: Option<BTreeMap<LockId, ReplayLog>>,
}

#[derive(Default)]
pub struct LockTable {
    inner: Mutex<Inner>,
    cv: Condvar,
}

/// Outcome of one attempt at a lock operation.
enum Attempt {
    Done(i32),
    Wait,
}

const POLL: Duration = Duration::from_millis(2);

impl LockTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> BTreeMap<LockId, LockState> {
        self.inner.lock().locks.iter().filter(|(_, s)| !s.free()).map(|(k, v)| (*k, v.clone())).collect()
    }

    pub fn restore(&self, locks: BTreeMap<LockId, LockState>) {
        self.inner.lock().locks = locks;
    }

    pub fn holds(&self, t: ThreadId, lock: LockId) -> bool {
        let g = self.inner.lock();
        g.locks.get(&lock).is_some_and(|s| s.owner == Some(t) || s.readers.contains_key(&t))
    }

    pub fn enter_replay(&self, logs: &BTreeMap<LockId, Vec<LockEvent>>) {
        let replay = logs.iter().map(|(k, v)| (*k, ReplayLog { events: v.clone(), next: 0 })).collect();
        self.inner.lock().replay = Some(replay);
    }

    pub fn leave_replay(&self) {
        self.inner.lock().replay = None;
        self.cv.notify_all();
    }

    /// Next turn per lock during replay.
    pub fn replay_cursor(&self) -> BTreeMap<LockId, u64> {
        let g = self.inner.lock();
        g.replay.as_ref().map_or_else(BTreeMap::new, |r| r.iter().map(|(k, v)| (*k, v.next as u64)).collect())
    }

    pub fn wake(&self) {
        self.cv.notify_all();
    }

    fn try_op(state: &mut LockState, t: ThreadId, op: LockOp) -> Result<Attempt, RtError> {
        Ok(match op {
            LockOp::Acquire | LockOp::WriteAcquire => {
                if state.free() {
                    state.owner = Some(t);
                    Attempt::Done(0)
                } else {
                    Attempt::Wait
                }
            }
            LockOp::ReadAcquire => {
                if state.owner.is_none() {
                    *state.readers.entry(t).or_insert(0) += 1;
                    Attempt::Done(0)
                } else {
                    Attempt::Wait
                }
            }
            LockOp::TryAcquire => {
                if state.free() {
                    state.owner = Some(t);
                    Attempt::Done(0)
                } else {
                    Attempt::Done(RC_BUSY)
                }
            }
            LockOp::Release => {
                if state.owner == Some(t) {
                    state.owner = None;
                } else if let Some(n) = state.readers.get_mut(&t) {
                    *n -= 1;
                    if *n == 0 {
                        state.readers.remove(&t);
                    }
                } else {
                    return Err(RtError::NotOwner { thread: t });
                }
                Attempt::Done(0)
            }
        })
    }

    /// Performs `op`, appending the completed operation to `log` while the
    /// table is held so the log order is the return order.
    pub fn record(
        &self,
        t: ThreadId,
        lock: LockId,
        op: LockOp,
        log: Option<&EventLog>,
        check: &dyn Fn() -> Option<Interrupt>,
    ) -> Result<i32, Interrupt> {
        let mut g = self.inner.lock();
        loop {
            let state = g.locks.entry(lock).or_default();
            match Self::try_op(state, t, op).map_err(Interrupt::Fault)? {
                Attempt::Done(rc) => {
                    if let Some(log) = log {
                        let turn = log.lock_len(lock);
                        log.append_lock_event(LockEvent { lock, thread: t, op, return_code: rc, turn })
                            .map_err(|e| Interrupt::Fault(RtError::Log(e)))?;
                    }
                    if op == LockOp::Release {
                        self.cv.notify_all();
                    }
                    return Ok(rc);
                }
                Attempt::Wait => {
                    if let Some(i) = check() {
                        return Err(i);
                    }
                    self.cv.wait_for(&mut g, POLL);
                }
            }
        }
    }

    /// Waits for this thread's recorded turn on `lock`, then reproduces the
    /// recorded outcome. Returns `Interrupt::Live` once replay has ended.
    pub fn replay(
        &self,
        t: ThreadId,
        lock: LockId,
        op: LockOp,
        timeout: Duration,
        check: &dyn Fn() -> Option<Interrupt>,
    ) -> Result<i32, Interrupt> {
        let deadline = Instant::now() + timeout;
        let mut g = self.inner.lock();
        loop {
            let inner = &mut *g;
            let Some(replay) = inner.replay.as_mut() else {
                return Err(Interrupt::Live);
            };
            let next = replay.get(&lock).and_then(|r| r.events.get(r.next)).cloned();
            match next {
                Some(e) if e.thread == t => {
                    if e.op != op {
                        return Err(Interrupt::Fault(RtError::Divergence(format!(
                            "{t} on {lock}: expected {}, got {}",
                            e.op.name(),
                            op.name()
                        ))));
                    }
                    if e.return_code != 0 {
                        replay.get_mut(&lock).unwrap().next += 1;
                        self.cv.notify_all();
                        return Ok(e.return_code);
                    }
                    let state = inner.locks.entry(lock).or_default();
                    match Self::try_op(state, t, op).map_err(Interrupt::Fault)? {
                        Attempt::Done(0) => {
                            inner.replay.as_mut().unwrap().get_mut(&lock).unwrap().next += 1;
                            self.cv.notify_all();
                            return Ok(0);
                        }
                        Attempt::Done(rc) => {
                            return Err(Interrupt::Fault(RtError::Divergence(format!(
                                "{t} on {lock}: recorded success, got {rc}"
                            ))))
                        }
                        Attempt::Wait => {}
                    }
                }
                Some(_) => {}
                None => {
                    if let Some(i) = check() {
                        return Err(i);
                    }
                    self.cv.wait_for(&mut g, POLL);
                    continue;
                }
            }
            if let Some(i) = check() {
                return Err(i);
            }
            if Instant::now() >= deadline {
                return Err(Interrupt::Fault(RtError::Divergence(format!(
                    "{t} timed out waiting for its turn on {lock}"
                ))));
            }
            self.cv.wait_for(&mut g, POLL);
        }
    }
}
