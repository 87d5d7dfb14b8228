//! Cooperative pause controller. Workload threads park themselves at hook
//! boundaries or inside interruptible waits; the controller only reports a
//! pause complete once every registered thread is parked or finished.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Op, OpResult};
use crate::ids::ThreadId;

/// Where inside an interposed operation a thread parked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParkPoint {
    /// Before the before-hook; nothing started.
    BeforeHook,
    /// Inside the hook, blocked before the operation took effect.
    Blocked,
    /// Inside the hook, operation executed, after-hook not yet run.
    AfterExec,
}

/// Per-thread state captured while parked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreadSnap {
    pub thread: ThreadId,
    pub in_hook: bool,
    pub syscall_skipped: bool,
    /// The pending operation already took effect before capture.
    pub executed: bool,
    pub pending: Option<Op>,
    pub result: Option<OpResult>,
    pub done: bool,
    pub program: Vec<u8>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PauseError {
    #[error("pause timed out: {parked} of {registered} threads parked")]
    Timeout { parked: usize, registered: usize },
    #[error("runtime aborted")]
    Aborted,
}

#[derive(Default)]
struct Inner {
    registered: BTreeSet<ThreadId>,
    parked: BTreeMap<ThreadId, (ParkPoint, ThreadSnap)>,
    done: BTreeMap<ThreadId, ThreadSnap>,
    breakpoints: BTreeMap<ThreadId, (u64, ParkPoint)>,
    hit: BTreeSet<ThreadId>,
}

#[derive(Default)]
pub struct PauseController {
    requested: AtomicBool,
    aborted: AtomicBool,
    inner: Mutex<Inner>,
    cv: Condvar,
}

/// Snapshots of every thread at the moment the pause completed.
#[derive(Debug, Clone)]
pub struct PauseToken {
    pub threads: Vec<(ParkPoint, ThreadSnap)>,
}

impl PauseController {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, t: ThreadId) {
        self.inner.lock().registered.insert(t);
    }

    pub fn requested(&self) -> bool {
        self.requested.load(Ordering::SeqCst)
    }

    pub fn aborted(&self) -> bool {
        self.aborted.load(Ordering::SeqCst)
    }

    pub fn abort(&self) {
        self.aborted.store(true, Ordering::SeqCst);
        let _g = self.inner.lock();
        self.cv.notify_all();
    }

    /// Makes thread `t` park at `point` of its operation number `seq`
    /// (counted from the thread's start or restore) even without a request.
    pub fn set_breakpoint(&self, t: ThreadId, seq: u64, point: ParkPoint) {
        self.inner.lock().breakpoints.insert(t, (seq, point));
    }

    pub fn breakpoint_hit(&self, t: ThreadId) -> bool {
        self.inner.lock().hit.contains(&t)
    }

    /// Blocks until `t` parks on its breakpoint.
    pub fn wait_breakpoint(&self, t: ThreadId, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut g = self.inner.lock();
        while !g.hit.contains(&t) {
            if self.cv.wait_until(&mut g, deadline).timed_out() {
                return g.hit.contains(&t);
            }
        }
        true
    }

    /// Whether thread `t` should park at `point` of operation `seq`.
    pub fn should_park(&self, t: ThreadId, seq: u64, point: ParkPoint) -> bool {
        if self.requested() {
            return true;
        }
        let g = self.inner.lock();
        matches!(g.breakpoints.get(&t), Some(&(s, p)) if s == seq && p == point)
    }

    /// Parks the calling thread until the pause is lifted.
    pub fn park(&self, point: ParkPoint, snap: ThreadSnap) -> Result<(), PauseError> {
        let t = snap.thread;
        let mut g = self.inner.lock();
        let bp = g.breakpoints.get(&t).is_some_and(|&(_, p)| p == point);
        if bp {
            g.hit.insert(t);
        }
        g.parked.insert(t, (point, snap));
        self.cv.notify_all();
        loop {
            if self.aborted() {
                g.parked.remove(&t);
                return Err(PauseError::Aborted);
            }
            let held = self.requested() || (bp && g.breakpoints.contains_key(&t));
            if !held {
                break;
            }
            self.cv.wait_for(&mut g, Duration::from_millis(20));
        }
        g.parked.remove(&t);
        g.hit.remove(&t);
        Ok(())
    }

    pub fn finish(&self, snap: ThreadSnap) {
        let mut g = self.inner.lock();
        g.done.insert(snap.thread, snap);
        self.cv.notify_all();
    }

    /// Number of registered threads that have not finished.
    pub fn active(&self) -> usize {
        let g = self.inner.lock();
        g.registered.len() - g.done.len()
    }

    pub fn pause_all(&self, timeout: Duration) -> Result<PauseToken, PauseError> {
        self.requested.store(true, Ordering::SeqCst);
        let deadline = Instant::now() + timeout;
        let mut g = self.inner.lock();
        self.cv.notify_all();
        loop {
            if self.aborted() {
                return Err(PauseError::Aborted);
            }
            let settled = g.registered.iter().all(|t| g.parked.contains_key(t) || g.done.contains_key(t));
            if settled {
                let mut threads: Vec<(ParkPoint, ThreadSnap)> = Vec::with_capacity(g.registered.len());
                for t in &g.registered {
                    match g.parked.get(t) {
                        Some(p) => threads.push(p.clone()),
                        None => threads.push((ParkPoint::BeforeHook, g.done[t].clone())),
                    }
                }
                return Ok(PauseToken { threads });
            }
            if self.cv.wait_until(&mut g, deadline.min(Instant::now() + Duration::from_millis(5))).timed_out()
                && Instant::now() >= deadline
            {
                let parked = g.parked.len() + g.done.len();
                let registered = g.registered.len();
                drop(g);
                self.resume();
                return Err(PauseError::Timeout { parked, registered });
            }
        }
    }

    pub fn resume(&self) {
        let mut g = self.inner.lock();
        g.breakpoints.clear();
        self.requested.store(false, Ordering::SeqCst);
        self.cv.notify_all();
    }
}
