//! Dynamic lockset race check over named shared variables.
//!
//! Each variable moves through virgin, exclusive, shared (read-only) and
//! shared-modified states; a warning is raised when a shared-modified
//! variable's candidate lockset becomes empty.

use std::collections::{BTreeMap, BTreeSet};

use parking_lot::Mutex;

use crate::ids::{LockId, ThreadId};

#[derive(Debug, Clone, PartialEq, Eq)]
enum VarState {
    Exclusive(ThreadId),
    Shared,
    SharedModified,
}

#[derive(Debug)]
struct Var {
    state: VarState,
    candidates: BTreeSet<LockId>,
    reported: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaceReport {
    pub var: String,
    pub thread: ThreadId,
    pub write: bool,
}

#[derive(Debug, Default)]
pub struct Lockset {
    vars: Mutex<BTreeMap<String, Var>>,
    reports: Mutex<Vec<RaceReport>>,
}

impl Lockset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn access(&self, var: &str, thread: ThreadId, held: &BTreeSet<LockId>, write: bool) {
        let mut vars = self.vars.lock();
        let Some(v) = vars.get_mut(var) else {
            vars.insert(
                var.to_string(),
                Var { state: VarState::Exclusive(thread), candidates: held.clone(), reported: false },
            );
            return;
        };
        v.state = match (&v.state, write) {
            (VarState::Exclusive(t), _) if *t == thread => {
                v.candidates = held.clone();
                return;
            }
            (VarState::Exclusive(_), false) | (VarState::Shared, false) => VarState::Shared,
            _ => VarState::SharedModified,
        };
        v.candidates = v.candidates.intersection(held).copied().collect();
        if v.state == VarState::SharedModified && v.candidates.is_empty() && !v.reported {
            v.reported = true;
            self.reports.lock().push(RaceReport { var: var.to_string(), thread, write });
        }
    }

    pub fn reports(&self) -> Vec<RaceReport> {
        self.reports.lock().clone()
    }
}
