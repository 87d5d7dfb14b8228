//! Replay cursor: hands out each thread's next logged syscall, counts down
//! the outputs that must be reproduced, and optionally enforces the recorded
//! exit order and exit spacing.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use super::{Interrupt, RtError};
use crate::ids::ThreadId;
use crate::ndlog::{count_pending_outputs, EpochLog, SyscallEvent, SyscallKind};
use crate::netgate::ReplayedIo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Mitigation {
    #[default]
    Off,
    OrderOnly,
    OrderPlusTiming,
}

impl Mitigation {
    pub const ALL: [Mitigation; 3] = [Self::Off, Self::OrderOnly, Self::OrderPlusTiming];

    pub fn name(self) -> &'static str {
        match self {
            Self::Off => "off",
            Self::OrderOnly => "order_only",
            Self::OrderPlusTiming => "order_plus_timing",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

const POLL: Duration = Duration::from_millis(2);

#[derive(Debug, Default)]
struct Cursor {
    next_call: BTreeMap<ThreadId, usize>,
    next_order: usize,
    last_exit: Option<Instant>,
    pending: usize,
    transition: bool,
    io: ReplayedIo,
    progress: u64,
    blocked: usize,
    replayed: usize,
}

pub struct ReplayState {
    log: EpochLog,
    bbsn: u64,
    mitigation: Mitigation,
    timeout: Duration,
    /// Position in the recorded exit order, for events that have one.
    order_pos: HashMap<(ThreadId, u64), usize>,
    /// Recorded gap to the previous exit, per order position.
    deltas: Vec<u64>,
    initial_pending: usize,
    cur: Mutex<Cursor>,
    cv: Condvar,
}

impl ReplayState {
    pub fn new(log: EpochLog, bbsn: u64, mitigation: Mitigation, timeout: Duration) -> Self {
        let pending = count_pending_outputs(&log, bbsn);
        let mut order_pos = HashMap::new();
        let mut deltas = Vec::new();
        let mut prev: Option<u64> = None;
        for o in &log.order_log {
            let present = log.syscall_logs.get(&o.thread).is_some_and(|v| (o.call_seq as usize) < v.len());
            if !present {
                break;
            }
            order_pos.insert((o.thread, o.call_seq), deltas.len());
            deltas.push(prev.map_or(0, |p| o.exit_stamp.saturating_sub(p)));
            prev = Some(o.exit_stamp);
        }
        let cur = Cursor { pending, transition: pending == 0, ..Cursor::default() };
        Self {
            log,
            bbsn,
            mitigation,
            timeout,
            order_pos,
            deltas,
            initial_pending: pending,
            cur: Mutex::new(cur),
            cv: Condvar::new(),
        }
    }

    pub fn log(&self) -> &EpochLog {
        &self.log
    }

    pub fn bbsn(&self) -> u64 {
        self.bbsn
    }

    pub fn initial_pending(&self) -> usize {
        self.initial_pending
    }

    pub fn pending(&self) -> usize {
        self.cur.lock().pending
    }

    pub fn transition_requested(&self) -> bool {
        self.cur.lock().transition
    }

    pub fn progress(&self) -> u64 {
        self.cur.lock().progress
    }

    pub fn blocked(&self) -> usize {
        self.cur.lock().blocked
    }

    pub fn replayed(&self) -> usize {
        self.cur.lock().replayed
    }

    pub fn io(&self) -> ReplayedIo {
        self.cur.lock().io.clone()
    }

    pub fn bump_progress(&self) {
        self.cur.lock().progress += 1;
        self.cv.notify_all();
    }

    pub fn wake(&self) {
        self.cv.notify_all();
    }

    pub fn enter_blocked(&self) {
        self.cur.lock().blocked += 1;
    }

    pub fn leave_blocked(&self) {
        self.cur.lock().blocked -= 1;
    }

    pub fn next_event(&self, t: ThreadId) -> Option<SyscallEvent> {
        let idx = self.cur.lock().next_call.get(&t).copied().unwrap_or(0);
        self.log.syscall_logs.get(&t).and_then(|v| v.get(idx)).cloned()
    }

    /// Blocks a thread whose log is exhausted until replay ends.
    pub fn wait_exhausted(&self, check: &dyn Fn() -> Option<Interrupt>) -> Interrupt {
        let mut c = self.cur.lock();
        c.blocked += 1;
        let out = loop {
            if let Some(i) = check() {
                break i;
            }
            self.cv.wait_for(&mut c, POLL);
        };
        c.blocked -= 1;
        out
    }

    /// Advances replayed stream positions for a consumed recv or send.
    pub fn note_io(&self, e: &SyscallEvent) {
        let (Some(stream), Some(seq)) = (e.stream, e.stream_seq) else { return };
        let mut c = self.cur.lock();
        match e.kind {
            SyscallKind::StreamRecv => {
                let end = seq + e.payload.len() as u64;
                let v = c.io.recv_end.entry(stream).or_insert(0);
                *v = (*v).max(end);
            }
            SyscallKind::StreamSend => {
                let end = seq + e.result.max(0) as u64;
                let v = c.io.send_end.entry(stream).or_insert(0);
                *v = (*v).max(end);
            }
            _ => {}
        }
    }

    /// After-hook of a replayed syscall: waits for its recorded exit turn
    /// (and spacing) when mitigation is on, then advances the cursors.
    pub fn complete(&self, e: &SyscallEvent, check: &dyn Fn() -> Option<Interrupt>) -> Result<(), Interrupt> {
        let mut c = self.cur.lock();
        let pos = if self.mitigation == Mitigation::Off { None } else { self.order_pos.get(&(e.thread, e.call_seq)).copied() };
        if let Some(pos) = pos {
            let deadline = Instant::now() + self.timeout;
            c.blocked += 1;
            let waited = loop {
                if c.transition || c.next_order > pos {
                    break Ok(());
                }
                if c.next_order == pos {
                    if self.mitigation == Mitigation::OrderPlusTiming {
                        if let Some(last) = c.last_exit {
                            let target = last + Duration::from_nanos(self.deltas[pos]);
                            if Instant::now() < target {
                                c.blocked -= 1;
                                self.cv.wait_until(&mut c, target);
                                c.blocked += 1;
                                continue;
                            }
                        }
                    }
                    break Ok(());
                }
                if let Some(Interrupt::Abort) = check() {
                    break Err(Interrupt::Abort);
                }
                if Instant::now() >= deadline {
                    break Err(Interrupt::Fault(RtError::Divergence(format!(
                        "{} call {} timed out waiting for exit turn {pos}",
                        e.thread, e.call_seq
                    ))));
                }
                self.cv.wait_for(&mut c, POLL);
            };
            c.blocked -= 1;
            waited?;
            if c.next_order == pos {
                c.next_order = pos + 1;
                c.last_exit = Some(Instant::now());
            }
        }
        *c.next_call.entry(e.thread).or_insert(0) += 1;
        c.progress += 1;
        c.replayed += 1;
        if matches!(e.output_seq, Some(s) if s <= self.bbsn) && c.pending > 0 {
            c.pending -= 1;
            if c.pending == 0 {
                c.transition = true;
            }
        }
        self.cv.notify_all();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::StreamId;
    use crate::ndlog::GlobalOrderEvent;

    fn ev(thread: u32, call_seq: u64, kind: SyscallKind, stamp: u64, output_seq: Option<u64>) -> SyscallEvent {
        SyscallEvent {
            thread: ThreadId(thread),
            call_seq,
            kind,
            params_digest: 0,
            result: 4,
            payload: if kind == SyscallKind::StreamRecv { vec![0; 4] } else { Vec::new() },
            stream: Some(StreamId::new(thread, 80)),
            stream_seq: Some(call_seq * 4),
            rendezvous: None,
            output_seq,
            exit_stamp: stamp,
        }
    }

    fn log_of(events: Vec<SyscallEvent>) -> EpochLog {
        let mut log = EpochLog::new(1);
        let mut sorted = events.clone();
        sorted.sort_by_key(|e| e.exit_stamp);
        for (i, e) in sorted.iter().enumerate() {
            log.order_log.push(GlobalOrderEvent { thread: e.thread, call_seq: e.call_seq, order_index: i as u64, exit_stamp: e.exit_stamp });
        }
        for e in events {
            log.syscall_logs.entry(e.thread).or_default().push(e);
        }
        log
    }

    fn never() -> Option<Interrupt> {
        None
    }

    #[test]
    fn no_outputs_means_immediate_transition() {
        let rs = ReplayState::new(EpochLog::new(1), 5, Mitigation::Off, Duration::from_secs(1));
        assert!(rs.transition_requested());
    }

    #[test]
    fn transition_after_last_counted_send() {
        let events = (0..3).map(|i| ev(0, i, SyscallKind::StreamSend, i * 10, Some(i + 1))).collect();
        let rs = ReplayState::new(log_of(events), 3, Mitigation::Off, Duration::from_secs(1));
        assert_eq!(rs.pending(), 3);
        for i in 0..3 {
            assert!(!rs.transition_requested());
            let e = rs.next_event(ThreadId(0)).unwrap();
            assert_eq!(e.call_seq, i);
            rs.note_io(&e);
            rs.complete(&e, &never).unwrap();
        }
        assert!(rs.transition_requested());
        assert_eq!(rs.io().send_end[&StreamId::new(0, 80)], 12);
        assert!(rs.next_event(ThreadId(0)).is_none());
    }

    #[test]
    fn uncounted_send_does_not_decrement() {
        let events = vec![ev(0, 0, SyscallKind::StreamSend, 0, Some(2)), ev(0, 1, SyscallKind::StreamSend, 1, Some(1))];
        let rs = ReplayState::new(log_of(events), 1, Mitigation::Off, Duration::from_secs(1));
        assert_eq!(rs.pending(), 1);
        let e = rs.next_event(ThreadId(0)).unwrap();
        rs.complete(&e, &never).unwrap();
        assert_eq!(rs.pending(), 1);
    }

    #[test]
    fn timing_mitigation_preserves_exit_spacing() {
        let gap = 15_000_000;
        let events = vec![
            ev(0, 0, SyscallKind::ClockRead, 0, None),
            ev(1, 0, SyscallKind::ClockRead, gap, None),
            ev(0, 1, SyscallKind::StreamSend, 2 * gap, Some(1)),
        ];
        let rs = std::sync::Arc::new(ReplayState::new(log_of(events), 1, Mitigation::OrderPlusTiming, Duration::from_secs(2)));
        let exits = std::sync::Arc::new(Mutex::new(Vec::new()));
        let mut hs = Vec::new();
        for t in [1u32, 0] {
            let (rs, exits) = (rs.clone(), exits.clone());
            hs.push(std::thread::spawn(move || {
                while let Some(e) = rs.next_event(ThreadId(t)) {
                    rs.complete(&e, &never).unwrap();
                    exits.lock().push((t, e.call_seq, Instant::now()));
                }
            }));
        }
        for h in hs {
            h.join().unwrap();
        }
        let mut exits = exits.lock().clone();
        exits.sort_by_key(|x| x.2);
        let order: Vec<_> = exits.iter().map(|x| (x.0, x.1)).collect();
        assert_eq!(order, vec![(0, 0), (1, 0), (0, 1)]);
        for w in exits.windows(2) {
            assert!(w[1].2 - w[0].2 >= Duration::from_nanos(gap) - Duration::from_millis(1));
        }
    }

    #[test]
    fn mitigation_off_ignores_order_log() {
        let events = vec![ev(0, 0, SyscallKind::ClockRead, 0, None), ev(1, 0, SyscallKind::ClockRead, 5, None)];
        let rs = ReplayState::new(log_of(events), 0, Mitigation::Off, Duration::from_millis(50));
        let e = rs.next_event(ThreadId(1)).unwrap();
        rs.complete(&e, &never).unwrap();
    }

    #[test]
    fn order_wait_times_out_as_divergence() {
        let events = vec![
            ev(0, 0, SyscallKind::ClockRead, 0, None),
            ev(1, 0, SyscallKind::ClockRead, 5, None),
            ev(1, 1, SyscallKind::StreamSend, 9, Some(1)),
        ];
        let rs = ReplayState::new(log_of(events), 1, Mitigation::OrderOnly, Duration::from_millis(30));
        let e = rs.next_event(ThreadId(1)).unwrap();
        assert!(matches!(rs.complete(&e, &never), Err(Interrupt::Fault(RtError::Divergence(_)))));
    }
}
