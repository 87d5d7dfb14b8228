//! Nondeterministic-event logs and the batch-sequence arithmetic that bounds
//! how far the backup replays.
//!
//! On the primary, [`EventLog`] holds one log per lock, one syscall log per
//! thread and a global exit-order log. Each log has a single writer at a time;
//! the logging thread collects new entries concurrently through
//! [`EventLog::collect_batch`]. On the backup, [`EpochLog`] accumulates the
//! received batches of the current epoch.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{self, DecodeError, Reader, Writer};
use crate::ids::{LockId, StreamId, ThreadId};

pub const BATCH_FORMAT_VERSION: u8 = 1;

/// `return_code` of a try-acquire that found the lock held (EBUSY).
pub const RC_BUSY: i32 = 16;
/// `return_code` of a release by a thread that does not hold the lock (EPERM).
pub const RC_NOT_OWNER: i32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LogError {
    #[error("lock {lock}: expected turn {expected}, got {got}")]
    TurnMismatch { lock: LockId, expected: u64, got: u64 },
    #[error("thread {thread}: expected call_seq {expected}, got {got}")]
    CallSeqMismatch { thread: ThreadId, expected: u64, got: u64 },
    #[error("order log: expected index {expected}, got {got}")]
    OrderGap { expected: u64, got: u64 },
    #[error("release event for {lock} carries nonzero return code {rc}")]
    ReleaseCode { lock: LockId, rc: i32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LockOp {
    Acquire,
    TryAcquire,
    Release,
    ReadAcquire,
    WriteAcquire,
}

impl LockOp {
    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(tag: u8) -> Result<Self, DecodeError> {
        Ok(match tag {
            0 => Self::Acquire,
            1 => Self::TryAcquire,
            2 => Self::Release,
            3 => Self::ReadAcquire,
            4 => Self::WriteAcquire,
            tag => return Err(DecodeError::Tag { what: "lock op", tag }),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Acquire => "acquire",
            Self::TryAcquire => "try_acquire",
            Self::Release => "release",
            Self::ReadAcquire => "read_acquire",
            Self::WriteAcquire => "write_acquire",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockEvent {
    pub lock: LockId,
    pub thread: ThreadId,
    pub op: LockOp,
    pub return_code: i32,
    pub turn: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SyscallKind {
    ClockRead,
    RandomRead,
    StreamRecv,
    StreamSend,
    StreamAccept,
    ResourceOpen,
    ResourceClose,
    MemoryMap,
}

impl SyscallKind {
    pub const ALL: [SyscallKind; 8] = [
        Self::ClockRead,
        Self::RandomRead,
        Self::StreamRecv,
        Self::StreamSend,
        Self::StreamAccept,
        Self::ResourceOpen,
        Self::ResourceClose,
        Self::MemoryMap,
    ];

    fn from_tag(tag: u8) -> Result<Self, DecodeError> {
        Self::ALL
            .get(tag as usize)
            .copied()
            .ok_or(DecodeError::Tag { what: "syscall kind", tag })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ClockRead => "clock_read",
            Self::RandomRead => "random_read",
            Self::StreamRecv => "stream_recv",
            Self::StreamSend => "stream_send",
            Self::StreamAccept => "stream_accept",
            Self::ResourceOpen => "resource_open",
            Self::ResourceClose => "resource_close",
            Self::MemoryMap => "memory_map",
        }
    }

    /// Calls whose outcome replay hands back from the log without touching
    /// the simulated kernel.
    pub fn is_consumable(self) -> bool {
        matches!(
            self,
            Self::ClockRead | Self::RandomRead | Self::StreamRecv | Self::StreamSend
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ResourceClass {
    DescriptorTable,
    MemoryMap,
}

impl ResourceClass {
    fn from_tag(tag: u8) -> Result<Self, DecodeError> {
        match tag {
            0 => Ok(Self::DescriptorTable),
            1 => Ok(Self::MemoryMap),
            tag => Err(DecodeError::Tag { what: "resource class", tag }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rendezvous {
    pub class: ResourceClass,
    /// Value of the class counter after this access (first access is 1).
    pub access_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyscallEvent {
    pub thread: ThreadId,
    pub call_seq: u64,
    pub kind: SyscallKind,
    pub params_digest: u64,
    pub result: i64,
    pub payload: Vec<u8>,
    /// Stream touched by recv/send/accept.
    pub stream: Option<StreamId>,
    /// First stream byte sequence number transferred by recv/send.
    pub stream_seq: Option<u64>,
    pub rendezvous: Option<Rendezvous>,
    pub output_seq: Option<u64>,
    pub exit_stamp: u64,
}

impl SyscallEvent {
    pub fn is_external_output(&self) -> bool {
        self.output_seq.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalOrderEvent {
    pub thread: ThreadId,
    pub call_seq: u64,
    pub order_index: u64,
    pub exit_stamp: u64,
}

/// Copy of an external output carried to the backup with the log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutgoingCopy {
    pub thread: ThreadId,
    pub call_seq: u64,
    pub stream: StreamId,
    pub seq: u64,
    pub bytes: Vec<u8>,
    pub output_seq: u64,
    pub order_index: u64,
}

impl OutgoingCopy {
    pub fn end_seq(&self) -> u64 {
        self.seq + self.bytes.len() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LogKey {
    Lock(LockId),
    Syscall(ThreadId),
    Order,
}

/// Canonical digest of a parameter encoding.
pub fn params_digest(canonical: &[u8]) -> u64 {
    let h = Sha256::digest(canonical);
    u64::from_le_bytes(h[..8].try_into().unwrap())
}

struct Segment<E> {
    events: Vec<E>,
    collected: usize,
}

impl<E> Default for Segment<E> {
    fn default() -> Self {
        Self { events: Vec::new(), collected: 0 }
    }
}

#[derive(Default)]
struct SyscallSegment {
    events: Vec<SyscallEvent>,
    copies: Vec<OutgoingCopy>,
    collected: usize,
    copies_collected: usize,
}

/// Primary-side log for one epoch.
pub struct EventLog {
    epoch: u64,
    lock_logs: RwLock<BTreeMap<LockId, Arc<Mutex<Segment<LockEvent>>>>>,
    syscall_logs: RwLock<BTreeMap<ThreadId, Arc<Mutex<SyscallSegment>>>>,
    order_log: Mutex<Segment<GlobalOrderEvent>>,
    dirty: Mutex<BTreeSet<LogKey>>,
}

impl EventLog {
    pub fn new(epoch: u64) -> Self {
        Self {
            epoch,
            lock_logs: RwLock::new(BTreeMap::new()),
            syscall_logs: RwLock::new(BTreeMap::new()),
            order_log: Mutex::new(Segment::default()),
            dirty: Mutex::new(BTreeSet::new()),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn lock_segment(&self, lock: LockId) -> Arc<Mutex<Segment<LockEvent>>> {
        if let Some(s) = self.lock_logs.read().get(&lock) {
            return s.clone();
        }
        self.lock_logs.write().entry(lock).or_default().clone()
    }

    fn syscall_segment(&self, thread: ThreadId) -> Arc<Mutex<SyscallSegment>> {
        if let Some(s) = self.syscall_logs.read().get(&thread) {
            return s.clone();
        }
        self.syscall_logs.write().entry(thread).or_default().clone()
    }

    /// Next turn of `lock` in this epoch.
    pub fn lock_len(&self, lock: LockId) -> u64 {
        self.lock_segment(lock).lock().events.len() as u64
    }

    pub fn append_lock_event(&self, e: LockEvent) -> Result<(), LogError> {
        if e.op == LockOp::Release && e.return_code != 0 {
            return Err(LogError::ReleaseCode { lock: e.lock, rc: e.return_code });
        }
        let seg = self.lock_segment(e.lock);
        {
            let mut s = seg.lock();
            let expected = s.events.len() as u64;
            if e.turn != expected {
                return Err(LogError::TurnMismatch { lock: e.lock, expected, got: e.turn });
            }
            s.events.push(e.clone());
        }
        self.dirty.lock().insert(LogKey::Lock(e.lock));
        Ok(())
    }

    /// Appends a syscall event together with its global order entry.
    ///
    /// `finalize` runs while the order log is held, so exit stamps and
    /// `output_seq` reads are totally ordered with the order indices. It fills
    /// in `exit_stamp` and `output_seq` on the event.
    pub fn append_syscall_event(
        &self,
        mut e: SyscallEvent,
        copy: Option<(StreamId, u64, Vec<u8>)>,
        finalize: impl FnOnce(&mut SyscallEvent),
    ) -> Result<GlobalOrderEvent, LogError> {
        let seg = self.syscall_segment(e.thread);
        let mut order = self.order_log.lock();
        finalize(&mut e);
        let order_index = order.events.len() as u64;
        let ordered = GlobalOrderEvent {
            thread: e.thread,
            call_seq: e.call_seq,
            order_index,
            exit_stamp: e.exit_stamp,
        };
        {
            let mut s = seg.lock();
            let expected = s.events.len() as u64;
            if e.call_seq != expected {
                return Err(LogError::CallSeqMismatch { thread: e.thread, expected, got: e.call_seq });
            }
            if let Some((stream, seq, bytes)) = copy {
                s.copies.push(OutgoingCopy {
                    thread: e.thread,
                    call_seq: e.call_seq,
                    stream,
                    seq,
                    bytes,
                    output_seq: e.output_seq.unwrap_or(0),
                    order_index,
                });
            }
            s.events.push(e.clone());
        }
        order.events.push(ordered.clone());
        drop(order);
        let mut dirty = self.dirty.lock();
        dirty.insert(LogKey::Syscall(e.thread));
        dirty.insert(LogKey::Order);
        Ok(ordered)
    }

    pub fn dirty_keys(&self) -> BTreeSet<LogKey> {
        self.dirty.lock().clone()
    }

    /// Increments `pbsn` first, then gathers every not-yet-collected entry of
    /// the dirty logs. The increment holds the order log, so every event
    /// stamped before it is already appended.
    pub fn collect_batch(&self, pbsn: &AtomicU64) -> LogBatch {
        let pbsn_at_collection = {
            let _order = self.order_log.lock();
            pbsn.fetch_add(1, Ordering::SeqCst) + 1
        };
        let keys = std::mem::take(&mut *self.dirty.lock());
        let mut batch = LogBatch {
            epoch: self.epoch,
            pbsn_at_collection,
            ..LogBatch::default()
        };
        for key in keys {
            match key {
                LogKey::Lock(lock) => {
                    let seg = self.lock_segment(lock);
                    let mut s = seg.lock();
                    if s.collected < s.events.len() {
                        batch.lock_entries.push((lock, s.events[s.collected..].to_vec()));
                        s.collected = s.events.len();
                    }
                }
                LogKey::Syscall(thread) => {
                    let seg = self.syscall_segment(thread);
                    let mut s = seg.lock();
                    if s.collected < s.events.len() {
                        batch.syscall_entries.push((thread, s.events[s.collected..].to_vec()));
                        s.collected = s.events.len();
                    }
                    if s.copies_collected < s.copies.len() {
                        batch.outgoing_copies.extend_from_slice(&s.copies[s.copies_collected..]);
                        s.copies_collected = s.copies.len();
                    }
                }
                LogKey::Order => {
                    let mut o = self.order_log.lock();
                    if o.collected < o.events.len() {
                        batch.order_entries.extend_from_slice(&o.events[o.collected..]);
                        o.collected = o.events.len();
                    }
                }
            }
        }
        batch.outgoing_copies.sort_by_key(|c| c.order_index);
        batch
    }

    /// Every event appended so far, collected or not.
    pub fn snapshot(&self) -> EpochLog {
        let mut out = EpochLog { epoch: self.epoch, ..EpochLog::default() };
        for (lock, seg) in self.lock_logs.read().iter() {
            let s = seg.lock();
            if !s.events.is_empty() {
                out.lock_logs.insert(*lock, s.events.clone());
            }
        }
        for (thread, seg) in self.syscall_logs.read().iter() {
            let s = seg.lock();
            if !s.events.is_empty() {
                out.syscall_logs.insert(*thread, s.events.clone());
            }
            out.copies.extend_from_slice(&s.copies);
        }
        out.order_log = self.order_log.lock().events.clone();
        out.copies.sort_by_key(|c| c.order_index);
        out
    }
}

/// New entries collected from the dirty logs in one pass of the logging thread.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LogBatch {
    pub epoch: u64,
    pub pbsn_at_collection: u64,
    pub lock_entries: Vec<(LockId, Vec<LockEvent>)>,
    pub syscall_entries: Vec<(ThreadId, Vec<SyscallEvent>)>,
    pub order_entries: Vec<GlobalOrderEvent>,
    pub outgoing_copies: Vec<OutgoingCopy>,
}

impl LogBatch {
    pub fn is_empty(&self) -> bool {
        self.lock_entries.is_empty()
            && self.syscall_entries.is_empty()
            && self.order_entries.is_empty()
            && self.outgoing_copies.is_empty()
    }

    pub fn event_count(&self) -> usize {
        self.lock_entries.iter().map(|(_, v)| v.len()).sum::<usize>()
            + self.syscall_entries.iter().map(|(_, v)| v.len()).sum::<usize>()
            + self.order_entries.len()
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.epoch);
        w.u64(self.pbsn_at_collection);
        w.u32(self.lock_entries.len() as u32);
        for (lock, events) in &self.lock_entries {
            w.u32(lock.0);
            w.u32(events.len() as u32);
            for e in events {
                write_lock_event(&mut w, e);
            }
        }
        w.u32(self.syscall_entries.len() as u32);
        for (thread, events) in &self.syscall_entries {
            w.u32(thread.0);
            w.u32(events.len() as u32);
            for e in events {
                write_syscall_event(&mut w, e);
            }
        }
        w.u32(self.order_entries.len() as u32);
        for o in &self.order_entries {
            w.u32(o.thread.0);
            w.u64(o.call_seq);
            w.u64(o.order_index);
            w.u64(o.exit_stamp);
        }
        w.u32(self.outgoing_copies.len() as u32);
        for c in &self.outgoing_copies {
            w.u32(c.thread.0);
            w.u64(c.call_seq);
            write_stream(&mut w, c.stream);
            w.u64(c.seq);
            w.bytes(&c.bytes);
            w.u64(c.output_seq);
            w.u64(c.order_index);
        }
        codec::frame(BATCH_FORMAT_VERSION, &w.finish())
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, DecodeError> {
        let body = codec::unframe(BATCH_FORMAT_VERSION, bytes)?;
        let mut r = Reader::new(body);
        let mut b = LogBatch { epoch: r.u64()?, pbsn_at_collection: r.u64()?, ..Self::default() };
        for _ in 0..r.u32()? {
            let lock = LockId(r.u32()?);
            let n = r.u32()?;
            let mut events = Vec::new();
            for _ in 0..n {
                events.push(read_lock_event(&mut r)?);
            }
            b.lock_entries.push((lock, events));
        }
        for _ in 0..r.u32()? {
            let thread = ThreadId(r.u32()?);
            let n = r.u32()?;
            let mut events = Vec::new();
            for _ in 0..n {
                events.push(read_syscall_event(&mut r)?);
            }
            b.syscall_entries.push((thread, events));
        }
        for _ in 0..r.u32()? {
            b.order_entries.push(GlobalOrderEvent {
                thread: ThreadId(r.u32()?),
                call_seq: r.u64()?,
                order_index: r.u64()?,
                exit_stamp: r.u64()?,
            });
        }
        for _ in 0..r.u32()? {
            b.outgoing_copies.push(OutgoingCopy {
                thread: ThreadId(r.u32()?),
                call_seq: r.u64()?,
                stream: read_stream(&mut r)?,
                seq: r.u64()?,
                bytes: r.bytes()?,
                output_seq: r.u64()?,
                order_index: r.u64()?,
            });
        }
        r.finish()?;
        Ok(b)
    }

    /// Text dump, one event per line.
    pub fn dump(&self) -> String {
        let mut out = format!("batch epoch={} pbsn={}\n", self.epoch, self.pbsn_at_collection);
        for (_, events) in &self.lock_entries {
            for e in events {
                dump_lock(&mut out, e);
            }
        }
        for (_, events) in &self.syscall_entries {
            for e in events {
                dump_syscall(&mut out, e);
            }
        }
        for o in &self.order_entries {
            dump_order(&mut out, o);
        }
        for c in &self.outgoing_copies {
            let _ = writeln!(
                out,
                "C thread={} seq={} stream={} at={} len={} out={}",
                c.thread.0,
                c.call_seq,
                c.stream,
                c.seq,
                c.bytes.len(),
                c.output_seq
            );
        }
        out
    }
}

fn write_stream(w: &mut Writer, s: StreamId) {
    w.u32(s.client);
    w.u16(s.port);
}

fn read_stream(r: &mut Reader<'_>) -> Result<StreamId, DecodeError> {
    Ok(StreamId { client: r.u32()?, port: r.u16()? })
}

fn write_lock_event(w: &mut Writer, e: &LockEvent) {
    w.u32(e.lock.0);
    w.u32(e.thread.0);
    w.u8(e.op.tag());
    w.i32(e.return_code);
    w.u64(e.turn);
}

fn read_lock_event(r: &mut Reader<'_>) -> Result<LockEvent, DecodeError> {
    Ok(LockEvent {
        lock: LockId(r.u32()?),
        thread: ThreadId(r.u32()?),
        op: LockOp::from_tag(r.u8()?)?,
        return_code: r.i32()?,
        turn: r.u64()?,
    })
}

fn write_syscall_event(w: &mut Writer, e: &SyscallEvent) {
    w.u32(e.thread.0);
    w.u64(e.call_seq);
    w.u8(e.kind as u8);
    w.u64(e.params_digest);
    w.i64(e.result);
    w.bytes(&e.payload);
    match e.stream {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            write_stream(w, s);
        }
    }
    w.opt_u64(e.stream_seq);
    match e.rendezvous {
        None => w.u8(0),
        Some(rv) => {
            w.u8(1);
            w.u8(rv.class as u8);
            w.u64(rv.access_seq);
        }
    }
    w.opt_u64(e.output_seq);
    w.u64(e.exit_stamp);
}

fn read_syscall_event(r: &mut Reader<'_>) -> Result<SyscallEvent, DecodeError> {
    let thread = ThreadId(r.u32()?);
    let call_seq = r.u64()?;
    let kind = SyscallKind::from_tag(r.u8()?)?;
    let params_digest = r.u64()?;
    let result = r.i64()?;
    let payload = r.bytes()?;
    let stream = match r.u8()? {
        0 => None,
        1 => Some(read_stream(r)?),
        tag => return Err(DecodeError::Tag { what: "stream option", tag }),
    };
    let stream_seq = r.opt_u64()?;
    let rendezvous = match r.u8()? {
        0 => None,
        1 => Some(Rendezvous { class: ResourceClass::from_tag(r.u8()?)?, access_seq: r.u64()? }),
        tag => return Err(DecodeError::Tag { what: "rendezvous option", tag }),
    };
    Ok(SyscallEvent {
        thread,
        call_seq,
        kind,
        params_digest,
        result,
        payload,
        stream,
        stream_seq,
        rendezvous,
        output_seq: r.opt_u64()?,
        exit_stamp: r.u64()?,
    })
}

fn dump_lock(out: &mut String, e: &LockEvent) {
    let _ = writeln!(
        out,
        "L lock={} thread={} op={} rc={} turn={}",
        e.lock.0,
        e.thread.0,
        e.op.name(),
        e.return_code,
        e.turn
    );
}

fn dump_syscall(out: &mut String, e: &SyscallEvent) {
    let _ = write!(
        out,
        "S thread={} seq={} kind={} digest={:016x} result={} payload={}",
        e.thread.0,
        e.call_seq,
        e.kind.name(),
        e.params_digest,
        e.result,
        e.payload.len()
    );
    if let Some(rv) = e.rendezvous {
        let _ = write!(out, " rv={:?}:{}", rv.class, rv.access_seq);
    }
    if let Some(o) = e.output_seq {
        let _ = write!(out, " out={o}");
    }
    let _ = writeln!(out, " stamp={}", e.exit_stamp);
}

fn dump_order(out: &mut String, o: &GlobalOrderEvent) {
    let _ = writeln!(
        out,
        "O idx={} thread={} seq={} stamp={}",
        o.order_index, o.thread.0, o.call_seq, o.exit_stamp
    );
}

/// Backup-side accumulation of one epoch's batches; also the replay input.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub lock_logs: BTreeMap<LockId, Vec<LockEvent>>,
    pub syscall_logs: BTreeMap<ThreadId, Vec<SyscallEvent>>,
    pub order_log: Vec<GlobalOrderEvent>,
    pub copies: Vec<OutgoingCopy>,
}

impl EpochLog {
    pub fn new(epoch: u64) -> Self {
        Self { epoch, ..Self::default() }
    }

    /// Appends a batch, checking that every log continues without gaps.
    pub fn merge(&mut self, b: &LogBatch) -> Result<(), LogError> {
        for (lock, events) in &b.lock_entries {
            let log = self.lock_logs.entry(*lock).or_default();
            for e in events {
                let expected = log.len() as u64;
                if e.turn != expected {
                    return Err(LogError::TurnMismatch { lock: *lock, expected, got: e.turn });
                }
                log.push(e.clone());
            }
        }
        for (thread, events) in &b.syscall_entries {
            let log = self.syscall_logs.entry(*thread).or_default();
            for e in events {
                let expected = log.len() as u64;
                if e.call_seq != expected {
                    return Err(LogError::CallSeqMismatch { thread: *thread, expected, got: e.call_seq });
                }
                log.push(e.clone());
            }
        }
        for o in &b.order_entries {
            let expected = self.order_log.len() as u64;
            if o.order_index != expected {
                return Err(LogError::OrderGap { expected, got: o.order_index });
            }
            self.order_log.push(o.clone());
        }
        self.copies.extend_from_slice(&b.outgoing_copies);
        Ok(())
    }

    pub fn copy_for(&self, thread: ThreadId, call_seq: u64) -> Option<&OutgoingCopy> {
        self.copies.iter().find(|c| c.thread == thread && c.call_seq == call_seq)
    }

    pub fn event_count(&self) -> usize {
        self.lock_logs.values().map(Vec::len).sum::<usize>()
            + self.syscall_logs.values().map(Vec::len).sum::<usize>()
            + self.order_log.len()
    }

    pub fn dump(&self) -> String {
        let mut out = format!("epoch {}\n", self.epoch);
        for events in self.lock_logs.values() {
            for e in events {
                dump_lock(&mut out, e);
            }
        }
        for events in self.syscall_logs.values() {
            for e in events {
                dump_syscall(&mut out, e);
            }
        }
        for o in &self.order_log {
            dump_order(&mut out, o);
        }
        out
    }
}

/// Number of external-output events whose batch sequence number is covered
/// by `bbsn`; replay stops after replaying exactly this many.
pub fn count_pending_outputs(log: &EpochLog, bbsn: u64) -> usize {
    log.syscall_logs
        .values()
        .flatten()
        .filter(|e| matches!(e.output_seq, Some(s) if s <= bbsn))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lock_ev(lock: u32, thread: u32, turn: u64) -> LockEvent {
        LockEvent { lock: LockId(lock), thread: ThreadId(thread), op: LockOp::Acquire, return_code: 0, turn }
    }

    pub(crate) fn sys_ev(thread: u32, call_seq: u64, kind: SyscallKind) -> SyscallEvent {
        SyscallEvent {
            thread: ThreadId(thread),
            call_seq,
            kind,
            params_digest: params_digest(&call_seq.to_le_bytes()),
            result: 0,
            payload: Vec::new(),
            stream: None,
            stream_seq: None,
            rendezvous: None,
            output_seq: None,
            exit_stamp: 0,
        }
    }

    #[test]
    fn append_lock_event_checks_turns() {
        let log = EventLog::new(0);
        log.append_lock_event(lock_ev(1, 0, 0)).unwrap();
        assert_eq!(log.lock_len(LockId(1)), 1);
        for t in 1..5 {
            log.append_lock_event(lock_ev(1, 0, t)).unwrap();
        }
        log.append_lock_event(lock_ev(1, 0, 5)).unwrap();
        assert_eq!(log.lock_len(LockId(1)), 6);
        assert_eq!(
            log.append_lock_event(lock_ev(1, 0, 7)),
            Err(LogError::TurnMismatch { lock: LockId(1), expected: 6, got: 7 })
        );
    }

    #[test]
    fn release_must_succeed() {
        let log = EventLog::new(0);
        let mut e = lock_ev(2, 0, 0);
        e.op = LockOp::Release;
        e.return_code = 1;
        assert!(matches!(log.append_lock_event(e), Err(LogError::ReleaseCode { .. })));
    }

    #[test]
    fn empty_collection_still_increments() {
        let log = EventLog::new(0);
        let pbsn = AtomicU64::new(3);
        let b = log.collect_batch(&pbsn);
        assert!(b.is_empty());
        assert_eq!(b.pbsn_at_collection, 4);
        assert_eq!(pbsn.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn one_batch_gathers_every_dirty_log() {
        let log = EventLog::new(0);
        let pbsn = AtomicU64::new(0);
        log.append_lock_event(lock_ev(1, 0, 0)).unwrap();
        log.append_lock_event(lock_ev(2, 1, 0)).unwrap();
        log.append_syscall_event(sys_ev(1, 0, SyscallKind::ClockRead), None, |_| {}).unwrap();
        let expected: BTreeSet<LogKey> = [
            LogKey::Lock(LockId(1)),
            LogKey::Lock(LockId(2)),
            LogKey::Syscall(ThreadId(1)),
            LogKey::Order,
        ]
        .into_iter()
        .collect();
        assert_eq!(log.dirty_keys(), expected);
        let b = log.collect_batch(&pbsn);
        assert_eq!(b.lock_entries.len(), 2);
        assert_eq!(b.syscall_entries.len(), 1);
        assert_eq!(b.order_entries.len(), 1);
        assert!(log.dirty_keys().is_empty());
        assert!(log.collect_batch(&pbsn).is_empty());
    }

    #[test]
    fn output_logged_after_increment_has_higher_seq() {
        let log = EventLog::new(0);
        let pbsn = AtomicU64::new(3);
        let mut before = sys_ev(0, 0, SyscallKind::StreamSend);
        before.output_seq = Some(pbsn.load(Ordering::SeqCst) + 1);
        log.append_syscall_event(before, None, |_| {}).unwrap();
        let b = log.collect_batch(&pbsn);
        assert_eq!(b.pbsn_at_collection, 4);
        assert_eq!(b.syscall_entries[0].1[0].output_seq, Some(4));
        let after_seq = pbsn.load(Ordering::SeqCst) + 1;
        assert_eq!(after_seq, 5);
        assert!(after_seq > b.pbsn_at_collection);
    }

    #[test]
    fn count_pending_outputs_examples() {
        let mut log = EpochLog::new(0);
        log.syscall_logs.insert(ThreadId(0), vec![sys_ev(0, 0, SyscallKind::ClockRead)]);
        assert_eq!(count_pending_outputs(&log, 10), 0);
        let outs: Vec<SyscallEvent> = (0..3)
            .map(|i| {
                let mut e = sys_ev(1, i, SyscallKind::StreamSend);
                e.output_seq = Some(i + 1);
                e
            })
            .collect();
        log.syscall_logs.insert(ThreadId(1), outs);
        assert_eq!(count_pending_outputs(&log, 2), 2);
        assert_eq!(count_pending_outputs(&log, 3), 3);
        assert_eq!(count_pending_outputs(&log, 0), 0);
    }

    #[test]
    fn empty_batch_round_trips() {
        let b = LogBatch::default();
        assert_eq!(LogBatch::deserialize(&b.serialize()).unwrap(), b);
    }

    #[test]
    fn truncated_batch_is_rejected() {
        let log = EventLog::new(2);
        log.append_lock_event(lock_ev(1, 0, 0)).unwrap();
        let bytes = log.collect_batch(&AtomicU64::new(0)).serialize();
        for cut in [1, 5, bytes.len() / 2, bytes.len() - 1] {
            assert!(LogBatch::deserialize(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(LogBatch::deserialize(&bad), Err(DecodeError::Version(9)));
    }

    #[test]
    fn merge_rejects_gaps() {
        let mut e = EpochLog::new(0);
        let mut b = LogBatch::default();
        b.lock_entries.push((LockId(1), vec![lock_ev(1, 0, 1)]));
        assert!(matches!(e.merge(&b), Err(LogError::TurnMismatch { .. })));
    }

    #[test]
    fn dump_has_one_line_per_event() {
        let log = EventLog::new(0);
        log.append_lock_event(lock_ev(1, 0, 0)).unwrap();
        log.append_syscall_event(sys_ev(0, 0, SyscallKind::RandomRead), None, |_| {}).unwrap();
        let d = log.snapshot().dump();
        assert_eq!(d.lines().filter(|l| l.starts_with('L')).count(), 1);
        assert_eq!(d.lines().filter(|l| l.starts_with('S')).count(), 1);
        assert_eq!(d.lines().filter(|l| l.starts_with('O')).count(), 1);
    }
}
