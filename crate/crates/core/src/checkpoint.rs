//! Epoch checkpoints: cooperative pause, capture of workload, runtime and
//! stream state, a versioned sectioned wire format, and restore into a
//! replaying runtime.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::codec::{self, DecodeError, Reader, Writer};
use crate::ids::{StreamId, ThreadId};
use crate::netgate::SocketState;
use crate::runtime::{
    PauseError, PauseToken, Phase, Program, ReplayState, RtError, Runtime, RuntimeConfig, RuntimeState, ThreadSnap,
};

pub const CHECKPOINT_FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochConfig {
    pub epoch_len: Duration,
    pub incremental: bool,
}

impl EpochConfig {
    pub fn new(epoch_len: Duration) -> Self {
        assert!(!epoch_len.is_zero(), "epoch length must be positive");
        Self { epoch_len, incremental: false }
    }

    pub fn pause_timeout(&self) -> Duration {
        self.epoch_len * 5
    }

    pub fn turn_timeout(&self) -> Duration {
        self.epoch_len * 2
    }
}

/// Shared application state plus the per-thread programs that operate on it.
pub trait App: Send + Sync {
    /// Serialized shared state. With `incremental`, may return only what
    /// changed since the previous capture, flagged by the second value.
    fn capture(&self, incremental: bool) -> (Vec<u8>, bool);
    fn program(self: Arc<Self>, t: ThreadId, snap: Option<&[u8]>) -> Result<Box<dyn Program>, String>;
}

pub trait AppFactory: Send + Sync {
    fn restore(&self, state: &[u8]) -> Result<Arc<dyn App>, String>;
    fn merge_delta(&self, base: &[u8], delta: &[u8]) -> Result<Vec<u8>, String>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch_id: u64,
    pub workload_state: Vec<u8>,
    pub workload_is_delta: bool,
    pub runtime_state: RuntimeState,
    pub stream_state: BTreeMap<StreamId, SocketState>,
    pub pbsn_snapshot: u64,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("decode: {0}")]
    Decode(#[from] DecodeError),
    #[error("section {0}: {1}")]
    Section(&'static str, String),
    #[error("pause: {0}")]
    Pause(#[from] PauseError),
    #[error("workload: {0}")]
    Workload(String),
}

impl Checkpoint {
    pub fn serialize(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.epoch_id);
        w.u64(self.pbsn_snapshot);
        w.u8(self.workload_is_delta as u8);
        w.bytes(&self.workload_state);
        w.bytes(&bincode::serialize(&self.runtime_state).expect("runtime state serializes"));
        w.bytes(&bincode::serialize(&self.stream_state).expect("stream state serializes"));
        codec::frame(CHECKPOINT_FORMAT_VERSION, &w.finish())
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let body = codec::unframe(CHECKPOINT_FORMAT_VERSION, bytes)?;
        let mut r = Reader::new(body);
        let epoch_id = r.u64()?;
        let pbsn_snapshot = r.u64()?;
        let workload_is_delta = r.u8()? != 0;
        let workload_state = r.bytes()?;
        let rt = r.bytes()?;
        let streams = r.bytes()?;
        r.finish()?;
        Ok(Self {
            epoch_id,
            workload_state,
            workload_is_delta,
            runtime_state: bincode::deserialize(&rt).map_err(|e| CheckpointError::Section("runtime", e.to_string()))?,
            stream_state: bincode::deserialize(&streams)
                .map_err(|e| CheckpointError::Section("streams", e.to_string()))?,
            pbsn_snapshot,
        })
    }

    /// Folds a delta checkpoint into the previous full one.
    pub fn merged_onto(self, base: &Checkpoint, factory: &dyn AppFactory) -> Result<Checkpoint, CheckpointError> {
        if !self.workload_is_delta {
            return Ok(self);
        }
        let full = factory.merge_delta(&base.workload_state, &self.workload_state).map_err(CheckpointError::Workload)?;
        Ok(Checkpoint { workload_state: full, workload_is_delta: false, ..self })
    }
}

/// Pauses every workload thread at a sanctioned point.
pub fn pause_all(rt: &Runtime, cfg: &EpochConfig) -> Result<PauseToken, PauseError> {
    rt.pause.pause_all(cfg.pause_timeout())
}

pub fn capture(rt: &Runtime, token: &PauseToken, app: &dyn App, epoch_id: u64, incremental: bool) -> Checkpoint {
    let (workload_state, workload_is_delta) = app.capture(incremental);
    Checkpoint {
        epoch_id,
        workload_state,
        workload_is_delta,
        runtime_state: rt.capture_state(token),
        stream_state: rt.kernel.sockets(),
        pbsn_snapshot: rt.pbsn().load(std::sync::atomic::Ordering::SeqCst),
    }
}

/// A runtime rebuilt from a checkpoint, replaying, with threads not yet started.
pub struct Restored {
    pub rt: Arc<Runtime>,
    pub app: Arc<dyn App>,
    pub replay: Arc<ReplayState>,
    threads: Vec<ThreadSnap>,
}

impl Restored {
    pub fn threads(&self) -> &[ThreadSnap] {
        &self.threads
    }

    pub fn start(&self) -> Result<Vec<JoinHandle<Result<(), RtError>>>, CheckpointError> {
        let mut hs = Vec::new();
        for snap in &self.threads {
            let prog = self.app.clone().program(snap.thread, Some(&snap.program)).map_err(CheckpointError::Workload)?;
            hs.push(self.rt.spawn(snap.thread, prog, Some(snap.clone())));
        }
        Ok(hs)
    }
}

pub fn restore(
    c: &Checkpoint,
    replay: ReplayState,
    factory: &dyn AppFactory,
    cfg: RuntimeConfig,
    origin: Instant,
    seed: u64,
) -> Result<Restored, CheckpointError> {
    if c.workload_is_delta {
        return Err(CheckpointError::Workload("cannot restore from a delta".into()));
    }
    let app = factory.restore(&c.workload_state).map_err(CheckpointError::Workload)?;
    let rt = Arc::new(Runtime::new(origin, seed, Phase::Replay, cfg));
    rt.restore_state(&c.runtime_state, &c.stream_state);
    rt.pbsn().store(c.pbsn_snapshot, std::sync::atomic::Ordering::SeqCst);
    let replay = rt.enter_replay(replay);
    let threads = c.runtime_state.threads.iter().map(|(_, s)| s.clone()).collect();
    Ok(Restored { rt, app, replay, threads })
}
