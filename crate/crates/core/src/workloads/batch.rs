//! Deterministic multi-threaded batch computation.
//!
//! Workers pull item indices from a shared queue, compute each item as an
//! iterated hash chain seeded by `(seed, index)`, and store results by index.
//! When all items are done, thread 0 sends `DIGEST <hex>\n` over the single
//! accepted stream. The digest depends only on the seed and item count.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{App, AppFactory};
use crate::ids::{LockId, StreamId, ThreadId};
use crate::ndlog::LockOp;
use crate::runtime::{Op, OpResult, Program, Step, SysCall};

pub const BATCH_PORT: u16 = 7100;
const QUEUE: LockId = LockId(0);
const RESULTS: LockId = LockId(1);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub seed: u64,
    pub threads: u32,
    pub items: u32,
    /// Hash rounds per item.
    pub rounds: u32,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { seed: 1, threads: 4, items: 400, rounds: 2000 }
    }
}

pub fn compute_item(seed: u64, index: u32, rounds: u32) -> [u8; 32] {
    let mut h: [u8; 32] = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(index.to_le_bytes())
        .finalize()
        .into();
    for _ in 0..rounds {
        h = Sha256::digest(h).into();
    }
    h
}

fn digest_of(results: &[Option<[u8; 32]>]) -> String {
    let mut d = Sha256::new();
    for r in results {
        d.update(r.unwrap_or([0; 32]));
    }
    d.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Single-threaded reference digest.
pub fn golden_digest(cfg: &BatchConfig) -> String {
    let results: Vec<_> = (0..cfg.items).map(|i| Some(compute_item(cfg.seed, i, cfg.rounds))).collect();
    digest_of(&results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Shared {
    next: u32,
    results: Vec<Option<[u8; 32]>>,
    done: u32,
}

pub struct BatchJob {
    cfg: BatchConfig,
    shared: Mutex<Shared>,
    accepted: AtomicU64,
}

impl BatchJob {
    pub fn new(cfg: BatchConfig) -> Arc<Self> {
        let shared = Shared { next: 0, results: vec![None; cfg.items as usize], done: 0 };
        Self::from_shared(cfg, shared)
    }

    fn from_shared(cfg: BatchConfig, shared: Shared) -> Arc<Self> {
        assert!(cfg.threads > 0);
        Arc::new(Self { cfg, shared: Mutex::new(shared), accepted: AtomicU64::new(0) })
    }

    pub fn accepted(&self) -> u64 {
        self.accepted.load(Ordering::SeqCst)
    }

    pub fn done(&self) -> u32 {
        self.shared.lock().done
    }
}

#[derive(Serialize, Deserialize)]
struct Image {
    cfg: BatchConfig,
    shared: Shared,
}

impl App for BatchJob {
    fn capture(&self, _incremental: bool) -> (Vec<u8>, bool) {
        let img = Image { cfg: self.cfg.clone(), shared: self.shared.lock().clone() };
        (bincode::serialize(&img).expect("serialize batch state"), false)
    }

    fn program(self: Arc<Self>, t: ThreadId, snap: Option<&[u8]>) -> Result<Box<dyn Program>, String> {
        let s = match snap {
            Some(b) => bincode::deserialize(b).map_err(|e| format!("batch worker snapshot: {e}"))?,
            None => Worker { phase: if t.0 == 0 { Phase::Accept } else { Phase::Take }, stream: None, item: None, out: Vec::new() },
        };
        Ok(Box::new(BatchWorker { app: self, t, s }))
    }
}

pub struct BatchFactory;

impl AppFactory for BatchFactory {
    fn restore(&self, state: &[u8]) -> Result<Arc<dyn App>, String> {
        let img: Image = bincode::deserialize(state).map_err(|e| format!("batch image: {e}"))?;
        Ok(BatchJob::from_shared(img.cfg, img.shared))
    }

    fn merge_delta(&self, _base: &[u8], delta: &[u8]) -> Result<Vec<u8>, String> {
        Ok(delta.to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Phase {
    Accept,
    Take,
    TakeRelease,
    Compute,
    Store,
    StoreRelease,
    Check,
    CheckRelease,
    Yield,
    Send,
    Done,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Worker {
    phase: Phase,
    stream: Option<StreamId>,
    item: Option<(u32, Option<[u8; 32]>)>,
    out: Vec<u8>,
}

struct BatchWorker {
    app: Arc<BatchJob>,
    t: ThreadId,
    s: Worker,
}

impl Program for BatchWorker {
    fn next_op(&mut self) -> Step {
        let stream = self.s.stream.unwrap_or(StreamId::new(0, BATCH_PORT));
        Step::Op(match self.s.phase {
            Phase::Accept => Op::Sys(SysCall::StreamAccept),
            Phase::Take => Op::Lock { lock: QUEUE, op: LockOp::Acquire },
            Phase::TakeRelease => Op::Lock { lock: QUEUE, op: LockOp::Release },
            Phase::Compute | Phase::Yield => Op::Sys(SysCall::ClockRead),
            Phase::Store | Phase::Check => Op::Lock { lock: RESULTS, op: LockOp::Acquire },
            Phase::StoreRelease | Phase::CheckRelease => Op::Lock { lock: RESULTS, op: LockOp::Release },
            Phase::Send => Op::Sys(SysCall::StreamSend { stream, bytes: self.s.out.clone() }),
            Phase::Done => return Step::Done,
        })
    }

    fn complete(&mut self, r: OpResult) {
        let cfg = &self.app.cfg;
        self.s.phase = match self.s.phase {
            Phase::Accept => {
                self.s.stream = r.stream;
                self.app.accepted.fetch_add(1, Ordering::SeqCst);
                Phase::Take
            }
            Phase::Take => {
                let mut sh = self.app.shared.lock();
                self.s.item = (sh.next < cfg.items).then(|| {
                    sh.next += 1;
                    (sh.next - 1, None)
                });
                Phase::TakeRelease
            }
            Phase::TakeRelease => match self.s.item {
                Some(_) => Phase::Compute,
                None if self.t.0 == 0 => Phase::Check,
                None => Phase::Done,
            },
            Phase::Compute => {
                if let Some((i, v)) = &mut self.s.item {
                    *v = Some(compute_item(cfg.seed, *i, cfg.rounds));
                }
                Phase::Store
            }
            Phase::Store => {
                if let Some((i, v)) = self.s.item.take() {
                    let mut sh = self.app.shared.lock();
                    sh.results[i as usize] = v;
                    sh.done += 1;
                }
                Phase::StoreRelease
            }
            Phase::StoreRelease => Phase::Take,
            Phase::Check => {
                let sh = self.app.shared.lock();
                if sh.done == cfg.items {
                    self.s.out = format!("DIGEST {}\n", digest_of(&sh.results)).into_bytes();
                    self.s.item = Some((u32::MAX, None));
                } else {
                    self.s.item = None;
                }
                Phase::CheckRelease
            }
            Phase::CheckRelease => {
                if self.s.item.take().is_some() {
                    Phase::Send
                } else {
                    Phase::Yield
                }
            }
            Phase::Yield => {
                std::thread::sleep(std::time::Duration::from_micros(200));
                Phase::Check
            }
            Phase::Send | Phase::Done => Phase::Done,
        };
    }

    fn snapshot(&self) -> Vec<u8> {
        bincode::serialize(&self.s).expect("serialize batch worker")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_fixed_digest() {
        let cfg = BatchConfig { items: 20, rounds: 10, ..BatchConfig::default() };
        assert_eq!(golden_digest(&cfg), golden_digest(&cfg));
        let other = BatchConfig { seed: 2, ..cfg.clone() };
        assert_ne!(golden_digest(&cfg), golden_digest(&other));
    }

    #[test]
    fn item_is_iterated_hash() {
        let h0: [u8; 32] = Sha256::new().chain_update(5u64.to_le_bytes()).chain_update(3u32.to_le_bytes()).finalize().into();
        let h1: [u8; 32] = Sha256::digest(h0).into();
        assert_eq!(compute_item(5, 3, 1), h1);
    }
}
