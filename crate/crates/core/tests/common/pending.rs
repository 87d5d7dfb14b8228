//! Brute-force model for counting pending outputs over interleavings of log
//! appends and batch collections.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use hybrid_replica::ids::{StreamId, ThreadId};
use hybrid_replica::ndlog::{count_pending_outputs, params_digest, EpochLog, EventLog, SyscallEvent, SyscallKind};
use proptest::prelude::*;
use rand::Rng;

#[derive(Debug, Clone)]
pub enum Step {
    Append { thread: u32, send: bool },
    Collect,
}

pub fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        4 => (0u32..4, any::<bool>()).prop_map(|(thread, send)| Step::Append { thread, send }),
        1 => Just(Step::Collect),
    ]
}

fn event(thread: u32, call_seq: u64, send: bool) -> SyscallEvent {
    SyscallEvent {
        thread: ThreadId(thread),
        call_seq,
        kind: if send { SyscallKind::StreamSend } else { SyscallKind::ClockRead },
        params_digest: params_digest(&call_seq.to_le_bytes()),
        result: 1,
        payload: Vec::new(),
        stream: send.then(|| StreamId::new(thread, 80)),
        stream_seq: send.then_some(call_seq),
        rendezvous: None,
        output_seq: None,
        exit_stamp: 0,
    }
}

/// Sends appended after `k` collections; the brute-force side of the check.
struct Model {
    sends_after: Vec<u64>,
}

impl Model {
    fn pending(&self, received: u64, bbsn: u64) -> usize {
        self.sends_after.iter().filter(|&&k| k < received && k + 1 <= bbsn).count()
    }
}

pub fn run(steps: &[Step], received_frac: f64, bbsn_frac: f64) -> (usize, usize) {
    let log = EventLog::new(1);
    let pbsn = AtomicU64::new(0);
    let mut next_call: BTreeMap<u32, u64> = BTreeMap::new();
    let mut model = Model { sends_after: Vec::new() };
    let mut batches = Vec::new();
    for s in steps {
        match *s {
            Step::Append { thread, send } => {
                let seq = next_call.entry(thread).or_insert(0);
                let copy = send.then(|| (StreamId::new(thread, 80), *seq, vec![1]));
                log.append_syscall_event(event(thread, *seq, send), copy, |e| {
                    if send {
                        e.output_seq = Some(pbsn.load(Ordering::SeqCst) + 1);
                    }
                })
                .unwrap();
                *seq += 1;
                if send {
                    model.sends_after.push(batches.len() as u64);
                }
            }
            Step::Collect => batches.push(log.collect_batch(&pbsn)),
        }
    }
    let received = (batches.len() as f64 * received_frac).floor() as u64;
    let bbsn = (received as f64 * bbsn_frac).round() as u64;
    let mut backup = EpochLog::new(1);
    for b in &batches[..received as usize] {
        let wire = b.serialize();
        backup.merge(&hybrid_replica::ndlog::LogBatch::deserialize(&wire).unwrap()).unwrap();
    }
    (count_pending_outputs(&backup, bbsn), model.pending(received, bbsn))
}

/// A random interleaving drawn from `rng`, for use outside proptest.
pub fn random_steps(rng: &mut impl Rng) -> Vec<Step> {
    let n = rng.gen_range(0..80);
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.2) {
                Step::Collect
            } else {
                Step::Append { thread: rng.gen_range(0..4), send: rng.gen() }
            }
        })
        .collect()
}
