//! Test applications: a key-value server, a batch job and verifying clients.

pub mod batch;
pub mod client;
pub mod kv;
pub mod lockset;

pub use batch::{golden_digest, BatchConfig, BatchFactory, BatchJob, BATCH_PORT};
pub use client::{await_digest, run_kv_client, verify_run, ClientConn, KvClientConfig, KvClientReport, Verdict};
pub use kv::{KvConfig, KvFactory, KvFault, KvServer, KV_PORT};
