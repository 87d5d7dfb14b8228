//! Primary-backup replication of a multi-threaded server: periodic
//! checkpoints, user-level record/replay of nondeterministic events between
//! them, output gating on log commitment, and failover with replay of the
//! last partial epoch. Includes a simulated network, test workloads and a
//! fault-injection harness.

pub mod checkpoint;
pub mod codec;
pub mod harness;
pub mod ids;
pub mod ndlog;
pub mod net;
pub mod netgate;
pub mod replication;
pub mod runtime;
pub mod tcp;
pub mod workloads;
