//! End-to-end failover on small campaigns.

use std::sync::{Mutex, MutexGuard};
use std::time::Duration;

use hybrid_replica::harness::{replay_trace, run_campaign, Benchmark, CampaignConfig, KillTarget, Summary};

static SERIAL: Mutex<()> = Mutex::new(());

/// Runs timing-sensitive tests one at a time.
fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn small(kill: KillTarget) -> CampaignConfig {
    CampaignConfig { runs: 3, kill, duration: Duration::from_millis(600), seed: 21, ..CampaignConfig::default() }
}

fn all_recovered(cfg: &CampaignConfig) -> Summary {
    let report = run_campaign(cfg, |_| {});
    for r in &report.runs {
        assert!(r.infra_fault.is_none(), "run {}: {:?}", r.run, r.infra_fault);
        assert!(r.recovered, "run {}: {:?}", r.run, r.reason);
        assert_eq!(r.client_errors, 0, "{:?}", r.client_error_samples);
        assert_eq!(r.prefix_mismatches, 0);
        assert_eq!(r.observer_violations, 0);
    }
    report.summary
}

#[test]
fn primary_failure_is_recovered_by_replay() {
    let _serial = serial();
    let s = all_recovered(&small(KillTarget::Primary));
    assert_eq!(s.recovered, 3);
}

#[test]
fn backup_failure_leaves_primary_serving() {
    let _serial = serial();
    let cfg = small(KillTarget::Backup);
    let report = run_campaign(&cfg, |_| {});
    for r in &report.runs {
        assert!(r.recovered, "{:?}", r.reason);
        let i = r.interruption_ms.expect("interruption measured");
        assert!(i < 400.0, "interruption {i}ms");
    }
}

#[test]
fn batch_job_survives_primary_failure() {
    let _serial = serial();
    let cfg = CampaignConfig {
        benchmark: Benchmark::Batch,
        duration: Duration::from_millis(400),
        batch: hybrid_replica::workloads::BatchConfig { items: 200, rounds: 1000, ..Default::default() },
        ..small(KillTarget::Primary)
    };
    let report = run_campaign(&cfg, |_| {});
    for r in &report.runs {
        assert!(r.recovered, "{:?}", r.reason);
        assert_eq!(r.digest_ok, Some(true));
    }
}

#[test]
fn full_checkpoints_recover_too() {
    let _serial = serial();
    all_recovered(&CampaignConfig { incremental: false, runs: 2, ..small(KillTarget::Primary) });
}

#[test]
fn stock_server_runs_without_backup() {
    let _serial = serial();
    let cfg = CampaignConfig { stock: true, runs: 1, ..small(KillTarget::None) };
    let report = run_campaign(&cfg, |_| {});
    let r = &report.runs[0];
    assert!(r.recovered);
    assert!(r.ops > 0);
    assert_eq!(r.checkpoints, 0);
}

#[test]
fn wire_trace_shows_no_early_release() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg = CampaignConfig { runs: 1, trace_dir: Some(dir.path().to_path_buf()), ..small(KillTarget::Primary) };
    let report = run_campaign(&cfg, |_| {});
    assert!(report.runs[0].recovered);
    let trace = dir.path().join("run-0000.jsonl");
    let s = replay_trace(&trace).unwrap();
    assert!(s.records > 0);
    assert!(s.client_bytes > 0);
    assert!(s.violations.is_empty(), "{:?}", s.violations);
}
