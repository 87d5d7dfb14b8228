//! Workloads on an unreplicated host: client verification, injected server
//! bugs, the lockset audit and batch determinism.

use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use hybrid_replica::checkpoint::App;
use hybrid_replica::ids::ThreadId;
use hybrid_replica::net::Network;
use hybrid_replica::replication::{PrimaryHost, ReplicationConfig, PRIMARY};
use hybrid_replica::workloads::{
    await_digest, golden_digest, run_kv_client, verify_run, BatchConfig, BatchJob, ClientConn, KvClientConfig,
    KvConfig, KvFault, KvServer, Verdict, BATCH_PORT, KV_PORT,
};

static SERIAL: Mutex<()> = Mutex::new(());

/// Runs timing-sensitive tests one at a time.
fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn stock() -> ReplicationConfig {
    ReplicationConfig { replicated: false, ..ReplicationConfig::default() }
}

fn host(net: &Arc<Network>, app: Arc<dyn App>, threads: u32) -> Arc<PrimaryHost> {
    let origin = Instant::now();
    let h = PrimaryHost::new(net, app, stock(), origin, 3);
    net.set_service_route(PRIMARY);
    let ts: Vec<ThreadId> = (0..threads).map(ThreadId).collect();
    h.boot(&ts).unwrap();
    h.start_services();
    h
}

fn serve_kv(cfg: KvConfig, ops_per_client: u64) -> (Verdict, Arc<KvServer>) {
    let net = Network::start(Duration::from_micros(50));
    let server = KvServer::new(cfg.clone());
    let h = host(&net, server.clone(), cfg.workers);
    let origin = Instant::now();
    let stop = Arc::new(AtomicBool::new(false));
    let mut hs = Vec::new();
    for c in 1..=cfg.workers {
        let conn = ClientConn::connect(&net, c, KV_PORT, Duration::from_secs(2)).unwrap();
        let ccfg = KvClientConfig { op_limit: Some(ops_per_client), ..KvClientConfig::new(c, 17) };
        let stop = stop.clone();
        hs.push(std::thread::spawn(move || run_kv_client(conn, &ccfg, &stop, origin)));
    }
    let reports: Vec<_> = hs.into_iter().map(|h| h.join().unwrap()).collect();
    h.shutdown();
    net.shutdown();
    (verify_run(&reports), server)
}

#[test]
fn race_free_store_matches_client_shadow() {
    let _serial = serial();
    let (v, server) = serve_kv(KvConfig { workers: 4, lockset: false, ..KvConfig::default() }, 25_000);
    assert!(v.ok, "{:?}", v.mismatches);
    assert_eq!(v.ops, 100_000);
    assert_eq!(v.error_count, 0);
    assert!(server.len() > 0);
    assert_eq!(server.racy_writes(), 0);
}

#[test]
fn lost_write_is_caught_by_client() {
    let _serial = serial();
    let cfg = KvConfig { fault: Some(KvFault::LostWrite { every: 7 }), lockset: false, ..KvConfig::default() };
    let (v, _) = serve_kv(cfg, 500);
    assert!(!v.ok);
    assert!(v.error_count > 0);
}

#[test]
fn duplicate_response_is_caught_by_client() {
    let _serial = serial();
    let cfg = KvConfig { fault: Some(KvFault::DuplicateResponse { every: 11 }), lockset: false, ..KvConfig::default() };
    let (v, _) = serve_kv(cfg, 500);
    assert!(!v.ok);
}

#[test]
fn lockset_is_clean_without_races() {
    let _serial = serial();
    let (v, server) = serve_kv(KvConfig { lockset: true, ..KvConfig::default() }, 2_000);
    assert!(v.ok);
    assert!(server.lockset().unwrap().reports().is_empty());
}

#[test]
fn lockset_reports_injected_races() {
    let _serial = serial();
    let cfg = KvConfig { lockset: true, race_knob: 200.0, racy_gap: Duration::from_micros(50), racy_hold: Duration::from_micros(50), ..KvConfig::default() };
    let (v, server) = serve_kv(cfg, 3_000);
    assert!(v.ok, "{:?}", v.mismatches);
    assert!(server.racy_writes() > 0);
    let reports = server.lockset().unwrap().reports();
    assert!(!reports.is_empty());
}

#[test]
fn racy_writes_follow_the_configured_rate() {
    let _serial = serial();
    let knob = 100.0;
    let start = Instant::now();
    let cfg = KvConfig { race_knob: knob, racy_gap: Duration::from_micros(20), racy_hold: Duration::from_micros(20), lockset: false, ..KvConfig::default() };
    let (_, server) = serve_kv(cfg, 4_000);
    let secs = start.elapsed().as_secs_f64();
    let rate = server.racy_writes() as f64 / secs;
    assert!(rate > knob * 0.5 && rate < knob * 1.5, "rate {rate:.1}/s over {secs:.2}s");
}

fn batch_digest(cfg: BatchConfig) -> Option<String> {
    let net = Network::start(Duration::from_micros(50));
    let job = BatchJob::new(cfg.clone());
    let h = host(&net, job, cfg.threads);
    let mut conn = ClientConn::connect(&net, 1, BATCH_PORT, Duration::from_secs(2)).unwrap();
    let d = await_digest(&mut conn, Duration::from_secs(60));
    h.shutdown();
    net.shutdown();
    d
}

#[test]
fn batch_digest_is_independent_of_thread_count() {
    let _serial = serial();
    let base = BatchConfig { seed: 9, threads: 1, items: 120, rounds: 200 };
    let golden = golden_digest(&base);
    for threads in [1, 2, 4] {
        let cfg = BatchConfig { threads, ..base.clone() };
        assert_eq!(golden_digest(&cfg), golden);
        assert_eq!(batch_digest(cfg).as_deref(), Some(golden.as_str()), "{threads} threads");
    }
}
