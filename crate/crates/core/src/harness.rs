//! Fault-injection campaigns: boot a replicated pair, drive verifying
//! clients, kill one host at a sampled time, await recovery and verify.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{App, AppFactory, EpochConfig};
use crate::ids::ThreadId;
use crate::net::{Network, TraceRecord};
use crate::replication::{BackupHost, FailoverReport, HeartbeatConfig, PrimaryHost, ReplicationConfig, BACKUP, PRIMARY};
use crate::runtime::Mitigation;
use crate::workloads::{
    await_digest, golden_digest, run_kv_client, verify_run, BatchConfig, BatchFactory, BatchJob, ClientConn, KvClientConfig,
    KvClientReport, KvConfig, KvFactory, KvServer, BATCH_PORT, KV_PORT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Benchmark {
    Kv,
    Batch,
}

impl Benchmark {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "kv" => Some(Self::Kv),
            "batch" => Some(Self::Batch),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Kv => "kv",
            Self::Batch => "batch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KillTarget {
    Primary,
    Backup,
    None,
}

impl KillTarget {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "primary" => Some(Self::Primary),
            "backup" => Some(Self::Backup),
            "none" => Some(Self::None),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Primary => "primary",
            Self::Backup => "backup",
            Self::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub threads: u32,
    pub busy_min: Duration,
    pub busy_max: Duration,
    pub sleep_min: Duration,
    pub sleep_max: Duration,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            threads: 1,
            busy_min: Duration::from_millis(20),
            busy_max: Duration::from_millis(80),
            sleep_min: Duration::from_millis(20),
            sleep_max: Duration::from_millis(120),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub benchmark: Benchmark,
    pub epoch_len: Duration,
    pub mitigation: Mitigation,
    pub runs: u32,
    /// Kill times are drawn uniformly from this middle fraction of the run.
    pub kill_window: f64,
    pub kill: KillTarget,
    pub perturb: Option<Perturbation>,
    pub seed: u64,
    /// Client traffic time per run.
    pub duration: Duration,
    /// Minimum client traffic after the service is back.
    pub post_recovery: Duration,
    pub workers: u32,
    pub race_knob: f64,
    pub racy_gap: Duration,
    pub racy_hold: Duration,
    pub net_delay: Duration,
    /// Unreplicated server, no backup and no kills.
    pub stock: bool,
    pub incremental: bool,
    pub trace_dir: Option<PathBuf>,
    pub parallel: u32,
    pub batch: BatchConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            benchmark: Benchmark::Kv,
            epoch_len: Duration::from_millis(100),
            mitigation: Mitigation::Off,
            runs: 10,
            kill_window: 0.8,
            kill: KillTarget::Primary,
            perturb: None,
            seed: 1,
            duration: Duration::from_millis(1000),
            post_recovery: Duration::from_millis(300),
            workers: 4,
            race_knob: 0.0,
            racy_gap: Duration::from_micros(600),
            racy_hold: Duration::from_millis(4),
            net_delay: Duration::from_micros(100),
            stock: false,
            incremental: true,
            trace_dir: None,
            parallel: 1,
            batch: BatchConfig::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.runs < 1 {
            return Err(ConfigError::Invalid("runs must be at least 1".into()));
        }
        if !(self.kill_window > 0.0 && self.kill_window < 1.0) {
            return Err(ConfigError::Invalid("kill_window must lie strictly between 0 and 1".into()));
        }
        if self.epoch_len.is_zero() || self.duration.is_zero() || self.workers == 0 || self.parallel == 0 {
            return Err(ConfigError::Invalid("epoch, duration, workers and parallel must be positive".into()));
        }
        if self.race_knob < 0.0 {
            return Err(ConfigError::Invalid("race_knob must not be negative".into()));
        }
        if let Some(p) = &self.perturb {
            if p.busy_min > p.busy_max || p.sleep_min > p.sleep_max {
                return Err(ConfigError::Invalid("perturbation ranges must have min <= max".into()));
            }
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue { key: key.into(), value: value.into() };
        let num = |v: &str| v.parse::<u64>().map_err(|_| bad());
        let float = |v: &str| v.parse::<f64>().map_err(|_| bad());
        let flag = |v: &str| match v {
            "true" | "on" | "yes" | "1" => Ok(true),
            "false" | "off" | "no" | "0" => Ok(false),
            _ => Err(bad()),
        };
        let ms = |v: &str| num(v).map(Duration::from_millis);
        match key {
            "benchmark" => self.benchmark = Benchmark::parse(value).ok_or_else(bad)?,
            "epoch_ms" => self.epoch_len = ms(value)?,
            "mitigation" => self.mitigation = Mitigation::parse(value).ok_or_else(bad)?,
            "runs" => self.runs = num(value)? as u32,
            "kill_window" => self.kill_window = float(value)?,
            "kill" => self.kill = KillTarget::parse(value).ok_or_else(bad)?,
            "perturb" => {
                if flag(value)? {
                    self.perturb.get_or_insert_with(Perturbation::default);
                } else {
                    self.perturb = None;
                }
            }
            "perturb_threads" => self.perturb.get_or_insert_with(Perturbation::default).threads = num(value)? as u32,
            "busy_min_ms" => self.perturb.get_or_insert_with(Perturbation::default).busy_min = ms(value)?,
            "busy_max_ms" => self.perturb.get_or_insert_with(Perturbation::default).busy_max = ms(value)?,
            "sleep_min_ms" => self.perturb.get_or_insert_with(Perturbation::default).sleep_min = ms(value)?,
            "sleep_max_ms" => self.perturb.get_or_insert_with(Perturbation::default).sleep_max = ms(value)?,
            "seed" => self.seed = num(value)?,
            "duration_ms" => self.duration = ms(value)?,
            "post_recovery_ms" => self.post_recovery = ms(value)?,
            "workers" => self.workers = num(value)? as u32,
            "race_knob" => self.race_knob = float(value)?,
            "racy_gap_us" => self.racy_gap = Duration::from_micros(num(value)?),
            "racy_hold_us" => self.racy_hold = Duration::from_micros(num(value)?),
            "net_delay_us" => self.net_delay = Duration::from_micros(num(value)?),
            "stock" => self.stock = flag(value)?,
            "incremental" => self.incremental = flag(value)?,
            "trace_dir" => self.trace_dir = Some(PathBuf::from(value)),
            "parallel" => self.parallel = num(value)? as u32,
            "batch_items" => self.batch.items = num(value)? as u32,
            "batch_rounds" => self.batch.rounds = num(value)? as u32,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Parses the key-value config format: one `key = value` per line,
    /// `#` starts a comment, blank lines are ignored.
    pub fn parse_config(text: &str, mut base: CampaignConfig) -> Result<CampaignConfig, ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: i + 1, msg: "expected key = value".into() });
            };
            base.set(k.trim(), v.trim())?;
        }
        base.validate()?;
        Ok(base)
    }

    fn replication(&self) -> ReplicationConfig {
        ReplicationConfig {
            epoch: EpochConfig { epoch_len: self.epoch_len, incremental: self.incremental },
            heartbeat: HeartbeatConfig::default(),
            mitigation: self.mitigation,
            ring_capacity: 1024,
            replicated: !self.stock,
            stall_tick: Duration::from_millis(10),
        }
    }
}

/// Result of one injected failure.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: u32,
    pub seed: u64,
    pub kill: String,
    pub kill_at_ms: Option<f64>,
    pub recovered: bool,
    /// Harness or environment failure; such runs are excluded from the rate.
    pub infra_fault: Option<String>,
    pub reason: Option<String>,
    pub interruption_ms: Option<f64>,
    pub recovery_latency_ms: Option<f64>,
    pub detection_ms: Option<f64>,
    pub restore_ms: Option<f64>,
    pub read_log_ms: Option<f64>,
    pub replay_ms: Option<f64>,
    pub others_ms: Option<f64>,
    pub pending_outputs: Option<usize>,
    pub replayed_events: Option<usize>,
    pub unsupported: bool,
    pub ops: u64,
    pub client_errors: u64,
    pub client_error_samples: Vec<String>,
    pub prefix_mismatches: u64,
    pub observer_violations: u64,
    pub racy_writes: u64,
    pub lockset_reports: usize,
    pub checkpoints: u64,
    pub mean_latency_us: f64,
    pub digest_ok: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

/// Wilson score interval for `k` successes in `n` trials at normal quantile `z`.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> Interval {
    if n == 0 {
        return Interval { low: 0.0, high: 1.0 };
    }
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = z / denom * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    Interval { low: (centre - half).max(0.0), high: (centre + half).min(1.0) }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: u64,
    pub infra_faults: u64,
    pub recovered: u64,
    pub recovery_rate: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub mean_interruption_ms: Option<f64>,
    pub mean_recovery_latency_ms: Option<f64>,
    pub mean_replay_ms: Option<f64>,
    pub mean_restore_ms: Option<f64>,
    pub mean_read_log_ms: Option<f64>,
    pub mean_others_ms: Option<f64>,
    pub total_ops: u64,
    pub client_errors: u64,
    pub observer_violations: u64,
    pub mean_latency_us: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0u64), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl Summary {
    pub fn of(runs: &[RunRecord]) -> Self {
        let valid: Vec<&RunRecord> = runs.iter().filter(|r| r.infra_fault.is_none()).collect();
        let n = valid.len() as u64;
        let k = valid.iter().filter(|r| r.recovered).count() as u64;
        let ci = (n > 0).then(|| wilson_interval(k, n, 1.96));
        Self {
            runs: runs.len() as u64,
            infra_faults: runs.len() as u64 - n,
            recovered: k,
            recovery_rate: (n > 0).then(|| k as f64 / n as f64),
            ci_low: ci.map(|c| c.low),
            ci_high: ci.map(|c| c.high),
            mean_interruption_ms: mean(valid.iter().filter_map(|r| r.interruption_ms)),
            mean_recovery_latency_ms: mean(valid.iter().filter_map(|r| r.recovery_latency_ms)),
            mean_replay_ms: mean(valid.iter().filter_map(|r| r.replay_ms)),
            mean_restore_ms: mean(valid.iter().filter_map(|r| r.restore_ms)),
            mean_read_log_ms: mean(valid.iter().filter_map(|r| r.read_log_ms)),
            mean_others_ms: mean(valid.iter().filter_map(|r| r.others_ms)),
            total_ops: valid.iter().map(|r| r.ops).sum(),
            client_errors: valid.iter().map(|r| r.client_errors).sum(),
            observer_violations: runs.iter().map(|r| r.observer_violations).sum(),
            mean_latency_us: mean(valid.iter().filter(|r| r.ops > 0).map(|r| r.mean_latency_us)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: CampaignConfig,
    pub runs: Vec<RunRecord>,
    pub summary: Summary,
}

impl ExperimentReport {
    pub fn new(config: CampaignConfig, runs: Vec<RunRecord>) -> Self {
        let summary = Summary::of(&runs);
        Self { config, runs, summary }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.2}"));
        writeln!(f, "runs {}  infra faults {}  recovered {}", self.runs, self.infra_faults, self.recovered)?;
        writeln!(
            f,
            "recovery rate {} (95% CI {} .. {})",
            self.recovery_rate.map_or("-".to_string(), |r| format!("{:.1}%", r * 100.0)),
            self.ci_low.map_or("-".to_string(), |r| format!("{:.1}%", r * 100.0)),
            self.ci_high.map_or("-".to_string(), |r| format!("{:.1}%", r * 100.0)),
        )?;
        writeln!(
            f,
            "interruption ms {}  recovery latency ms {}",
            opt(self.mean_interruption_ms),
            opt(self.mean_recovery_latency_ms)
        )?;
        writeln!(
            f,
            "restore ms {}  read log ms {}  replay ms {}  others ms {}",
            opt(self.mean_restore_ms),
            opt(self.mean_read_log_ms),
            opt(self.mean_replay_ms),
            opt(self.mean_others_ms)
        )?;
        write!(
            f,
            "ops {}  client errors {}  observer violations {}  mean latency us {}",
            self.total_ops,
            self.client_errors,
            self.observer_violations,
            opt(self.mean_latency_us)
        )
    }
}

fn spawn_perturbation(p: Perturbation, seed: u64, stop: Arc<AtomicBool>) -> Vec<JoinHandle<()>> {
    (0..p.threads)
        .map(|i| {
            let stop = stop.clone();
            std::thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                let pick = |rng: &mut ChaCha8Rng, lo: Duration, hi: Duration| {
                    if hi <= lo {
                        lo
                    } else {
                        rng.gen_range(lo..=hi)
                    }
                };
                while !stop.load(Ordering::SeqCst) {
                    let until = Instant::now() + pick(&mut rng, p.busy_min, p.busy_max);
                    while Instant::now() < until && !stop.load(Ordering::SeqCst) {
                        std::hint::spin_loop();
                    }
                    let mut left = pick(&mut rng, p.sleep_min, p.sleep_max);
                    while !left.is_zero() && !stop.load(Ordering::SeqCst) {
                        let step = left.min(Duration::from_millis(10));
                        std::thread::sleep(step);
                        left -= step;
                    }
                }
            })
        })
        .collect()
}

/// Longest client-observed gap between consecutive responses that spans `at`.
fn interruption(reports: &[KvClientReport], at_ms: f64) -> Option<f64> {
    reports
        .iter()
        .filter_map(|r| {
            let i = r.arrivals_ms.iter().position(|&t| t > at_ms)?;
            let before = if i == 0 { return None } else { r.arrivals_ms[i - 1] };
            Some(r.arrivals_ms[i] - before)
        })
        .fold(None, |m: Option<f64>, g| Some(m.map_or(g, |m| m.max(g))))
}

enum Workload {
    Kv(Arc<KvServer>),
    Batch(Arc<BatchJob>),
}

impl Workload {
    fn accepted(&self) -> u64 {
        match self {
            Self::Kv(k) => k.accepted(),
            Self::Batch(b) => b.accepted(),
        }
    }
}

fn wait_for(limit: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + limit;
    while Instant::now() < deadline {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(1));
    }
    f()
}

struct Pair {
    net: Arc<Network>,
    primary: Arc<PrimaryHost>,
    backup: Option<Arc<BackupHost>>,
}

impl Pair {
    fn shutdown(&self) {
        self.primary.shutdown();
        if let Some(b) = &self.backup {
            b.shutdown();
        }
        self.net.shutdown();
    }
}

/// Boots a pair, drives clients, injects one failure and verifies.
pub fn run_one(cfg: &CampaignConfig, run: u32, seed: u64) -> RunRecord {
    let mut rec = RunRecord { run, seed, kill: if cfg.stock { "none".into() } else { cfg.kill.name().into() }, ..RunRecord::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = Instant::now();
    let net = Network::start(cfg.net_delay);
    if let Some(dir) = &cfg.trace_dir {
        let _ = std::fs::create_dir_all(dir);
        if let Err(e) = net.enable_trace(&dir.join(format!("run-{run:04}.jsonl")), origin) {
            log::warn!("trace disabled: {e}");
        }
    }
    let repl = cfg.replication();
    let (workload, app, factory): (Workload, Arc<dyn App>, Arc<dyn AppFactory>) = match cfg.benchmark {
        Benchmark::Kv => {
            let kcfg = KvConfig {
                workers: cfg.workers,
                race_knob: cfg.race_knob,
                race_phase: rng.gen(),
                racy_gap: cfg.racy_gap,
                racy_hold: cfg.racy_hold,
                ..KvConfig::default()
            };
            let s = KvServer::new(kcfg.clone());
            (Workload::Kv(s.clone()), s, Arc::new(KvFactory { cfg: kcfg }))
        }
        Benchmark::Batch => {
            let bcfg = BatchConfig { seed: cfg.batch.seed ^ seed, threads: cfg.workers, ..cfg.batch.clone() };
            let j = BatchJob::new(bcfg);
            (Workload::Batch(j.clone()), j, Arc::new(BatchFactory))
        }
    };
    let host_seed = rng.gen();
    let primary = PrimaryHost::new(&net, app, repl.clone(), origin, host_seed);
    let backup = (!cfg.stock).then(|| BackupHost::new(&net, factory, repl.clone(), origin, host_seed));
    net.set_service_route(if cfg.stock { PRIMARY } else { BACKUP });
    net.observer.set_enforcing(!cfg.stock);
    let pair = Pair { net: net.clone(), primary: primary.clone(), backup: backup.clone() };

    let threads: Vec<ThreadId> = (0..cfg.workers).map(ThreadId).collect();
    if let Err(e) = primary.boot(&threads) {
        rec.infra_fault = Some(format!("boot: {e}"));
        pair.shutdown();
        return rec;
    }
    primary.start_services();
    if let Some(b) = &backup {
        b.start_services();
    }

    let (port, conns) = match cfg.benchmark {
        Benchmark::Kv => (KV_PORT, cfg.workers),
        Benchmark::Batch => (BATCH_PORT, 1),
    };
    let mut clients = Vec::new();
    for c in 0..conns {
        match ClientConn::connect(&net, c + 1, port, Duration::from_secs(2)) {
            Ok(conn) => clients.push(conn),
            Err(e) => {
                rec.infra_fault = Some(format!("client {}: {e}", c + 1));
                pair.shutdown();
                return rec;
            }
        }
    }
    if !wait_for(Duration::from_secs(2), || workload.accepted() == conns as u64) {
        rec.infra_fault = Some("workers did not accept all connections".into());
        pair.shutdown();
        return rec;
    }
    if !cfg.stock {
        if !primary.checkpoint_epoch() {
            rec.infra_fault = Some("initial checkpoint not committed".into());
            pair.shutdown();
            return rec;
        }
        primary.start_epochs();
    }

    let stop = Arc::new(AtomicBool::new(false));
    let perturb_stop = Arc::new(AtomicBool::new(false));
    let perturbers = cfg.perturb.map(|p| spawn_perturbation(p, rng.gen(), perturb_stop.clone())).unwrap_or_default();
    let client_seed: u64 = rng.gen();
    let mut kv_handles = Vec::new();
    let mut batch_conn = None;
    match cfg.benchmark {
        Benchmark::Kv => {
            for conn in clients {
                let stop = stop.clone();
                let ccfg = KvClientConfig::new(conn.stream().client, client_seed);
                kv_handles.push(std::thread::spawn(move || run_kv_client(conn, &ccfg, &stop, origin)));
            }
        }
        Benchmark::Batch => batch_conn = clients.pop(),
    }
    let batch_waiter = batch_conn.map(|mut conn| {
        let limit = cfg.duration * 10 + Duration::from_secs(10);
        std::thread::spawn(move || (await_digest(&mut conn, limit), conn.prefix_mismatches()))
    });

    let started = Instant::now();
    let lo = (1.0 - cfg.kill_window) / 2.0;
    let frac = lo + rng.gen::<f64>() * cfg.kill_window;
    let kill_after = cfg.duration.mul_f64(frac);
    let target = if cfg.stock { KillTarget::None } else { cfg.kill };
    let mut failover: Option<FailoverReport> = None;
    let mut kill_at = None;
    if target != KillTarget::None {
        let wake = started + kill_after;
        let now = Instant::now();
        if wake > now {
            std::thread::sleep(wake - now);
        }
        let at = Instant::now();
        kill_at = Some(at);
        rec.kill_at_ms = Some(at.duration_since(origin).as_secs_f64() * 1e3);
        match target {
            KillTarget::Primary => {
                primary.kill();
                let b = backup.as_ref().expect("replicated run has a backup");
                failover = b.wait_report(Duration::from_secs(10));
                if let Some(d) = b.detected_at() {
                    rec.detection_ms = Some(d.duration_since(at).as_secs_f64() * 1e3);
                }
            }
            KillTarget::Backup => {
                backup.as_ref().expect("replicated run has a backup").kill();
                wait_for(Duration::from_secs(2), || primary.backup_failed_at().is_some());
                if let Some(d) = primary.backup_failed_at() {
                    rec.detection_ms = Some(d.duration_since(at).as_secs_f64() * 1e3);
                }
            }
            KillTarget::None => {}
        }
    }
    let end = (started + cfg.duration).max(Instant::now() + cfg.post_recovery);
    let batch_result = match batch_waiter {
        Some(h) => {
            let r = h.join().unwrap_or((None, 0));
            Some(r)
        }
        None => {
            let now = Instant::now();
            if end > now {
                std::thread::sleep(end - now);
            }
            None
        }
    };
    stop.store(true, Ordering::SeqCst);
    let reports: Vec<KvClientReport> = kv_handles.into_iter().filter_map(|h| h.join().ok()).collect();
    perturb_stop.store(true, Ordering::SeqCst);
    for h in perturbers {
        let _ = h.join();
    }

    rec.checkpoints = primary.metrics().checkpoints;
    rec.observer_violations = net.observer.violations();
    if rec.observer_violations > 0 {
        log::error!("observer: {:?}", net.observer.violation_details());
    }
    let verdict = verify_run(&reports);
    rec.ops = verdict.ops;
    rec.client_errors = verdict.error_count;
    rec.prefix_mismatches = verdict.prefix_mismatches;
    rec.client_error_samples = verdict.mismatches.iter().take(5).cloned().collect();
    let lat: Vec<f64> = reports.iter().filter(|r| r.ops > 0).map(|r| r.mean_latency_us * r.ops as f64).collect();
    if rec.ops > 0 {
        rec.mean_latency_us = lat.iter().sum::<f64>() / rec.ops as f64;
    }
    match &workload {
        Workload::Kv(k) => {
            rec.racy_writes = k.racy_writes();
            rec.lockset_reports = k.lockset().map_or(0, |l| l.reports().len());
        }
        Workload::Batch(_) => {}
    }
    let mut ok = verdict.ok;
    if let Some((digest, mism)) = batch_result {
        let golden = golden_digest(&BatchConfig { seed: cfg.batch.seed ^ seed, threads: cfg.workers, ..cfg.batch.clone() });
        let good = digest.as_deref() == Some(golden.as_str());
        rec.digest_ok = Some(good);
        rec.prefix_mismatches += mism;
        ok &= good && mism == 0;
        if !good {
            rec.reason = Some(format!("digest {:?} differs from golden", digest));
        }
    }
    if let Some(at) = kill_at {
        let at_ms = at.duration_since(origin).as_secs_f64() * 1e3;
        rec.interruption_ms = interruption(&reports, at_ms);
    }
    match target {
        KillTarget::Primary => {
            let r = failover.clone().unwrap_or_else(|| FailoverReport { reason: Some("no failover report".into()), ..Default::default() });
            rec.restore_ms = Some(r.restore_ms);
            rec.read_log_ms = Some(r.read_log_ms);
            rec.replay_ms = Some(r.replay_ms);
            rec.others_ms = Some(r.others_ms);
            rec.pending_outputs = Some(r.pending_outputs);
            rec.replayed_events = Some(r.replayed_events);
            rec.unsupported = r.unsupported;
            if !r.recovered {
                rec.reason = r.reason.clone().or(rec.reason.take());
            }
            ok &= r.recovered;
            rec.recovery_latency_ms = rec.interruption_ms.map(|i| i - HeartbeatConfig::default().timeout.as_secs_f64() * 1e3);
        }
        KillTarget::Backup => ok &= primary.backup_failed_at().is_some(),
        KillTarget::None => {}
    }
    if !verdict.ok && rec.reason.is_none() {
        rec.reason = verdict.mismatches.first().cloned();
    }
    rec.recovered = ok;
    pair.shutdown();
    rec
}

/// Runs a campaign; run `i` uses the `i`-th draw of the campaign generator
/// as its seed, so the same seed reproduces the same kill schedule.
pub fn run_campaign(cfg: &CampaignConfig, mut progress: impl FnMut(&RunRecord)) -> ExperimentReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.runs).map(|_| rng.gen()).collect();
    let mut runs = Vec::with_capacity(cfg.runs as usize);
    if cfg.parallel <= 1 {
        for (i, &s) in seeds.iter().enumerate() {
            let r = run_one(cfg, i as u32, s);
            progress(&r);
            runs.push(r);
        }
    } else {
        for chunk in seeds.iter().enumerate().collect::<Vec<_>>().chunks(cfg.parallel as usize) {
            let hs: Vec<_> = chunk
                .iter()
                .map(|&(i, &s)| {
                    let cfg = cfg.clone();
                    std::thread::spawn(move || run_one(&cfg, i as u32, s))
                })
                .collect();
            for h in hs {
                if let Ok(r) = h.join() {
                    progress(&r);
                    runs.push(r);
                }
            }
        }
    }
    ExperimentReport::new(cfg.clone(), runs)
}

pub const RUNS_FILE: &str = "runs.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Serialize)]
struct SummaryRow<'a> {
    benchmark: &'a str,
    kill: &'a str,
    mitigation: &'a str,
    epoch_ms: u128,
    seed: u64,
    runs: u64,
    infra_faults: u64,
    recovered: u64,
    recovery_rate: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    mean_interruption_ms: Option<f64>,
    mean_recovery_latency_ms: Option<f64>,
    mean_replay_ms: Option<f64>,
    mean_restore_ms: Option<f64>,
    mean_read_log_ms: Option<f64>,
    mean_others_ms: Option<f64>,
    total_ops: u64,
    client_errors: u64,
    observer_violations: u64,
    mean_latency_us: Option<f64>,
}

/// Writes per-run JSON lines, a one-row CSV aggregate and the full report.
pub fn report_emit(r: &ExperimentReport, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let runs = dir.join(RUNS_FILE);
    let mut w = BufWriter::new(File::create(&runs)?);
    for run in &r.runs {
        writeln!(w, "{}", serde_json::to_string(run)?)?;
    }
    w.flush()?;
    let summary = dir.join(SUMMARY_FILE);
    let mut c = csv::Writer::from_path(&summary)?;
    c.serialize(SummaryRow {
        benchmark: r.config.benchmark.name(),
        kill: if r.config.stock { "none" } else { r.config.kill.name() },
        mitigation: r.config.mitigation.name(),
        epoch_ms: r.config.epoch_len.as_millis(),
        seed: r.config.seed,
        runs: r.summary.runs,
        infra_faults: r.summary.infra_faults,
        recovered: r.summary.recovered,
        recovery_rate: r.summary.recovery_rate,
        ci_low: r.summary.ci_low,
        ci_high: r.summary.ci_high,
        mean_interruption_ms: r.summary.mean_interruption_ms,
        mean_recovery_latency_ms: r.summary.mean_recovery_latency_ms,
        mean_replay_ms: r.summary.mean_replay_ms,
        mean_restore_ms: r.summary.mean_restore_ms,
        mean_read_log_ms: r.summary.mean_read_log_ms,
        mean_others_ms: r.summary.mean_others_ms,
        total_ops: r.summary.total_ops,
        client_errors: r.summary.client_errors,
        observer_violations: r.summary.observer_violations,
        mean_latency_us: r.summary.mean_latency_us,
    })
    .map_err(std::io::Error::other)?;
    c.flush()?;
    let report = dir.join(REPORT_FILE);
    std::fs::write(&report, serde_json::to_vec_pretty(r)?)?;
    Ok(vec![runs, summary, report])
}

/// Reads the per-run records written by [`report_emit`].
pub fn load_runs(path: &Path) -> std::io::Result<Vec<RunRecord>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub records: u64,
    pub by_event: BTreeMap<String, u64>,
    pub client_bytes: u64,
    pub violations: Vec<String>,
}

/// Re-checks a wire trace offline: every enforced delivery of server bytes
/// must lie within the coverage recorded before it.
pub fn replay_trace(path: &Path) -> std::io::Result<TraceSummary> {
    let f = BufReader::new(File::open(path)?);
    let mut s = TraceSummary::default();
    let mut covered: BTreeMap<crate::ids::StreamId, u64> = BTreeMap::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(std::io::Error::other)?;
        s.records += 1;
        *s.by_event.entry(rec.ev.clone()).or_default() += 1;
        let Some(stream) = rec.stream else { continue };
        if rec.ev == "COVER" {
            let e = covered.entry(stream).or_default();
            *e = (*e).max(rec.seq);
            continue;
        }
        let to_client = rec.to_server == Some(false) && rec.dst.as_deref().is_some_and(|d| d.starts_with("client"));
        if rec.ev == "DATA" && to_client {
            s.client_bytes += rec.len;
            let c = covered.get(&stream).copied().unwrap_or(0);
            if rec.enforcing && rec.seq + rec.len > c {
                s.violations.push(format!("{}us {stream}: delivered to {} with coverage {c}", rec.t_us, rec.seq + rec.len));
            }
        }
    }
    Ok(s)
}
