use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use hybrid_replica::harness::{
    load_runs, replay_trace, report_emit, run_campaign, Benchmark, CampaignConfig, ExperimentReport, KillTarget,
    Perturbation, Summary, RUNS_FILE,
};
use hybrid_replica::runtime::Mitigation;

#[derive(Parser)]
#[command(name = "hybrid-replica", version, about = "Fault-injection campaigns for a replicated multi-threaded server")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a fault-injection campaign and write its report files.
    Run(RunArgs),
    /// Summarize per-run records from an earlier campaign.
    Report {
        /// Campaign output directory or a runs.jsonl file.
        path: PathBuf,
    },
    /// Re-check a wire trace for output released before it was covered.
    ReplayTrace {
        trace: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Key-value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "campaign-out")]
    out: PathBuf,
    /// kv or batch.
    #[arg(long)]
    benchmark: Option<String>,
    #[arg(long)]
    epoch_ms: Option<u64>,
    /// off, order_only or order_plus_timing.
    #[arg(long)]
    mitigation: Option<String>,
    #[arg(long)]
    runs: Option<u32>,
    #[arg(long)]
    kill_window: Option<f64>,
    /// primary, backup or none.
    #[arg(long)]
    kill: Option<String>,
    #[arg(long)]
    perturb: bool,
    #[arg(long)]
    perturb_threads: Option<u32>,
    #[arg(long)]
    busy_min_ms: Option<u64>,
    #[arg(long)]
    busy_max_ms: Option<u64>,
    #[arg(long)]
    sleep_min_ms: Option<u64>,
    #[arg(long)]
    sleep_max_ms: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    duration_ms: Option<u64>,
    /// Minimum client traffic after recovery.
    #[arg(long)]
    post_recovery_ms: Option<u64>,
    #[arg(long)]
    workers: Option<u32>,
    /// Racy statistics writes per second.
    #[arg(long)]
    race_knob: Option<f64>,
    #[arg(long)]
    racy_gap_us: Option<u64>,
    /// Busy work after a racy store.
    #[arg(long)]
    racy_hold_us: Option<u64>,
    #[arg(long)]
    net_delay_us: Option<u64>,
    /// Run without replication.
    #[arg(long)]
    stock: bool,
    #[arg(long)]
    full_checkpoints: bool,
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    #[arg(long)]
    parallel: Option<u32>,
    #[arg(long)]
    batch_items: Option<u32>,
    /// Hash rounds per batch item.
    #[arg(long)]
    batch_rounds: Option<u32>,
}

fn build_config(a: &RunArgs) -> Result<CampaignConfig, String> {
    let mut c = CampaignConfig::default();
    if let Some(p) = &a.config {
        let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
        c = CampaignConfig::parse_config(&text, c).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    if let Some(b) = &a.benchmark {
        c.benchmark = Benchmark::parse(b).ok_or_else(|| format!("unknown benchmark {b:?}"))?;
    }
    if let Some(m) = &a.mitigation {
        c.mitigation = Mitigation::parse(m).ok_or_else(|| format!("unknown mitigation {m:?}"))?;
    }
    if let Some(k) = &a.kill {
        c.kill = KillTarget::parse(k).ok_or_else(|| format!("unknown kill target {k:?}"))?;
    }
    let ms = Duration::from_millis;
    if let Some(v) = a.epoch_ms {
        c.epoch_len = ms(v);
    }
    if let Some(v) = a.runs {
        c.runs = v;
    }
    if let Some(v) = a.kill_window {
        c.kill_window = v;
    }
    let perturb_flags = [a.busy_min_ms, a.busy_max_ms, a.sleep_min_ms, a.sleep_max_ms].iter().any(Option::is_some)
        || a.perturb_threads.is_some();
    if a.perturb || perturb_flags {
        let p = c.perturb.get_or_insert_with(Perturbation::default);
        if let Some(v) = a.perturb_threads {
            p.threads = v;
        }
        if let Some(v) = a.busy_min_ms {
            p.busy_min = ms(v);
        }
        if let Some(v) = a.busy_max_ms {
            p.busy_max = ms(v);
        }
        if let Some(v) = a.sleep_min_ms {
            p.sleep_min = ms(v);
        }
        if let Some(v) = a.sleep_max_ms {
            p.sleep_max = ms(v);
        }
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.duration_ms {
        c.duration = ms(v);
    }
    if let Some(v) = a.post_recovery_ms {
        c.post_recovery = ms(v);
    }
    if let Some(v) = a.workers {
        c.workers = v;
    }
    if let Some(v) = a.race_knob {
        c.race_knob = v;
    }
    if let Some(v) = a.racy_gap_us {
        c.racy_gap = Duration::from_micros(v);
    }
    if let Some(v) = a.racy_hold_us {
        c.racy_hold = Duration::from_micros(v);
    }
    if let Some(v) = a.net_delay_us {
        c.net_delay = Duration::from_micros(v);
    }
    if a.stock {
        c.stock = true;
    }
    if a.full_checkpoints {
        c.incremental = false;
    }
    if let Some(d) = &a.trace_dir {
        c.trace_dir = Some(d.clone());
    }
    if let Some(v) = a.parallel {
        c.parallel = v;
    }
    if let Some(v) = a.batch_items {
        c.batch.items = v;
    }
    if let Some(v) = a.batch_rounds {
        c.batch.rounds = v;
    }
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run(a) => {
            let cfg = match build_config(&a) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("usage error: {e}");
                    return ExitCode::from(2);
                }
            };
            let report: ExperimentReport = run_campaign(&cfg, |r| {
                let status = match (&r.infra_fault, r.recovered) {
                    (Some(f), _) => format!("infrastructure fault: {f}"),
                    (None, true) => "recovered".to_string(),
                    (None, false) => format!("FAILED: {}", r.reason.as_deref().unwrap_or("unknown")),
                };
                let int = r.interruption_ms.map_or(String::new(), |i| format!(" interruption {i:.1}ms"));
                eprintln!("run {:4} kill {:7} ops {:6}{int} {status}", r.run, r.kill, r.ops);
            });
            match report_emit(&report, &a.out) {
                Ok(files) => {
                    println!("{}", report.summary);
                    for f in files {
                        println!("wrote {}", f.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("writing report: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Cmd::Report { path } => {
            let file = if path.is_dir() { path.join(RUNS_FILE) } else { path };
            match load_runs(&file) {
                Ok(runs) => {
                    println!("{}", Summary::of(&runs));
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{}: {e}", file.display());
                    ExitCode::FAILURE
                }
            }
        }
        Cmd::ReplayTrace { trace } => match replay_trace(&trace) {
            Ok(s) => {
                println!("records {}  client bytes {}", s.records, s.client_bytes);
                for (ev, n) in &s.by_event {
                    println!("  {ev:10} {n}");
                }
                println!("release violations {}", s.violations.len());
                for v in s.violations.iter().take(20) {
                    println!("  {v}");
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{}: {e}", trace.display());
                ExitCode::FAILURE
            }
        },
    }
}
