//! Experiment runner: thin subcommand front end over the library.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use splitsim::config::ExperimentConfig;
use splitsim::experiments::{self, SummaryRow};

#[derive(Parser)]
#[command(
    name = "splitsim",
    about = "Discrete-event simulator for SLO-aware LLM serving schedulers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override single keys: --set engine.slo_tbt_ms=50
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Force the split position across a grid and emit the throughput curve.
    SweepSplit {
        #[arg(long)]
        config: PathBuf,
        /// Number of grid points (overrides the config's sweep.points).
        #[arg(long)]
        points: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Bisect the serving capacity of each policy.
    Capacity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Replay the configured trace and report goodput per time bucket.
    Replay {
        #[arg(long)]
        config: PathBuf,
        /// Trace CSV path (overrides the config's workload).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 6.0)]
        bucket_minutes: f64,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Compare batching policies or transfer modes on one workload.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Ablation::Both)]
        which: Ablation,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Print a documented default config file.
    InitConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Batching,
    Transfer,
    Both,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load(config: &Path, sets: &[String]) -> Result<(ExperimentConfig, Option<PathBuf>), String> {
    let cfg = ExperimentConfig::from_file_with_overrides(config, sets).map_err(|e| e.to_string())?;
    let base = config.parent().map(|p| p.to_path_buf());
    Ok((cfg, base))
}

fn out_dir(cfg: &ExperimentConfig) -> Result<Option<PathBuf>, String> {
    match &cfg.output.dir {
        Some(d) => {
            let p = PathBuf::from(d);
            std::fs::create_dir_all(&p).map_err(|e| format!("creating {d}: {e}"))?;
            Ok(Some(p))
        }
        None => Ok(None),
    }
}

fn print_summary(row: &SummaryRow) {
    println!(
        "policy={} workload={} qps={:.2} requests={} goodput={:.1} tok/s attainment={:.4} p99_tbt={:.1} ms util=[{:.2},{:.2}] makespan={:.0} ms digest={}",
        row.policy,
        row.workload,
        row.qps,
        row.requests,
        row.goodput_tok_s,
        row.attainment,
        row.p99_tbt_ms,
        row.utilization_min,
        row.utilization_max,
        row.makespan_ms,
        row.digest,
    );
}

fn run() -> Result<(), String> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, sets } => {
            let (cfg, base) = load(&config, &sets)?;
            let art = experiments::run_experiment(&cfg, base.as_deref())
                .map_err(|e| e.to_string())?;
            print_summary(&art.summary);
            if let Some(dir) = out_dir(&cfg)? {
                let jsonl = dir.join("requests.jsonl");
                let f = std::fs::File::create(&jsonl).map_err(|e| e.to_string())?;
                art.result
                    .write_jsonl(std::io::BufWriter::new(f))
                    .map_err(|e| e.to_string())?;
                let csv = dir.join("summary.csv");
                let f = std::fs::File::create(&csv).map_err(|e| e.to_string())?;
                experiments::write_summary_csv(std::slice::from_ref(&art.summary), f)
                    .map_err(|e| e.to_string())?;
                println!("wrote {} and {}", jsonl.display(), csv.display());
            }
            Ok(())
        }
        Command::SweepSplit {
            config,
            points,
            sets,
        } => {
            let (mut cfg, base) = load(&config, &sets)?;
            if let Some(p) = points {
                cfg.sweep.points = p;
            }
            let curve =
                experiments::sweep_split(&cfg, base.as_deref()).map_err(|e| e.to_string())?;
            println!("split_point,phi,throughput_tok_s,goodput_tok_s,attainment");
            for p in &curve {
                println!(
                    "{},{:.6},{:.2},{:.2},{:.4}",
                    p.split_point, p.phi, p.throughput_tok_s, p.goodput_tok_s, p.attainment
                );
            }
            if let Some(dir) = out_dir(&cfg)? {
                let path = dir.join("sweep_split.csv");
                let f = std::fs::File::create(&path).map_err(|e| e.to_string())?;
                experiments::write_sweep_csv(&curve, f).map_err(|e| e.to_string())?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Capacity { config, sets } => {
            let (cfg, _) = load(&config, &sets)?;
            let rows = experiments::capacity_table(&cfg).map_err(|e| e.to_string())?;
            println!("policy,capacity_qps,below_bracket,probes,goodput_at_capacity");
            for r in &rows {
                println!(
                    "{},{:.2},{},{},{:.1}",
                    r.policy, r.capacity_qps, r.below_bracket, r.probes, r.goodput_at_capacity
                );
            }
            if let Some(dir) = out_dir(&cfg)? {
                let path = dir.join("capacity.csv");
                let f = std::fs::File::create(&path).map_err(|e| e.to_string())?;
                experiments::write_capacity_csv(&rows, f).map_err(|e| e.to_string())?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Replay {
            config,
            trace,
            bucket_minutes,
            sets,
        } => {
            let (mut cfg, base) = load(&config, &sets)?;
            if let Some(t) = trace {
                cfg.workload = splitsim::config::WorkloadConfig::Trace {
                    path: t.display().to_string(),
                    time_scale: 1.0,
                    predictor: Default::default(),
                    seed: cfg.seed,
                };
            }
            let rows = experiments::replay(&cfg, bucket_minutes, base.as_deref())
                .map_err(|e| e.to_string())?;
            println!("policy,bucket,start_min,goodput_tok_s,requests");
            for r in &rows {
                println!(
                    "{},{},{:.1},{:.2},{}",
                    r.policy, r.bucket, r.start_min, r.goodput_tok_s, r.requests
                );
            }
            if let Some(dir) = out_dir(&cfg)? {
                let path = dir.join("replay.csv");
                let f = std::fs::File::create(&path).map_err(|e| e.to_string())?;
                experiments::write_replay_csv(&rows, f).map_err(|e| e.to_string())?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Ablate {
            config,
            which,
            sets,
        } => {
            let (cfg, base) = load(&config, &sets)?;
            match which {
                Ablation::Batching | Ablation::Both => {
                    let b = experiments::ablate_batching(&cfg, base.as_deref())
                        .map_err(|e| e.to_string())?;
                    println!(
                        "batching: adaptive attainment={:.4} goodput={:.1} | fixed(chunk={}) attainment={:.4} goodput={:.1}",
                        b.adaptive_attainment,
                        b.adaptive_goodput,
                        b.fixed_chunk_size,
                        b.fixed_attainment,
                        b.fixed_goodput
                    );
                }
                _ => {}
            }
            match which {
                Ablation::Transfer | Ablation::Both => {
                    let t = experiments::ablate_transfer(&cfg, base.as_deref())
                        .map_err(|e| e.to_string())?;
                    println!(
                        "transfer: chunked wait={:.2} ms | whole wait={:.2} ms | reduction={:.1}%",
                        t.chunked_wait_ms,
                        t.whole_wait_ms,
                        100.0 * t.wait_reduction
                    );
                }
                _ => {}
            }
            Ok(())
        }
        Command::InitConfig => {
            print!("{}", splitsim::config::default_config_toml());
            Ok(())
        }
    }
}
