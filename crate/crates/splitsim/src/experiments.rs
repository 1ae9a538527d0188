//! Experiment orchestration over the simulation engine: single runs,
//! split-position sweeps, serving-capacity searches, trace replays, and
//! the batching/transfer ablations.
//!
//! Sweeps and capacity probes fan out across worker threads; every worker
//! owns a full independent simulation and results merge by probe index, so
//! parallel runs stay deterministic.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, WorkloadConfig};
use crate::domain::Request;
use crate::engine::{self, EngineConfig, EngineError, PolicyConfig, RunResult, TransferMode};
use crate::global_scheduler::{ForcedPhi, Orientation, SearchConfig};
use crate::metrics::{
    self, attainment, find_capacity, goodput, outcomes_of, pooled_p99_tbt, raw_throughput,
    CapacityReport, MetricsError, ProbeSummary, RequestOutcome, SloOptions,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

/// One line of the summary CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub workload: String,
    pub qps: f64,
    pub requests: usize,
    pub goodput_tok_s: f64,
    pub raw_tok_s: f64,
    pub attainment: f64,
    pub p99_tbt_ms: f64,
    pub mean_ttft_ms: f64,
    pub utilization_min: f64,
    pub utilization_max: f64,
    pub transfer_wait_ms: f64,
    pub makespan_ms: f64,
    pub digest: String,
}

/// A finished run plus its evaluated outcomes.
pub struct RunArtifacts {
    pub result: RunResult,
    pub outcomes: Vec<RequestOutcome>,
    pub summary: SummaryRow,
}

pub fn summarize(
    result: &RunResult,
    outcomes: &[RequestOutcome],
    policy: &str,
    workload: &str,
    qps: f64,
) -> SummaryRow {
    let window_s = (result.makespan_ms / 1000.0).max(1e-9);
    let ttfts: Vec<f64> = outcomes.iter().map(|o| o.ttft_ms).collect();
    let utils: Vec<f64> = result.instances.iter().map(|i| i.utilization).collect();
    SummaryRow {
        policy: policy.to_string(),
        workload: workload.to_string(),
        qps,
        requests: outcomes.len(),
        goodput_tok_s: goodput(outcomes, window_s),
        raw_tok_s: raw_throughput(outcomes, window_s),
        attainment: attainment(outcomes).unwrap_or(0.0),
        p99_tbt_ms: pooled_p99_tbt(outcomes),
        mean_ttft_ms: if ttfts.is_empty() {
            0.0
        } else {
            ttfts.iter().sum::<f64>() / ttfts.len() as f64
        },
        utilization_min: utils.iter().copied().fold(f64::INFINITY, f64::min),
        utilization_max: utils.iter().copied().fold(0.0, f64::max),
        transfer_wait_ms: result.transfer.total_wait_ms,
        makespan_ms: result.makespan_ms,
        digest: format!("{:016x}", result.digest()),
    }
}

/// Execute the configured experiment once.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    base_dir: Option<&Path>,
) -> Result<RunArtifacts, ExperimentError> {
    let workload = cfg.build_workload(base_dir)?;
    let engine_cfg = cfg.engine_config();
    let result = engine::run(&workload, &engine_cfg)?;
    let outcomes = outcomes_of(&result, &cfg.metrics);
    let qps = match &cfg.workload {
        WorkloadConfig::Synthetic { rate_qps, .. } => *rate_qps,
        WorkloadConfig::Trace { .. } => {
            let span_s = result
                .records
                .iter()
                .map(|r| r.arrival_ms)
                .fold(0.0, f64::max)
                / 1000.0;
            if span_s > 0.0 {
                result.records.len() as f64 / span_s
            } else {
                0.0
            }
        }
    };
    let summary = summarize(
        &result,
        &outcomes,
        cfg.policy.name(),
        &cfg.workload_label(),
        qps,
    );
    Ok(RunArtifacts {
        result,
        outcomes,
        summary,
    })
}

/// One point of a split-position sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub split_point: u64,
    pub phi: f64,
    pub throughput_tok_s: f64,
    pub goodput_tok_s: f64,
    pub attainment: f64,
}

/// Force the split position across a grid and measure throughput at each
/// point. Requires a 2-instance cluster and a fixed-shape workload so every
/// request shares the same planned length.
pub fn sweep_split(
    cfg: &ExperimentConfig,
    base_dir: Option<&Path>,
) -> Result<Vec<SweepPoint>, ExperimentError> {
    if cfg.cluster.instances != 2 {
        return Err(ExperimentError::Invalid(
            "split sweep requires exactly 2 instances".into(),
        ));
    }
    let workload = cfg.build_workload(base_dir)?;
    if workload.is_empty() {
        return Err(ExperimentError::Invalid("sweep workload is empty".into()));
    }
    let total = workload[0].plan().planned_len();
    if !workload.iter().all(|r| r.plan().planned_len() == total) {
        return Err(ExperimentError::Invalid(
            "split sweep needs a fixed-shape workload".into(),
        ));
    }
    let points = cfg.sweep.points.max(3);
    let grid: Vec<u64> = (0..points)
        .map(|i| ((i as f64 / (points - 1) as f64) * total as f64).round() as u64)
        .collect();

    let results: Vec<Result<SweepPoint, ExperimentError>> = grid
        .par_iter()
        .map(|&s| {
            // phi chosen so ceil(phi * L) lands exactly on s for this L
            let phi = if s == 0 {
                0.0
            } else if s >= total {
                1.0
            } else {
                (s as f64 - 0.5) / total as f64
            };
            let mut engine_cfg = cfg.engine_config();
            engine_cfg.policy = PolicyConfig::Aps {
                search: SearchConfig::default(),
                force_phi: Some(ForcedPhi::Ratio(phi)),
                orientation: Orientation::Fixed,
            };
            let result = engine::run(&workload, &engine_cfg)?;
            let outcomes = outcomes_of(&result, &cfg.metrics);
            let window_s = (result.makespan_ms / 1000.0).max(1e-9);
            Ok(SweepPoint {
                split_point: s,
                phi,
                throughput_tok_s: sustained_throughput(&result),
                goodput_tok_s: goodput(&outcomes, window_s),
                attainment: attainment(&outcomes).unwrap_or(0.0),
            })
        })
        .collect();
    results.into_iter().collect()
}

/// Steady-state token rate: emissions inside the arrival window divided by
/// the window, so the post-arrival drain tail of a saturated run does not
/// dilute the measurement.
pub fn sustained_throughput(result: &RunResult) -> f64 {
    let window_end = result
        .records
        .iter()
        .map(|r| r.arrival_ms)
        .fold(0.0, f64::max);
    if window_end <= 0.0 {
        return tokens_per_second(result);
    }
    let tokens = result
        .records
        .iter()
        .flat_map(|r| r.emissions_ms.iter())
        .filter(|&&t| t <= window_end)
        .count();
    tokens as f64 / (window_end / 1000.0)
}

/// Capacity of one policy on the configured workload shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyCapacity {
    pub policy: String,
    pub capacity_qps: f64,
    pub below_bracket: bool,
    pub probes: u32,
    pub goodput_at_capacity: f64,
}

/// The three policies a capacity table always reports, derived from the
/// configured policy's parameters where applicable.
pub fn capacity_policy_set(cfg: &ExperimentConfig) -> Vec<PolicyConfig> {
    let chunk = match &cfg.policy {
        PolicyConfig::Chunked { chunk_size } => *chunk_size,
        _ => 2048,
    };
    let aps = match &cfg.policy {
        PolicyConfig::Aps { .. } => cfg.policy.clone(),
        _ => PolicyConfig::aps_default(),
    };
    vec![aps, PolicyConfig::Disagg, PolicyConfig::Chunked { chunk_size: chunk }]
}

/// Probe one (policy, qps) with the configured number of seeds; all seeds
/// must pass, so the probe reports worst-case attainment and p99.
pub fn capacity_probe(
    cfg: &ExperimentConfig,
    policy: &PolicyConfig,
    qps: f64,
) -> Result<ProbeSummary, ExperimentError> {
    let (preset, shape, wl_seed, predictor) = match &cfg.workload {
        WorkloadConfig::Synthetic {
            preset,
            shape,
            seed,
            predictor,
            ..
        } => (preset.clone(), shape.clone(), *seed, *predictor),
        WorkloadConfig::Trace { .. } => {
            return Err(ExperimentError::Invalid(
                "capacity search needs a synthetic workload".into(),
            ))
        }
    };
    let seeds: Vec<u64> = (0..cfg.capacity.probe_seeds as u64).collect();
    let summaries: Vec<Result<(f64, f64, f64), ExperimentError>> = seeds
        .par_iter()
        .map(|k| {
            let spec = crate::workload::WorkloadSpec {
                preset: preset.clone(),
                shape: shape.clone(),
                rate_qps: qps,
                duration_s: cfg.capacity.probe_duration_s,
                seed: wl_seed + k,
                predictor,
                slo_tbt_ms: cfg.metrics.slo_tbt_ms,
            };
            let workload = crate::workload::generate(&spec).map_err(ConfigError::Workload)?;
            if workload.is_empty() {
                return Ok((1.0, 0.0, 0.0));
            }
            let mut engine_cfg = cfg.engine_config();
            engine_cfg.policy = policy.clone();
            engine_cfg.seed = cfg.seed + k;
            let result = engine::run(&workload, &engine_cfg)?;
            let outcomes = outcomes_of(&result, &cfg.metrics);
            let window_s = (result.makespan_ms / 1000.0).max(1e-9);
            Ok((
                attainment(&outcomes)?,
                pooled_p99_tbt(&outcomes),
                goodput(&outcomes, window_s),
            ))
        })
        .collect();
    let mut att: f64 = 1.0;
    let mut p99: f64 = 0.0;
    let mut good = 0.0;
    let n = summaries.len();
    for s in summaries {
        let (a, p, g) = s?;
        att = att.min(a);
        p99 = p99.max(p);
        good += g / n as f64;
    }
    Ok(ProbeSummary {
        attainment: att,
        p99_tbt_ms: p99,
        goodput_tok_s: good,
    })
}

/// Bisect the serving capacity of one policy.
pub fn capacity_of_policy(
    cfg: &ExperimentConfig,
    policy: &PolicyConfig,
) -> Result<(CapacityReport, PolicyCapacity), ExperimentError> {
    let opts = cfg.capacity.options(cfg.metrics.slo_tbt_ms);
    let mut probe_err: Option<ExperimentError> = None;
    let report = find_capacity(
        |qps| match capacity_probe(cfg, policy, qps) {
            Ok(s) => s,
            Err(e) => {
                if probe_err.is_none() {
                    probe_err = Some(e);
                }
                ProbeSummary {
                    attainment: 0.0,
                    p99_tbt_ms: f64::INFINITY,
                    goodput_tok_s: 0.0,
                }
            }
        },
        &opts,
    )?;
    if let Some(e) = probe_err {
        return Err(e);
    }
    let row = PolicyCapacity {
        policy: policy.name().to_string(),
        capacity_qps: report.capacity_qps,
        below_bracket: report.below_bracket,
        probes: report.probes,
        goodput_at_capacity: report.at_capacity.as_ref().map_or(0.0, |s| s.goodput_tok_s),
    };
    Ok((report, row))
}

/// Capacity table across the three policies.
pub fn capacity_table(cfg: &ExperimentConfig) -> Result<Vec<PolicyCapacity>, ExperimentError> {
    let mut rows = Vec::new();
    for policy in capacity_policy_set(cfg) {
        let (_, row) = capacity_of_policy(cfg, &policy)?;
        rows.push(row);
    }
    Ok(rows)
}

/// One bucket of a replay report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayRow {
    pub policy: String,
    pub bucket: usize,
    pub start_min: f64,
    pub goodput_tok_s: f64,
    pub requests: usize,
}

/// Replay the configured workload under each policy and report goodput per
/// arrival-time bucket.
pub fn replay(
    cfg: &ExperimentConfig,
    bucket_minutes: f64,
    base_dir: Option<&Path>,
) -> Result<Vec<ReplayRow>, ExperimentError> {
    if bucket_minutes <= 0.0 {
        return Err(ExperimentError::Invalid("bucket_minutes must be positive".into()));
    }
    let workload = cfg.build_workload(base_dir)?;
    if workload.is_empty() {
        return Err(ExperimentError::Invalid("replay workload is empty".into()));
    }
    let bucket_ms = bucket_minutes * 60_000.0;
    let max_arrival = workload.iter().map(|r| r.arrival_ms).fold(0.0, f64::max);
    let n_buckets = (max_arrival / bucket_ms).floor() as usize + 1;
    let policies = capacity_policy_set(cfg);
    let mut rows = Vec::new();
    for policy in &policies {
        let mut engine_cfg = cfg.engine_config();
        engine_cfg.policy = policy.clone();
        let result = engine::run(&workload, &engine_cfg)?;
        let outcomes = outcomes_of(&result, &cfg.metrics);
        let mut tokens = vec![0u64; n_buckets];
        let mut counts = vec![0usize; n_buckets];
        for o in &outcomes {
            let b = ((o.arrival_ms / bucket_ms).floor() as usize).min(n_buckets - 1);
            counts[b] += 1;
            if o.met_slo {
                tokens[b] += o.output_tokens;
            }
        }
        for b in 0..n_buckets {
            rows.push(ReplayRow {
                policy: policy.name().to_string(),
                bucket: b,
                start_min: b as f64 * bucket_minutes,
                goodput_tok_s: tokens[b] as f64 / (bucket_ms / 1000.0),
                requests: counts[b],
            });
        }
    }
    Ok(rows)
}

/// Batching ablation: SLO-aware composition versus the fixed-chunk baseline
/// on the same workload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchingAblation {
    pub adaptive_attainment: f64,
    pub fixed_attainment: f64,
    pub adaptive_goodput: f64,
    pub fixed_goodput: f64,
    pub fixed_chunk_size: u64,
}

pub fn ablate_batching(
    cfg: &ExperimentConfig,
    base_dir: Option<&Path>,
) -> Result<BatchingAblation, ExperimentError> {
    let workload = cfg.build_workload(base_dir)?;
    let chunk = match &cfg.policy {
        PolicyConfig::Chunked { chunk_size } => *chunk_size,
        _ => 2048,
    };
    let mut adaptive_cfg = cfg.engine_config();
    adaptive_cfg.policy = PolicyConfig::aps_default();
    let mut fixed_cfg = cfg.engine_config();
    fixed_cfg.policy = PolicyConfig::Chunked { chunk_size: chunk };
    let a = engine::run(&workload, &adaptive_cfg)?;
    let f = engine::run(&workload, &fixed_cfg)?;
    let ao = outcomes_of(&a, &cfg.metrics);
    let fo = outcomes_of(&f, &cfg.metrics);
    Ok(BatchingAblation {
        adaptive_attainment: attainment(&ao)?,
        fixed_attainment: attainment(&fo)?,
        adaptive_goodput: goodput(&ao, (a.makespan_ms / 1000.0).max(1e-9)),
        fixed_goodput: goodput(&fo, (f.makespan_ms / 1000.0).max(1e-9)),
        fixed_chunk_size: chunk,
    })
}

/// Transfer ablation: chunked versus whole-cache KV shipping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferAblation {
    pub chunked_wait_ms: f64,
    pub whole_wait_ms: f64,
    /// 1 - chunked/whole; the overlap win.
    pub wait_reduction: f64,
    pub chunk_tokens: u64,
}

pub fn ablate_transfer(
    cfg: &ExperimentConfig,
    base_dir: Option<&Path>,
) -> Result<TransferAblation, ExperimentError> {
    let workload = cfg.build_workload(base_dir)?;
    let mut chunked_cfg = cfg.engine_config();
    chunked_cfg.transfer_mode = TransferMode::Chunked;
    let mut whole_cfg = cfg.engine_config();
    whole_cfg.transfer_mode = TransferMode::Whole;
    let c = engine::run(&workload, &chunked_cfg)?;
    let w = engine::run(&workload, &whole_cfg)?;
    let chunked_wait = c.transfer.total_wait_ms;
    let whole_wait = w.transfer.total_wait_ms;
    Ok(TransferAblation {
        chunked_wait_ms: chunked_wait,
        whole_wait_ms: whole_wait,
        wait_reduction: if whole_wait > 0.0 {
            1.0 - chunked_wait / whole_wait
        } else {
            0.0
        },
        chunk_tokens: cfg.engine.transfer_chunk_tokens,
    })
}

// ---- CSV writers ---------------------------------------------------------

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], w: W) -> Result<(), ExperimentError> {
    let mut wtr = csv::Writer::from_writer(w);
    for row in rows {
        wtr.serialize(row).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], w: W) -> Result<(), ExperimentError> {
    let mut wtr = csv::Writer::from_writer(w);
    for p in points {
        wtr.serialize(p).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_capacity_csv<W: Write>(rows: &[PolicyCapacity], w: W) -> Result<(), ExperimentError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_replay_csv<W: Write>(rows: &[ReplayRow], w: W) -> Result<(), ExperimentError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> ExperimentError {
    ExperimentError::Io(std::io::Error::new(std::io::ErrorKind::Other, e))
}

/// Sanity metric used by sweeps and search-quality checks: completed output
/// tokens per second of simulated time.
pub fn tokens_per_second(result: &RunResult) -> f64 {
    let tokens: u64 = result.records.iter().map(|r| r.output_tokens).sum();
    tokens as f64 / (result.makespan_ms / 1000.0).max(1e-9)
}

/// Convenience: run one engine config on a prebuilt workload.
pub fn run_with(
    workload: &[Request],
    engine_cfg: &EngineConfig,
    slo: &SloOptions,
) -> Result<(RunResult, Vec<RequestOutcome>), ExperimentError> {
    let result = engine::run(workload, engine_cfg)?;
    let outcomes = metrics::outcomes_of(&result, slo);
    Ok((result, outcomes))
}
