//! Post-processing of run results: latency distributions, SLO attainment,
//! goodput, serving-capacity search, and the latency-constrained
//! utilization point of a batch composition.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{batch_latency, BatchShape, HardwareProfile};
use crate::engine::{RequestRecord, RunResult};

/// Per-request latency verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub id: u64,
    pub ttft_ms: f64,
    pub tbt_series: Vec<f64>,
    pub max_tbt_ms: f64,
    pub p50_tbt_ms: f64,
    pub p99_tbt_ms: f64,
    pub met_slo: bool,
    pub output_tokens: u64,
    pub arrival_ms: f64,
    pub completion_ms: f64,
}

/// Options controlling the per-request SLO verdict.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SloOptions {
    /// Request-level time-between-tokens SLO applied to generated workloads.
    pub slo_tbt_ms: f64,
    /// Also bound TTFT (off by default; the SLO centers on token gaps).
    pub include_ttft: bool,
    pub ttft_bound_ms: f64,
}

impl Default for SloOptions {
    fn default() -> Self {
        Self {
            slo_tbt_ms: 100.0,
            include_ttft: false,
            ttft_bound_ms: 1000.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("attainment is undefined over an empty outcome set")]
    EmptyOutcomes,
    #[error("capacity bracket invalid: lo {lo} >= hi {hi}")]
    BadBracket { lo: f64, hi: f64 },
}

/// Nearest-rank percentile (no interpolation); `q` in (0, 1].
pub fn percentile_nearest_rank(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Evaluate one request against its SLO. A request is good when every
/// token gap stays within the bound (the strictest reading of goodput).
pub fn outcome_of(record: &RequestRecord, opts: &SloOptions) -> RequestOutcome {
    let tbt = record.tbt_series();
    let mut sorted = tbt.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let max_tbt = sorted.last().copied().unwrap_or(0.0);
    let mut met = max_tbt <= record.slo_tbt_ms;
    if opts.include_ttft {
        met = met && record.ttft_ms <= opts.ttft_bound_ms;
    }
    RequestOutcome {
        id: record.id,
        ttft_ms: record.ttft_ms,
        max_tbt_ms: max_tbt,
        p50_tbt_ms: percentile_nearest_rank(&sorted, 0.50),
        p99_tbt_ms: percentile_nearest_rank(&sorted, 0.99),
        tbt_series: tbt,
        met_slo: met,
        output_tokens: record.output_tokens,
        arrival_ms: record.arrival_ms,
        completion_ms: record.completion_ms,
    }
}

pub fn outcomes_of(result: &RunResult, opts: &SloOptions) -> Vec<RequestOutcome> {
    result.records.iter().map(|r| outcome_of(r, opts)).collect()
}

/// Useful output tokens per second: tokens of SLO-meeting requests over the
/// window.
pub fn goodput(outcomes: &[RequestOutcome], window_s: f64) -> f64 {
    assert!(window_s > 0.0, "window must be positive");
    let good: u64 = outcomes
        .iter()
        .filter(|o| o.met_slo)
        .map(|o| o.output_tokens)
        .sum();
    good as f64 / window_s
}

/// Raw output tokens per second regardless of SLO.
pub fn raw_throughput(outcomes: &[RequestOutcome], window_s: f64) -> f64 {
    assert!(window_s > 0.0);
    outcomes.iter().map(|o| o.output_tokens).sum::<u64>() as f64 / window_s
}

/// Fraction of requests meeting the SLO.
pub fn attainment(outcomes: &[RequestOutcome]) -> Result<f64, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptyOutcomes);
    }
    let met = outcomes.iter().filter(|o| o.met_slo).count();
    Ok(met as f64 / outcomes.len() as f64)
}

/// p99 over the pooled token gaps of all requests.
pub fn pooled_p99_tbt(outcomes: &[RequestOutcome]) -> f64 {
    let mut gaps: Vec<f64> = outcomes.iter().flat_map(|o| o.tbt_series.iter().copied()).collect();
    gaps.sort_by(|a, b| a.total_cmp(b));
    percentile_nearest_rank(&gaps, 0.99)
}

/// What one capacity probe must report.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub attainment: f64,
    pub p99_tbt_ms: f64,
    pub goodput_tok_s: f64,
}

/// Capacity-search configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacityOptions {
    pub lo_qps: f64,
    pub hi_qps: f64,
    /// Stop when the bracket is narrower than this.
    pub resolution_qps: f64,
    pub target_attainment: f64,
    pub slo_p99_ms: f64,
}

impl Default for CapacityOptions {
    fn default() -> Self {
        Self {
            lo_qps: 0.25,
            hi_qps: 16.0,
            resolution_qps: 0.1,
            target_attainment: 0.99,
            slo_p99_ms: 100.0,
        }
    }
}

/// Result of a capacity bisection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapacityReport {
    /// Highest probed QPS meeting the target, or 0 when even the lower
    /// bracket fails.
    pub capacity_qps: f64,
    pub below_bracket: bool,
    pub probes: u32,
    /// (qps, passed) per probe, in search order.
    pub trace: Vec<(f64, bool)>,
    /// Probe summary at the reported capacity, when one passed.
    pub at_capacity: Option<ProbeSummary>,
}

/// Bisection over QPS for the highest load meeting the attainment and p99
/// targets. `probe` must aggregate its seeds and report the worst case;
/// attainment is assumed (statistically) non-increasing in QPS.
pub fn find_capacity(
    mut probe: impl FnMut(f64) -> ProbeSummary,
    opts: &CapacityOptions,
) -> Result<CapacityReport, MetricsError> {
    if opts.lo_qps >= opts.hi_qps {
        return Err(MetricsError::BadBracket {
            lo: opts.lo_qps,
            hi: opts.hi_qps,
        });
    }
    let passes = |s: &ProbeSummary| {
        s.attainment >= opts.target_attainment && s.p99_tbt_ms <= opts.slo_p99_ms
    };
    let mut trace = Vec::new();
    let mut probes = 0;
    let mut run = |qps: f64, trace: &mut Vec<(f64, bool)>, probes: &mut u32| {
        let s = probe(qps);
        let ok = passes(&s);
        trace.push((qps, ok));
        *probes += 1;
        (ok, s)
    };

    let (lo_ok, lo_sum) = run(opts.lo_qps, &mut trace, &mut probes);
    if !lo_ok {
        return Ok(CapacityReport {
            capacity_qps: 0.0,
            below_bracket: true,
            probes,
            trace,
            at_capacity: None,
        });
    }
    let (hi_ok, hi_sum) = run(opts.hi_qps, &mut trace, &mut probes);
    if hi_ok {
        return Ok(CapacityReport {
            capacity_qps: opts.hi_qps,
            below_bracket: false,
            probes,
            trace,
            at_capacity: Some(hi_sum),
        });
    }
    let mut lo = opts.lo_qps;
    let mut hi = opts.hi_qps;
    let mut best = (opts.lo_qps, lo_sum);
    while hi - lo > opts.resolution_qps {
        let mid = 0.5 * (lo + hi);
        let (ok, sum) = run(mid, &mut trace, &mut probes);
        if ok {
            lo = mid;
            best = (mid, sum);
        } else {
            hi = mid;
        }
    }
    Ok(CapacityReport {
        capacity_qps: best.0,
        below_bracket: false,
        probes,
        trace,
        at_capacity: Some(best.1),
    })
}

/// Largest decode count a composition sustains within the latency SLO, with
/// its token throughput (tokens per millisecond) at that point.
pub fn lcu_point(
    hw: &HardwareProfile,
    slo_ms: f64,
    ctx: f64,
    plen: u64,
    nmax: u64,
) -> (u64, f64) {
    let mut best: Option<u64> = None;
    for dnum in 0..=nmax {
        let shape = BatchShape {
            plen,
            dnum,
            ctx,
            prefill_ctx_sum: 0,
        };
        if shape.is_empty() {
            continue;
        }
        if batch_latency(&shape, hw) <= slo_ms {
            best = Some(dnum);
        } else if best.is_some() {
            break;
        }
    }
    match best {
        Some(dnum) => {
            let shape = BatchShape {
                plen,
                dnum,
                ctx,
                prefill_ctx_sum: 0,
            };
            let lat = batch_latency(&shape, hw);
            (dnum, shape.tokens() as f64 / lat)
        }
        None => (0, 0.0),
    }
}
