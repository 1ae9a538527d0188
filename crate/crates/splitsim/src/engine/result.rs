//! Run outputs: per-request records, per-instance utilization, transfer
//! statistics, and deterministic digests.
//!
//! Serialized as JSON lines: one record per request followed by one summary
//! record, so downstream tooling can stream them.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;

use serde::{Deserialize, Serialize};

/// Everything observable about one request after the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival_ms: f64,
    pub prompt_tokens: u64,
    /// Actual output tokens emitted.
    pub output_tokens: u64,
    pub predicted_decode: u64,
    pub phi: f64,
    pub split_point: u64,
    pub alpha_instance: Option<usize>,
    pub beta_instance: Option<usize>,
    pub ttft_ms: f64,
    /// Absolute emission time of every output token.
    pub emissions_ms: Vec<f64>,
    pub completion_ms: f64,
    /// Time the receiving half spent blocked on KV delivery.
    pub transfer_wait_ms: f64,
    /// KV tokens shipped across instances for this request.
    pub transferred_tokens: u64,
    pub slo_tbt_ms: f64,
    pub probes: u32,
    pub cold_start: bool,
    pub fallback: bool,
    pub beta_cancelled: bool,
}

impl RequestRecord {
    /// Gaps between consecutive emissions (length = output_tokens - 1).
    pub fn tbt_series(&self) -> Vec<f64> {
        self.emissions_ms.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Per-instance utilization proxy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceReport {
    pub instance: usize,
    pub busy_ms: f64,
    pub batches: u64,
    /// busy_ms / makespan: fraction of time the instance was executing.
    pub utilization: f64,
    /// Compute-roofline milliseconds accumulated over all batches.
    pub compute_ms: f64,
    /// compute_ms / makespan: FLOPs-weighted utilization, the stand-in for
    /// hardware MFU (memory-bound decode batches barely move it).
    pub compute_utilization: f64,
    pub kv_peak_tokens: u64,
}

/// Aggregate transfer behavior of the run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TransferReport {
    pub chunks_sent: u64,
    pub tokens_sent: u64,
    pub channel_busy_ms: f64,
    /// Sum over requests of receiver idle time attributable to transfers.
    pub total_wait_ms: f64,
}

/// Scheduling overhead accounting (wall-clock, informational only; excluded
/// from digests).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SchedulerReport {
    pub total_probes: u64,
    pub mean_probes_per_request: f64,
    pub mean_decision_us: f64,
    pub predictor_cache_hits: u64,
    pub backlogged_requests: u64,
}

/// Full result of one simulation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub records: Vec<RequestRecord>,
    pub instances: Vec<InstanceReport>,
    pub transfer: TransferReport,
    pub scheduler: SchedulerReport,
    pub makespan_ms: f64,
    pub events_processed: u64,
    pub seed: u64,
}

impl RunResult {
    /// Deterministic digest over all timing-relevant fields. Identical runs
    /// must produce identical digests; wall-clock metadata is excluded.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for r in &self.records {
            r.id.hash(&mut h);
            r.arrival_ms.to_bits().hash(&mut h);
            r.split_point.hash(&mut h);
            r.alpha_instance.hash(&mut h);
            r.beta_instance.hash(&mut h);
            for e in &r.emissions_ms {
                e.to_bits().hash(&mut h);
            }
            r.transfer_wait_ms.to_bits().hash(&mut h);
        }
        for i in &self.instances {
            i.busy_ms.to_bits().hash(&mut h);
            i.batches.hash(&mut h);
        }
        self.transfer.chunks_sent.hash(&mut h);
        self.transfer.tokens_sent.hash(&mut h);
        self.makespan_ms.to_bits().hash(&mut h);
        h.finish()
    }

    /// One JSON object per request, then a `{"summary": ...}` record.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        let summary = serde_json::json!({
            "summary": {
                "requests": self.records.len(),
                "makespan_ms": self.makespan_ms,
                "events": self.events_processed,
                "seed": self.seed,
                "digest": format!("{:016x}", self.digest()),
                "instances": self.instances,
                "transfer": self.transfer,
                "scheduler": self.scheduler,
            }
        });
        serde_json::to_writer(&mut w, &summary)?;
        writeln!(w)?;
        Ok(())
    }
}
