//! Per-instance batch composition.
//!
//! One policy interface covers the adaptive SLO-aware composer (profile-table
//! budgeted prefill on top of unconditional decodes), the fixed-chunk
//! colocation baseline, and strict prefill/decode role instances. Role
//! instances reuse the budgeted composer; their purity comes from routing,
//! which keeps the split-boundary special cases exact.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::costmodel::BatchShape;
use crate::domain::{MicroRequest, MicroRole, RequestId};
use crate::profile_table::ProfileTable;

/// Identifies one micro-request across the whole simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MicroKey {
    pub request: RequestId,
    pub role: MicroRole,
}

impl MicroKey {
    pub fn of(m: &MicroRequest) -> Self {
        Self {
            request: m.parent,
            role: m.role,
        }
    }
}

/// Number of decode passes a micro-request executes.
///
/// A micro-request that carries both prompt and decode tokens emits its
/// first output token with the batch that finishes its prefill (the forward
/// pass that completes the prompt also samples the next token), so it runs
/// one fewer explicit decode pass than it owns decode tokens. A pure-decode
/// micro-request never prefilled here and pays one pass per token.
pub fn decode_pass_count(m: &MicroRequest) -> u64 {
    if m.is_mixed() {
        m.decode_tokens - 1
    } else {
        m.decode_tokens
    }
}

/// Context length of a micro-request's first explicit decode pass.
pub fn decode_start_ctx(m: &MicroRequest) -> u64 {
    if m.is_mixed() {
        // first pass processes the slot after the free token
        m.span.start + m.prefill_tokens
    } else {
        m.span.start - 1
    }
}

/// A micro-request waiting for prefill tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefillEntry {
    pub key: MicroKey,
    /// Prefill tokens left in this micro-request's span.
    pub remaining: u64,
    /// Tokens of the parent request already cached ahead of the next grant.
    pub prefix: u64,
    /// Decode passes the micro-request will own once prefill completes.
    pub decode_after: u64,
    /// True when the span mixes prompt and decode tokens.
    pub mixed: bool,
    /// Total KV tokens this micro-request will hold on the instance.
    pub span_kv: u64,
    /// KV tokens its first grant must additionally reserve on the partner
    /// instance (the transferred footprint of a split span); 0 when the
    /// span stays local.
    pub peer_need: u64,
    /// Whether the span's KV is already reserved (first grant taken, or the
    /// reservation arrived with an inbound transfer).
    pub started: bool,
}

/// A micro-request currently decoding, one token per batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeEntry {
    pub key: MicroKey,
    /// Current context length (tokens cached before the slot being decoded).
    pub ctx: u64,
    /// Planned decode passes left. The engine retires entries on actual
    /// sequence end; this field is the planning view only.
    pub remaining: u64,
}

/// The two queues a local scheduler composes from.
#[derive(Debug, Clone, Default)]
pub struct SchedulerQueues {
    pub prefill: VecDeque<PrefillEntry>,
    pub decode: VecDeque<DecodeEntry>,
    /// Maintained sum of `decode[i].ctx`; kept incrementally so composition
    /// stays O(grants) in the common case.
    pub ctx_sum: u64,
}

impl SchedulerQueues {
    pub fn is_idle(&self) -> bool {
        self.prefill.is_empty() && self.decode.is_empty()
    }

    pub fn push_decode(&mut self, e: DecodeEntry) {
        self.ctx_sum += e.ctx;
        self.decode.push_back(e);
    }

    /// Advance every one of the first `n` decode entries by one token.
    pub fn advance_decodes(&mut self, n: usize) {
        for e in self.decode.iter_mut().take(n) {
            e.ctx += 1;
            e.remaining = e.remaining.saturating_sub(1);
        }
        self.ctx_sum += n as u64;
    }

    /// Remove a decode entry by key, fixing up the context sum.
    pub fn remove_decode(&mut self, key: MicroKey) -> Option<DecodeEntry> {
        let pos = self.decode.iter().position(|e| e.key == key)?;
        let e = self.decode.remove(pos).expect("position valid");
        self.ctx_sum -= e.ctx;
        Some(e)
    }
}

/// Local batching policy, selected per instance from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LocalPolicy {
    /// SLO-aware composition: all decodes, then prefill up to the
    /// profile-table budget.
    Aps,
    /// Fixed-chunk colocation baseline: all decodes plus up to `chunk_size`
    /// prefill tokens FIFO, regardless of predicted latency.
    Chunked { chunk_size: u64 },
    /// Prefill-only instance of a disaggregated pair.
    DisaggPrefill,
    /// Decode-only instance of a disaggregated pair.
    DisaggDecode,
}

impl LocalPolicy {
    pub fn uses_table(&self) -> bool {
        !matches!(self, LocalPolicy::Chunked { .. })
    }
}

/// One composed execution step.
#[derive(Debug, Clone)]
pub struct Batch {
    /// (micro, context length) for every decode entry in the batch.
    pub decode_entries: Vec<(MicroKey, u64)>,
    /// (micro, tokens granted this pass), in grant order.
    pub prefill_grants: Vec<(MicroKey, u64)>,
    pub shape: BatchShape,
    pub composed_at: f64,
    /// Filled in when execution completes.
    pub measured_ms: Option<f64>,
}

/// Limits the composer must respect.
#[derive(Debug, Clone, Copy)]
pub struct ComposeLimits {
    /// Latency target for one batch. Kept below the request-level TBT SLO
    /// so that batch-boundary effects (a token joining just after a batch
    /// started) still fit the tail bound.
    pub slo_ms: f64,
    /// KV tokens already promised to in-flight spans on this instance.
    pub kv_reserved: u64,
    /// Same, on the transfer partner of this instance.
    pub peer_reserved: u64,
    pub kv_capacity: u64,
    pub nmax: usize,
}

/// Prefill budget for the next batch under the given policy.
pub fn prefill_budget(
    policy: &LocalPolicy,
    table: &ProfileTable,
    slo_ms: f64,
    ctx_mean: f64,
    dnum: u64,
) -> u64 {
    match policy {
        LocalPolicy::Chunked { chunk_size } => *chunk_size,
        LocalPolicy::Aps | LocalPolicy::DisaggPrefill | LocalPolicy::DisaggDecode => {
            table.max_prefill_allowed(slo_ms, ctx_mean, dnum)
        }
    }
}

/// Plan FIFO prefill grants under a token budget and the KV admission rule.
///
/// Returns (grants in queue order, total plen, prefill_ctx_sum). Grants are
/// (queue index, tokens). An entry that has not started requires its whole
/// span's KV (and any partner-side footprint) to fit the free reservation
/// space; both sides are claimed together, so spans never hold one resource
/// while waiting on the other. Admission is strictly FIFO: once one fresh
/// span is blocked on memory, no later fresh span is admitted. Entries that
/// already hold their reservation keep receiving budget regardless, which
/// keeps admitted work draining and frees the blocked span's room.
pub fn plan_prefill_grants(
    prefill: &VecDeque<PrefillEntry>,
    mut budget: u64,
    mut free_reserve: u64,
    mut peer_free_reserve: u64,
) -> (Vec<(usize, u64)>, u64, u64) {
    let mut grants = Vec::new();
    let mut plen = 0u64;
    let mut pcs = 0u64;
    let mut fresh_blocked = false;
    for (i, e) in prefill.iter().enumerate() {
        if budget == 0 {
            break;
        }
        if !e.started {
            if fresh_blocked || e.span_kv > free_reserve || e.peer_need > peer_free_reserve {
                fresh_blocked = true;
                continue;
            }
            free_reserve -= e.span_kv;
            peer_free_reserve -= e.peer_need;
        }
        let g = e.remaining.min(budget);
        if g == 0 {
            continue;
        }
        grants.push((i, g));
        plen += g;
        pcs += g * e.prefix;
        budget -= g;
    }
    (grants, plen, pcs)
}

/// Compose the next batch for an instance, recording the previous batch's
/// measured latency into the profile table first.
///
/// Returns `None` when both queues are empty (idle instance).
pub fn compose_batch(
    policy: &LocalPolicy,
    queues: &SchedulerQueues,
    prev: Option<&Batch>,
    table: &mut ProfileTable,
    limits: &ComposeLimits,
    now_ms: f64,
) -> Option<Batch> {
    if let Some(p) = prev {
        if policy.uses_table() {
            if let Some(t) = p.measured_ms {
                table.record(p.shape.plen, p.shape.ctx, p.shape.dnum, t);
            }
        }
    }
    if queues.is_idle() {
        return None;
    }

    let dnum = queues.decode.len().min(limits.nmax);
    let ctx_sum: u64 = if queues.decode.len() <= limits.nmax {
        queues.ctx_sum
    } else {
        queues.decode.iter().take(dnum).map(|e| e.ctx).sum()
    };
    let ctx_mean = if dnum == 0 {
        0.0
    } else {
        ctx_sum as f64 / dnum as f64
    };

    let mut budget = prefill_budget(policy, table, limits.slo_ms, ctx_mean, dnum as u64);
    let free_reserve = limits.kv_capacity.saturating_sub(limits.kv_reserved);
    let peer_free = limits.kv_capacity.saturating_sub(limits.peer_reserved);
    if dnum == 0 && budget == 0 && !queues.prefill.is_empty() {
        // no decode work and the table claims even the smallest prefill
        // breaches the SLO; grant a single token rather than stall forever
        budget = 1;
    }
    let (grants, plen, pcs) = plan_prefill_grants(&queues.prefill, budget, free_reserve, peer_free);

    if dnum == 0 && grants.is_empty() {
        // queues hold work but nothing is admissible right now (KV full)
        return None;
    }

    let decode_entries: Vec<(MicroKey, u64)> = queues
        .decode
        .iter()
        .take(dnum)
        .map(|e| (e.key, e.ctx))
        .collect();
    let prefill_grants: Vec<(MicroKey, u64)> = grants
        .iter()
        .map(|&(i, g)| (queues.prefill[i].key, g))
        .collect();

    Some(Batch {
        decode_entries,
        prefill_grants,
        shape: BatchShape {
            plen,
            dnum: dnum as u64,
            ctx: ctx_mean,
            prefill_ctx_sum: pcs,
        },
        composed_at: now_ms,
        measured_ms: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{batch_latency, HardwareProfile};
    use crate::domain::{InstanceId, RequestId};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn key(n: u64) -> MicroKey {
        MicroKey {
            request: RequestId(n),
            role: MicroRole::Alpha,
        }
    }

    fn limits(slo: f64) -> ComposeLimits {
        ComposeLimits {
            slo_ms: slo,
            kv_reserved: 0,
            peer_reserved: 0,
            kv_capacity: 1_000_000,
            nmax: 256,
        }
    }

    fn pentry(key: MicroKey, remaining: u64, prefix: u64, decode_after: u64) -> PrefillEntry {
        PrefillEntry {
            key,
            remaining,
            prefix,
            decode_after,
            mixed: decode_after > 0,
            span_kv: remaining + decode_after + u64::from(decode_after > 0),
            peer_need: 0,
            started: false,
        }
    }

    #[test]
    fn grants_follow_table_budget() {
        // table knows 2048-token prefill fits the SLO
        let mut table = ProfileTable::default();
        table.record(2048, 0.0, 0, 40.0);
        let mut q = SchedulerQueues::default();
        q.prefill.push_back(pentry(key(1), 4096, 0, 10));
        let b = compose_batch(&LocalPolicy::Aps, &q, None, &mut table, &limits(50.0), 0.0)
            .expect("batch");
        assert_eq!(b.prefill_grants, vec![(key(1), 2048)]);
        assert_eq!(b.shape.plen, 2048);
        assert_eq!(b.shape.dnum, 0);
    }

    #[test]
    fn exhausted_budget_gives_pure_decode_batch() {
        let mut table = ProfileTable::default();
        // decode-only latency already above the SLO
        table.record(0, 1024.0, 8, 80.0);
        let mut q = SchedulerQueues::default();
        for i in 0..8 {
            q.push_decode(DecodeEntry {
                key: key(i),
                ctx: 1024,
                remaining: 100,
            });
        }
        q.prefill.push_back(pentry(key(99), 512, 0, 5));
        let b = compose_batch(&LocalPolicy::Aps, &q, None, &mut table, &limits(50.0), 0.0)
            .expect("batch");
        assert_eq!(b.shape.dnum, 8);
        assert!(b.prefill_grants.is_empty());
    }

    #[test]
    fn fifo_fairness_in_grant_order() {
        let mut table = ProfileTable::default();
        table.record(1024, 0.0, 0, 30.0);
        let mut q = SchedulerQueues::default();
        for i in 0..3 {
            q.prefill.push_back(pentry(key(i), 600, 0, 1));
        }
        let b = compose_batch(&LocalPolicy::Aps, &q, None, &mut table, &limits(50.0), 0.0)
            .expect("batch");
        // budget 1024: first request fully granted, second partially, third none
        assert_eq!(b.prefill_grants, vec![(key(0), 600), (key(1), 424)]);
    }

    #[test]
    fn work_conservation_with_positive_budget() {
        let mut table = ProfileTable::default();
        table.record(1, 0.0, 0, 1.0);
        let mut q = SchedulerQueues::default();
        q.prefill.push_back(pentry(key(1), 10_000, 0, 1));
        let b = compose_batch(&LocalPolicy::Aps, &q, None, &mut table, &limits(50.0), 0.0)
            .expect("batch");
        assert!(b.shape.plen >= 1, "budget > 0 must grant at least one token");
    }

    #[test]
    fn chunked_policy_ignores_latency() {
        let hw = HardwareProfile::default();
        let mut table = ProfileTable::default();
        let mut q = SchedulerQueues::default();
        for i in 0..32 {
            q.push_decode(DecodeEntry {
                key: key(i),
                ctx: 2048,
                remaining: 100,
            });
        }
        q.prefill.push_back(pentry(key(99), 8192, 0, 32));
        let b = compose_batch(
            &LocalPolicy::Chunked { chunk_size: 2048 },
            &q,
            None,
            &mut table,
            &limits(100.0),
            0.0,
        )
        .expect("batch");
        assert_eq!(b.shape.plen, 2048);
        // the interference failure mode: the composed shape breaches the SLO
        assert!(batch_latency(&b.shape, &hw) > 100.0);
    }

    #[test]
    fn decode_role_never_prefills() {
        let mut table = ProfileTable::default();
        let mut q = SchedulerQueues::default();
        for i in 0..8 {
            q.push_decode(DecodeEntry {
                key: key(i),
                ctx: 512,
                remaining: 40,
            });
        }
        let b = compose_batch(
            &LocalPolicy::DisaggDecode,
            &q,
            None,
            &mut table,
            &limits(100.0),
            0.0,
        )
        .expect("batch");
        assert_eq!(b.decode_entries.len(), 8);
        assert!(b.prefill_grants.is_empty());
    }

    #[test]
    fn idle_queues_yield_no_batch() {
        let mut table = ProfileTable::default();
        let q = SchedulerQueues::default();
        assert!(compose_batch(&LocalPolicy::Aps, &q, None, &mut table, &limits(100.0), 0.0).is_none());
    }

    #[test]
    fn record_applied_before_composition() {
        let mut table = ProfileTable::default();
        let prev = Batch {
            decode_entries: vec![],
            prefill_grants: vec![(key(1), 512)],
            shape: BatchShape {
                plen: 512,
                dnum: 0,
                ctx: 0.0,
                prefill_ctx_sum: 0,
            },
            composed_at: 0.0,
            measured_ms: Some(47.0),
        };
        let q = SchedulerQueues::default();
        let _ = compose_batch(&LocalPolicy::Aps, &q, Some(&prev), &mut table, &limits(100.0), 1.0);
        assert_eq!(table.lookup(512, 0.0, 0), Some(47.0));
    }

    /// Oracle check: with a truth-seeded table, composed batches stay within
    /// SLO plus one plen-bucket of quantization slack.
    #[test]
    fn random_queues_respect_slo_with_truth_table() {
        use crate::profile_table::{bucket_index, bucket_upper};
        let hw = HardwareProfile::default();
        let slo = 100.0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst_ratio = 0.0f64;
        for _ in 0..1000 {
            let mut table = ProfileTable::default();
            table.seed_from_cost_model(&hw, 15, 9);
            let mut q = SchedulerQueues::default();
            let ndec = rng.gen_range(0..64);
            for i in 0..ndec {
                q.push_decode(DecodeEntry {
                    key: key(i),
                    ctx: rng.gen_range(1..8192),
                    remaining: rng.gen_range(1..512),
                });
            }
            let npre = rng.gen_range(0..4);
            for i in 0..npre {
                q.prefill.push_back(pentry(key(1000 + i), rng.gen_range(1..8192), rng.gen_range(0..4096), 4));
            }
            if q.is_idle() {
                continue;
            }
            let b = match compose_batch(&LocalPolicy::Aps, &q, None, &mut table, &limits(slo), 0.0)
            {
                Some(b) => b,
                None => continue,
            };
            let lat = batch_latency(&b.shape, &hw);
            // slack: latency gap to the next plen bucket at this composition
            let bp = bucket_index(b.shape.plen);
            let next = BatchShape {
                plen: bucket_upper(bp + 1),
                ..b.shape
            };
            let slack = (batch_latency(&next, &hw) - lat).max(0.0);
            assert!(
                lat <= slo + slack + 1e-6,
                "latency {lat} > slo {slo} + slack {slack} for shape {:?}",
                b.shape
            );
            worst_ratio = worst_ratio.max(lat / slo);
        }
        // decode-only batches can exceed the SLO only through slack; make
        // sure the bound was actually exercised
        assert!(worst_ratio > 0.1);
    }

    #[test]
    fn micro_pass_accounting() {
        use crate::domain::{split_request, RequestPlan};
        let plan = RequestPlan {
            id: RequestId(1),
            arrival_ms: 0.0,
            prompt_len: 1024,
            predicted_decode: 1024,
            slo_tbt_ms: 100.0,
        };
        // mixed alpha: one decode token comes free with the final prefill batch
        let (a, b) = split_request(&plan, 1358.0 / 2048.0);
        assert_eq!(decode_pass_count(&a), 333);
        assert_eq!(decode_start_ctx(&a), 1025);
        // pure decode beta pays one pass per token, context starts at s
        assert_eq!(decode_pass_count(&b), 690);
        assert_eq!(decode_start_ctx(&b), 1358);
        let _ = InstanceId(0);
    }
}
