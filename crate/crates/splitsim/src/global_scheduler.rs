//! Global request scheduling: split-ratio search, cold start, and
//! micro-request routing.
//!
//! For the adaptive policy each arriving request starts from the pure
//! disaggregation ratio `P / (P + D-hat)` and runs a bounded binary search,
//! probing the execution predictor for the completion times (T1, T2) the
//! candidate split would produce on the target pair, until the two sides
//! balance within a tolerance. Baseline policies route whole requests
//! round-robin (colocation) or split at the prompt boundary onto fixed
//! prefill/decode pools (disaggregation).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::HardwareProfile;
use crate::domain::{
    split_point, split_request, InstanceId, MicroRequest, RequestPlan, SplitPlan,
};
use crate::predictor::{Predictor, VirtualState};

/// Knobs for the split-ratio search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Maximum binary-search iterations (predictor probes per request).
    pub max_probes: u32,
    /// Balance tolerance on |T1 - T2| in milliseconds.
    pub epsilon_ms: f64,
    /// Safety margin added to predicted decode lengths (applied by the
    /// length predictor at workload construction; exposed here as the knob).
    pub margin_tokens: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            max_probes: 6,
            epsilon_ms: 5.0,
            margin_tokens: 20,
        }
    }
}

/// How the alpha half picks its instance within the chosen pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Alpha goes to the instance with the lower predicted completion.
    ByLoad,
    /// Alpha always goes to the first instance of the pair.
    Fixed,
    /// Alternate alpha between the two instances request by request.
    Alternate,
}

/// A pinned split ratio, used by sweeps and boundary-containment checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ForcedPhi {
    /// Split every request exactly at its prompt boundary.
    #[serde(rename = "disagg")]
    DisaggPoint,
    Ratio(f64),
}

/// Routing-level policy of the cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GlobalPolicy {
    /// Adaptive split search over instance pairs.
    Adaptive {
        search: SearchConfig,
        force_phi: Option<ForcedPhi>,
        orientation: Orientation,
    },
    /// Whole requests, round-robin over all instances (colocation).
    RoundRobinWhole,
    /// Prompt-boundary splits onto prefill/decode instance pools.
    RoleSplit,
}

/// One scheduling decision, ready for the engine to commit.
#[derive(Debug, Clone)]
pub struct ScheduleOutcome {
    pub split: SplitPlan,
    pub alpha: MicroRequest,
    pub beta: MicroRequest,
    pub probes: u32,
    pub cold_start: bool,
    pub fallback: bool,
    /// (phi, T1, T2) per probe, in search order.
    pub probe_trace: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("policy requires an even instance count >= 2, got {0}")]
    BadClusterSize(usize),
}

pub struct GlobalScheduler {
    policy: GlobalPolicy,
    n_instances: usize,
    pair_cursor: usize,
    rr_cursor: usize,
    alt_flip: bool,
    /// (prefill_clk, decode_clk) per instance; both zero means the cold
    /// path has never seeded this instance.
    clocks: Vec<(f64, f64)>,
    pub predictor: Predictor,
}

impl GlobalScheduler {
    pub fn new(policy: GlobalPolicy, n_instances: usize) -> Result<Self, ScheduleError> {
        match policy {
            GlobalPolicy::Adaptive { .. } | GlobalPolicy::RoleSplit => {
                if n_instances < 2 || n_instances % 2 != 0 {
                    return Err(ScheduleError::BadClusterSize(n_instances));
                }
            }
            GlobalPolicy::RoundRobinWhole => {
                if n_instances == 0 {
                    return Err(ScheduleError::BadClusterSize(n_instances));
                }
            }
        }
        Ok(Self {
            policy,
            n_instances,
            pair_cursor: 0,
            rr_cursor: 0,
            alt_flip: false,
            clocks: vec![(0.0, 0.0); n_instances],
            predictor: Predictor::default(),
        })
    }

    pub fn policy(&self) -> &GlobalPolicy {
        &self.policy
    }

    /// Decide the split and placement for one arriving request.
    ///
    /// `snapshot` must produce a pure copy of the given instance's
    /// schedulable state; it is invoked only for the instances this decision
    /// actually probes.
    pub fn schedule(
        &mut self,
        plan: &RequestPlan,
        hw: &HardwareProfile,
        snapshot: &mut dyn FnMut(usize) -> VirtualState,
    ) -> ScheduleOutcome {
        match self.policy.clone() {
            GlobalPolicy::RoundRobinWhole => {
                let inst = self.rr_cursor % self.n_instances;
                self.rr_cursor += 1;
                self.forced_outcome(plan, ForcedPhi::Ratio(1.0), inst, inst)
            }
            GlobalPolicy::RoleSplit => {
                let half = self.n_instances / 2;
                let k = self.rr_cursor;
                self.rr_cursor += 1;
                let prefill_inst = k % half;
                let decode_inst = half + k % half;
                self.forced_outcome(plan, ForcedPhi::DisaggPoint, prefill_inst, decode_inst)
            }
            GlobalPolicy::Adaptive {
                search,
                force_phi,
                orientation,
            } => self.schedule_adaptive(plan, hw, snapshot, search, force_phi, orientation),
        }
    }

    fn forced_outcome(
        &mut self,
        plan: &RequestPlan,
        phi: ForcedPhi,
        alpha_inst: usize,
        beta_inst: usize,
    ) -> ScheduleOutcome {
        let total = plan.planned_len();
        let (phi_value, s) = match phi {
            ForcedPhi::DisaggPoint => (
                plan.prompt_len as f64 / total as f64,
                plan.prompt_len,
            ),
            ForcedPhi::Ratio(r) => (r, split_point(total, r)),
        };
        let (mut alpha, mut beta) = split_at(plan, s);
        alpha.instance = Some(InstanceId(alpha_inst));
        beta.instance = Some(InstanceId(beta_inst));
        ScheduleOutcome {
            split: SplitPlan {
                phi: phi_value,
                split_point: s,
                alpha_instance: InstanceId(alpha_inst),
                beta_instance: InstanceId(beta_inst),
            },
            alpha,
            beta,
            probes: 0,
            cold_start: false,
            fallback: false,
            probe_trace: Vec::new(),
        }
    }

    fn schedule_adaptive(
        &mut self,
        plan: &RequestPlan,
        hw: &HardwareProfile,
        snapshot: &mut dyn FnMut(usize) -> VirtualState,
        search: SearchConfig,
        force_phi: Option<ForcedPhi>,
        orientation: Orientation,
    ) -> ScheduleOutcome {
        let n_pairs = self.n_instances / 2;
        let pair = self.pair_cursor % n_pairs;
        self.pair_cursor += 1;
        let (first, second) = (2 * pair, 2 * pair + 1);

        if let Some(phi) = force_phi {
            let (ia, ib) = match orientation {
                Orientation::Fixed | Orientation::ByLoad => (first, second),
                Orientation::Alternate => {
                    self.alt_flip = !self.alt_flip;
                    if self.alt_flip {
                        (first, second)
                    } else {
                        (second, first)
                    }
                }
            };
            return self.forced_outcome(plan, phi, ia, ib);
        }

        let snap_first = snapshot(first);
        let snap_second = snapshot(second);

        // orient alpha onto the emptier instance
        let (ia, ib, snap_a, snap_b) = match orientation {
            Orientation::Fixed => (first, second, snap_first, snap_second),
            Orientation::Alternate => {
                self.alt_flip = !self.alt_flip;
                if self.alt_flip {
                    (first, second, snap_first, snap_second)
                } else {
                    (second, first, snap_second, snap_first)
                }
            }
            Orientation::ByLoad => {
                let load_first = self.predictor.probe(&snap_first, hw, None).unwrap_or(0.0);
                let load_second = self.predictor.probe(&snap_second, hw, None).unwrap_or(0.0);
                if load_first <= load_second {
                    (first, second, snap_first, snap_second)
                } else {
                    (second, first, snap_second, snap_first)
                }
            }
        };

        let total = plan.planned_len();
        let phi0 = plan.prompt_len as f64 / total as f64;

        let cold = self.clocks[ia] == (0.0, 0.0)
            && self.clocks[ib] == (0.0, 0.0)
            && !snap_a.has_work()
            && !snap_b.has_work();
        if cold {
            // cold start: commit the pure disaggregation split and seed the
            // pair's clocks from the predicted timeline
            let mut out = self.forced_outcome(plan, ForcedPhi::DisaggPoint, ia, ib);
            out.cold_start = true;
            if let Ok((t1, t2)) =
                self.predictor
                    .predict_pair(&snap_a, &snap_b, hw, &out.alpha, &out.beta)
            {
                self.clocks[ia].0 = t1;
                self.clocks[ib].1 = t2;
                out.probes = 1;
                out.probe_trace.push((out.split.phi, t1, t2));
            }
            return out;
        }

        // bounded binary search from the disaggregation ratio
        let mut phi = phi0;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut committed: Option<(MicroRequest, MicroRequest, f64, f64, f64)> = None;
        let mut trace = Vec::with_capacity(search.max_probes as usize);
        let mut probes = 0;
        let mut fallback = false;
        for _ in 0..search.max_probes {
            let (a, b) = split_request(plan, phi);
            match self.predictor.predict_pair(&snap_a, &snap_b, hw, &a, &b) {
                Ok((t1, t2)) => {
                    probes += 1;
                    trace.push((phi, t1, t2));
                    committed = Some((a, b, phi, t1, t2));
                    if (t1 - t2).abs() <= search.epsilon_ms {
                        break;
                    }
                    if t1 > t2 {
                        hi = phi;
                    } else {
                        lo = phi;
                    }
                    phi = 0.5 * (lo + hi);
                }
                Err(_) => {
                    fallback = true;
                    break;
                }
            }
        }

        let (mut alpha, mut beta, phi_final, t1, t2) = match committed {
            Some(c) if !fallback || probes > 0 => c,
            _ => {
                // predictor unusable: fall back to the plain disaggregation split
                fallback = true;
                let (a, b) = split_at(plan, plan.prompt_len);
                (a, b, phi0, 0.0, 0.0)
            }
        };
        alpha.instance = Some(InstanceId(ia));
        beta.instance = Some(InstanceId(ib));
        self.clocks[ia].0 = self.clocks[ia].0.max(t1);
        self.clocks[ib].1 = self.clocks[ib].1.max(t2);
        ScheduleOutcome {
            split: SplitPlan {
                phi: phi_final,
                split_point: alpha.span.end - 1,
                alpha_instance: InstanceId(ia),
                beta_instance: InstanceId(ib),
            },
            alpha,
            beta,
            probes,
            cold_start: false,
            fallback,
            probe_trace: trace,
        }
    }

    /// Seeded pair clocks, exposed for inspection.
    pub fn clocks(&self) -> &[(f64, f64)] {
        &self.clocks
    }
}

/// Split a plan at an explicit token boundary (bypasses ratio rounding).
pub fn split_at(plan: &RequestPlan, s: u64) -> (MicroRequest, MicroRequest) {
    use crate::domain::{MicroRole, TokenSpan};
    let total = plan.planned_len();
    let s = s.min(total);
    let alpha_span = TokenSpan::new(1, s + 1);
    let beta_span = TokenSpan::new(s + 1, total + 1);
    let p = plan.prompt_len;
    (
        MicroRequest {
            parent: plan.id,
            role: MicroRole::Alpha,
            span: alpha_span,
            prefill_tokens: alpha_span.overlap(1, p + 1),
            decode_tokens: alpha_span.overlap(p + 1, total + 1),
            instance: None,
        },
        MicroRequest {
            parent: plan.id,
            role: MicroRole::Beta,
            span: beta_span,
            prefill_tokens: beta_span.overlap(1, p + 1),
            decode_tokens: beta_span.overlap(p + 1, total + 1),
            instance: None,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::RequestId;
    use crate::local_scheduler::LocalPolicy;
    use crate::profile_table::ProfileTable;

    fn plan(id: u64, p: u64, d: u64) -> RequestPlan {
        RequestPlan {
            id: RequestId(id),
            arrival_ms: 0.0,
            prompt_len: p,
            predicted_decode: d,
            slo_tbt_ms: 100.0,
        }
    }

    fn idle_snapshot() -> VirtualState {
        let mut table = ProfileTable::default();
        table.seed_from_cost_model(&HardwareProfile::default(), 15, 9);
        VirtualState::idle(table, LocalPolicy::Aps, 100.0, 400_000, 256)
    }

    fn adaptive() -> GlobalPolicy {
        GlobalPolicy::Adaptive {
            search: SearchConfig::default(),
            force_phi: None,
            orientation: Orientation::ByLoad,
        }
    }

    #[test]
    fn first_request_takes_cold_path_second_searches() {
        let hw = HardwareProfile::default();
        let mut gs = GlobalScheduler::new(adaptive(), 2).unwrap();
        let out1 = gs.schedule(&plan(1, 1024, 1024), &hw, &mut |_| idle_snapshot());
        assert!(out1.cold_start);
        // cold path commits the pure disaggregation split
        assert_eq!(out1.split.split_point, 1024);
        assert!(gs.clocks()[0] != (0.0, 0.0) || gs.clocks()[1] != (0.0, 0.0));
        let out2 = gs.schedule(&plan(2, 1024, 1024), &hw, &mut |_| idle_snapshot());
        assert!(!out2.cold_start);
        assert!(out2.probes >= 1);
    }

    #[test]
    fn search_starts_from_disaggregation_ratio() {
        let hw = HardwareProfile::default();
        let mut gs = GlobalScheduler::new(adaptive(), 2).unwrap();
        let _ = gs.schedule(&plan(1, 1024, 1024), &hw, &mut |_| idle_snapshot());
        let out = gs.schedule(&plan(2, 1024, 1024), &hw, &mut |_| idle_snapshot());
        assert!((out.probe_trace[0].0 - 0.5).abs() < 1e-12, "phi0 = P/(P+D)");
    }

    #[test]
    fn probe_count_bounded_by_k() {
        let hw = HardwareProfile::default();
        let mut gs = GlobalScheduler::new(adaptive(), 2).unwrap();
        for i in 0..20 {
            let out = gs.schedule(&plan(i, 100 + 37 * i, 60 + 11 * i), &hw, &mut |_| {
                idle_snapshot()
            });
            assert!(out.probes <= 6, "used {} probes", out.probes);
        }
    }

    #[test]
    fn balanced_request_on_idle_pair_merges_decode() {
        // symmetric idle pair: the balanced point moves decode work onto
        // alpha, so the committed split lands strictly past the prompt
        let hw = HardwareProfile::default();
        let mut gs = GlobalScheduler::new(adaptive(), 2).unwrap();
        let _ = gs.schedule(&plan(1, 1024, 1024), &hw, &mut |_| idle_snapshot());
        let out = gs.schedule(&plan(2, 1024, 1024), &hw, &mut |_| idle_snapshot());
        assert!(
            out.split.split_point > 1024,
            "expected interior split, got s={}",
            out.split.split_point
        );
        assert!(out.alpha.decode_tokens > 0);
    }

    #[test]
    fn decode_heavy_request_merges_decode_into_alpha() {
        let hw = HardwareProfile::default();
        let mut gs = GlobalScheduler::new(adaptive(), 2).unwrap();
        let _ = gs.schedule(&plan(1, 219, 1467), &hw, &mut |_| idle_snapshot());
        let out = gs.schedule(&plan(2, 219, 1467), &hw, &mut |_| idle_snapshot());
        assert!(out.split.split_point > 219, "s={}", out.split.split_point);
    }

    #[test]
    fn four_instance_pairs_alternate_strictly() {
        let hw = HardwareProfile::default();
        let mut gs = GlobalScheduler::new(adaptive(), 4).unwrap();
        let mut pair_of: Vec<usize> = Vec::new();
        for i in 0..100 {
            let out = gs.schedule(&plan(i, 512, 256), &hw, &mut |_| idle_snapshot());
            let a = out.split.alpha_instance.0;
            let b = out.split.beta_instance.0;
            let pair = a.min(b) / 2;
            assert_eq!(a / 2, b / 2, "halves must stay within one pair");
            pair_of.push(pair);
        }
        for (i, p) in pair_of.iter().enumerate() {
            assert_eq!(*p, i % 2, "pair cursor must alternate");
        }
    }

    #[test]
    fn forced_ratio_one_leaves_beta_empty() {
        let hw = HardwareProfile::default();
        let mut gs = GlobalScheduler::new(
            GlobalPolicy::Adaptive {
                search: SearchConfig::default(),
                force_phi: Some(ForcedPhi::Ratio(1.0)),
                orientation: Orientation::Fixed,
            },
            2,
        )
        .unwrap();
        let out = gs.schedule(&plan(1, 512, 128), &hw, &mut |_| idle_snapshot());
        assert!(out.beta.is_empty());
        assert_eq!(out.probes, 0);
    }

    #[test]
    fn role_split_uses_disagg_point_exactly() {
        let hw = HardwareProfile::default();
        let mut gs = GlobalScheduler::new(GlobalPolicy::RoleSplit, 2).unwrap();
        let out = gs.schedule(&plan(1, 8192, 32), &hw, &mut |_| idle_snapshot());
        assert_eq!(out.split.split_point, 8192);
        assert_eq!(out.alpha.decode_tokens, 0);
        assert_eq!(out.beta.prefill_tokens, 0);
        assert_eq!(out.split.alpha_instance.0, 0);
        assert_eq!(out.split.beta_instance.0, 1);
    }

    #[test]
    fn round_robin_cycles_instances() {
        let hw = HardwareProfile::default();
        let mut gs = GlobalScheduler::new(GlobalPolicy::RoundRobinWhole, 3).unwrap();
        let insts: Vec<usize> = (0..6)
            .map(|i| {
                gs.schedule(&plan(i, 128, 64), &hw, &mut |_| idle_snapshot())
                    .split
                    .alpha_instance
                    .0
            })
            .collect();
        assert_eq!(insts, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn predictor_failure_falls_back_to_disagg_split() {
        let hw = HardwareProfile::default();
        let mut gs = GlobalScheduler::new(adaptive(), 2).unwrap();
        // full KV: every probe stalls
        let mut snap = idle_snapshot();
        snap.kv_reserved = snap.kv_capacity;
        let mut mk = |_: usize| {
            let mut s = snap.clone();
            // non-empty queues so the cold path is skipped
            let (alpha, _) = split_at(&plan(9, 100, 50), 150);
            s.push_micro(&alpha);
            s
        };
        let out = gs.schedule(&plan(1, 1000, 500), &hw, &mut mk);
        assert!(out.fallback);
        assert_eq!(out.split.split_point, 1000);
    }

    #[test]
    fn odd_cluster_rejected_for_pairing_policies() {
        assert!(GlobalScheduler::new(adaptive(), 3).is_err());
        assert!(GlobalScheduler::new(GlobalPolicy::RoleSplit, 5).is_err());
        assert!(GlobalScheduler::new(GlobalPolicy::RoundRobinWhole, 1).is_ok());
    }
}
