//! Core request and micro-request types shared by every scheduler and the
//! simulation engine.
//!
//! A request of prompt length `P` and decode length `D` is treated as a
//! single logical token sequence `1..=L` with `L = P + D`. A split point `s`
//! divides it into two micro-requests: alpha covering tokens `1..=s` and
//! beta covering tokens `s+1..=L`. Either side may be empty (`s = 0` or
//! `s = L`), which degenerates to no partitioning at all.

use serde::{Deserialize, Serialize};

/// Unique request identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequestId(pub u64);

/// Identifier of a simulated GPU instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceId(pub usize);

/// Which half of a split a micro-request represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MicroRole {
    Alpha,
    Beta,
}

/// Half-open range of 1-based token indices `[start, end)`.
///
/// A span with `start >= end` is empty. Token `t` belongs to the span iff
/// `start <= t < end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: u64,
    pub end: u64,
}

impl TokenSpan {
    pub fn new(start: u64, end: u64) -> Self {
        Self { start, end }
    }

    pub fn empty() -> Self {
        Self { start: 1, end: 1 }
    }

    pub fn len(&self) -> u64 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, token: u64) -> bool {
        token >= self.start && token < self.end
    }

    /// Number of tokens shared with the half-open range `[lo, hi)`.
    pub fn overlap(&self, lo: u64, hi: u64) -> u64 {
        let a = self.start.max(lo);
        let b = self.end.min(hi);
        b.saturating_sub(a)
    }
}

/// One inference job as known to the engine.
///
/// `decode_len` is the ground-truth number of output tokens. Schedulers must
/// never observe it; they plan against [`RequestPlan`], which carries only
/// the predicted decode length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    /// Arrival time in simulated milliseconds.
    pub arrival_ms: f64,
    /// Prompt length P in tokens.
    pub prompt_len: u64,
    /// Actual decode length D in tokens. Hidden from schedulers.
    decode_len: u64,
    /// Predicted decode length D-hat (margin already applied).
    pub predicted_decode: u64,
    /// Per-request time-between-tokens SLO in milliseconds.
    pub slo_tbt_ms: f64,
}

impl Request {
    pub fn new(
        id: RequestId,
        arrival_ms: f64,
        prompt_len: u64,
        decode_len: u64,
        predicted_decode: u64,
        slo_tbt_ms: f64,
    ) -> Self {
        assert!(prompt_len >= 1, "prompt_len must be >= 1");
        assert!(decode_len >= 1, "decode_len must be >= 1");
        assert!(predicted_decode >= 1, "predicted_decode must be >= 1");
        assert!(slo_tbt_ms > 0.0, "slo_tbt_ms must be positive");
        Self {
            id,
            arrival_ms,
            prompt_len,
            decode_len,
            predicted_decode,
            slo_tbt_ms,
        }
    }

    /// Planning view handed to schedulers: actual decode length stripped.
    pub fn plan(&self) -> RequestPlan {
        RequestPlan {
            id: self.id,
            arrival_ms: self.arrival_ms,
            prompt_len: self.prompt_len,
            predicted_decode: self.predicted_decode,
            slo_tbt_ms: self.slo_tbt_ms,
        }
    }

    /// Ground-truth decode length; only the execution engine may consult it.
    pub fn actual_decode(&self) -> u64 {
        self.decode_len
    }

    /// Total executed length P + D (actual).
    pub fn actual_len(&self) -> u64 {
        self.prompt_len + self.decode_len
    }
}

/// What the schedulers are allowed to see about a request.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RequestPlan {
    pub id: RequestId,
    pub arrival_ms: f64,
    pub prompt_len: u64,
    pub predicted_decode: u64,
    pub slo_tbt_ms: f64,
}

impl RequestPlan {
    /// Planned total length L = P + D-hat.
    pub fn planned_len(&self) -> u64 {
        self.prompt_len + self.predicted_decode
    }
}

/// A contiguous token span of one request, executed as a unit on one
/// instance. May cover prefill, decode, or a mix of both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroRequest {
    pub parent: RequestId,
    pub role: MicroRole,
    pub span: TokenSpan,
    /// Prompt tokens inside the span.
    pub prefill_tokens: u64,
    /// Decode tokens inside the span (planning view).
    pub decode_tokens: u64,
    pub instance: Option<InstanceId>,
}

impl MicroRequest {
    pub fn is_empty(&self) -> bool {
        self.span.is_empty()
    }

    /// True when the span holds both prompt and decode tokens.
    pub fn is_mixed(&self) -> bool {
        self.prefill_tokens > 0 && self.decode_tokens > 0
    }
}

/// The outcome of a split decision: ratio, token boundary, and the instance
/// pair the two halves are bound to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub phi: f64,
    /// Split point s = ceil(phi * L) in tokens.
    pub split_point: u64,
    pub alpha_instance: InstanceId,
    pub beta_instance: InstanceId,
}

/// Split a request at ratio `phi` into its alpha and beta micro-requests.
///
/// Alpha covers tokens `1..=s`, beta covers `s+1..=L` with `s = ceil(phi*L)`
/// over the planned length `L = P + D-hat`. Segment counts are measured
/// against the prompt boundary `P`: tokens `1..=P` are prefill, the rest
/// decode.
pub fn split_request(plan: &RequestPlan, phi: f64) -> (MicroRequest, MicroRequest) {
    assert!((0.0..=1.0).contains(&phi), "phi must lie in [0, 1]");
    let total = plan.planned_len();
    let s = split_point(total, phi);
    let alpha_span = TokenSpan::new(1, s + 1);
    let beta_span = TokenSpan::new(s + 1, total + 1);
    let p = plan.prompt_len;
    let alpha = MicroRequest {
        parent: plan.id,
        role: MicroRole::Alpha,
        span: alpha_span,
        prefill_tokens: alpha_span.overlap(1, p + 1),
        decode_tokens: alpha_span.overlap(p + 1, total + 1),
        instance: None,
    };
    let beta = MicroRequest {
        parent: plan.id,
        role: MicroRole::Beta,
        span: beta_span,
        prefill_tokens: beta_span.overlap(1, p + 1),
        decode_tokens: beta_span.overlap(p + 1, total + 1),
        instance: None,
    };
    (alpha, beta)
}

/// Token boundary for a ratio: `s = ceil(phi * L)`, exact at integral points.
pub fn split_point(total_len: u64, phi: f64) -> u64 {
    let raw = phi * total_len as f64;
    let s = raw.ceil() as u64;
    s.min(total_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plan(p: u64, dhat: u64) -> RequestPlan {
        RequestPlan {
            id: RequestId(1),
            arrival_ms: 0.0,
            prompt_len: p,
            predicted_decode: dhat,
            slo_tbt_ms: 100.0,
        }
    }

    #[test]
    fn balanced_split_is_disaggregation_point() {
        // P=1024, D=1024, phi=0.5 -> s=1024: pure prefill alpha, pure decode beta
        let (a, b) = split_request(&plan(1024, 1024), 0.5);
        assert_eq!(a.span, TokenSpan::new(1, 1025));
        assert_eq!(a.prefill_tokens, 1024);
        assert_eq!(a.decode_tokens, 0);
        assert_eq!(b.prefill_tokens, 0);
        assert_eq!(b.decode_tokens, 1024);
    }

    #[test]
    fn interior_split_mixes_prefill_and_decode() {
        // phi = 1358/2048 -> s=1358: alpha = 1024 prefill + 334 decode, beta = 690 decode
        let (a, b) = split_request(&plan(1024, 1024), 1358.0 / 2048.0);
        assert_eq!(a.span.end - 1, 1358);
        assert_eq!(a.prefill_tokens, 1024);
        assert_eq!(a.decode_tokens, 334);
        assert_eq!(b.prefill_tokens, 0);
        assert_eq!(b.decode_tokens, 690);
        assert!(a.is_mixed());
    }

    #[test]
    fn zero_phi_leaves_alpha_empty() {
        let (a, b) = split_request(&plan(512, 64), 0.0);
        assert!(a.is_empty());
        assert_eq!(b.prefill_tokens, 512);
        assert_eq!(b.decode_tokens, 64);
        assert_eq!(b.span, TokenSpan::new(1, 577));
    }

    #[test]
    fn prefill_heavy_disaggregation_split() {
        // P=8192, D=32, phi = 8192/8224 -> s = 8192 exactly
        let (a, b) = split_request(&plan(8192, 32), 8192.0 / 8224.0);
        assert_eq!(a.span.end - 1, 8192);
        assert_eq!(a.prefill_tokens, 8192);
        assert_eq!(a.decode_tokens, 0);
        assert_eq!(b.decode_tokens, 32);
    }

    #[test]
    fn integral_phi_product_is_exact() {
        // ceil is a no-op when phi*L is integral
        assert_eq!(split_point(2048, 0.5), 1024);
        assert_eq!(split_point(2048, 1.0), 2048);
        assert_eq!(split_point(2048, 0.0), 0);
    }

    #[test]
    fn split_inside_prompt_gives_beta_prefill() {
        let (a, b) = split_request(&plan(1000, 10), 0.3);
        // s = ceil(303) = 303, inside the prompt
        assert_eq!(a.prefill_tokens, 303);
        assert_eq!(a.decode_tokens, 0);
        assert_eq!(b.prefill_tokens, 697);
        assert_eq!(b.decode_tokens, 10);
    }

    proptest! {
        #[test]
        fn reassembly_and_conservation(p in 1u64..5000, d in 1u64..5000, phi in 0.0f64..=1.0) {
            let pl = plan(p, d);
            let total = pl.planned_len();
            let (a, b) = split_request(&pl, phi);
            // spans tile [1, L] exactly
            prop_assert_eq!(a.span.start, 1);
            prop_assert_eq!(a.span.end, b.span.start);
            prop_assert_eq!(b.span.end, total + 1);
            prop_assert_eq!(a.span.len() + b.span.len(), total);
            // segment conservation
            prop_assert_eq!(a.prefill_tokens + b.prefill_tokens, p);
            prop_assert_eq!(a.decode_tokens + b.decode_tokens, d);
        }

        #[test]
        fn alpha_grows_with_phi(p in 1u64..3000, d in 1u64..3000,
                                phi1 in 0.0f64..=1.0, phi2 in 0.0f64..=1.0) {
            let (lo, hi) = if phi1 <= phi2 { (phi1, phi2) } else { (phi2, phi1) };
            let pl = plan(p, d);
            let (a1, _) = split_request(&pl, lo);
            let (a2, _) = split_request(&pl, hi);
            prop_assert!(a2.span.len() >= a1.span.len());
        }
    }
}
