//! Analytical latency and transfer-time model standing in for real GPU
//! hardware.
//!
//! Batch latency is the sum of a compute term and a memory term plus a
//! fixed launch overhead. Prefill tokens drive the compute term (linear
//! plus intra-chunk and prefix attention); decode steps drive the memory
//! term (weight reload plus KV reads over their context). The terms add
//! because the dense and attention phases of each layer serialize, which
//! is what makes the latency knee shift with decode context length. The
//! same profile also prices cross-instance KV transfers.

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Static description of one simulated GPU instance and its interconnect.
///
/// The default profile is synthetic: it is shaped so that a single instance
/// behaves like a mid-size model on a data-center accelerator (compute-bound
/// prefill around 11 tokens/ms, memory-bound decode, 25 GB/s link).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    /// Effective dense-compute rate in FLOP per millisecond.
    pub flops_per_ms: f64,
    /// FLOP per token for the linear layers (applies to prefill and decode).
    pub c_lin: f64,
    /// FLOP per attended token pair (prefill attention terms).
    pub c_attn: f64,
    /// HBM bandwidth in bytes per millisecond.
    pub mem_bw_bytes_per_ms: f64,
    /// Model weight footprint in bytes (reloaded every batch).
    pub weight_bytes: f64,
    /// KV-cache size per token in bytes.
    pub kv_bytes_per_token: f64,
    /// Inter-instance link bandwidth in bytes per millisecond.
    pub link_bw_bytes_per_ms: f64,
    /// Per-message link latency in milliseconds.
    pub link_latency_ms: f64,
    /// Per-batch launch cost in milliseconds.
    pub fixed_overhead_ms: f64,
    /// KV capacity of one instance, in tokens.
    pub hbm_capacity_tokens: u64,
}

impl Default for HardwareProfile {
    fn default() -> Self {
        Self {
            flops_per_ms: 1.9e11,
            c_lin: 1.2863e10,
            c_attn: 5.24e5,
            mem_bw_bytes_per_ms: 1.6e9,
            weight_bytes: 1.6e10,
            kv_bytes_per_token: 131072.0,
            link_bw_bytes_per_ms: 2.5e7,
            link_latency_ms: 0.05,
            fixed_overhead_ms: 0.5,
            hbm_capacity_tokens: 400_000,
        }
    }
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<(), CostModelError> {
        let rates = [
            ("flops_per_ms", self.flops_per_ms),
            ("c_lin", self.c_lin),
            ("mem_bw_bytes_per_ms", self.mem_bw_bytes_per_ms),
            ("weight_bytes", self.weight_bytes),
            ("kv_bytes_per_token", self.kv_bytes_per_token),
            ("link_bw_bytes_per_ms", self.link_bw_bytes_per_ms),
        ];
        for (name, v) in rates {
            if v <= 0.0 {
                return Err(CostModelError::InvalidProfile {
                    field: name,
                    value: v,
                });
            }
        }
        if self.c_attn < 0.0 || self.link_latency_ms < 0.0 || self.fixed_overhead_ms < 0.0 {
            return Err(CostModelError::InvalidProfile {
                field: "c_attn/link_latency_ms/fixed_overhead_ms",
                value: -1.0,
            });
        }
        if self.hbm_capacity_tokens == 0 {
            return Err(CostModelError::InvalidProfile {
                field: "hbm_capacity_tokens",
                value: 0.0,
            });
        }
        Ok(())
    }
}

/// Composition of one execution batch, as priced by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchShape {
    /// Total prefill tokens granted in the batch.
    pub plen: u64,
    /// Number of decode entries (one token each).
    pub dnum: u64,
    /// Mean context length over decode entries, in tokens.
    pub ctx: f64,
    /// Sum over prefill chunks of (chunk length x cached prefix length).
    pub prefill_ctx_sum: u64,
}

impl BatchShape {
    pub fn decode_only(dnum: u64, ctx: f64) -> Self {
        Self {
            plen: 0,
            dnum,
            ctx,
            prefill_ctx_sum: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.plen == 0 && self.dnum == 0
    }

    /// Tokens processed by the batch (prefill grants plus decode steps).
    pub fn tokens(&self) -> u64 {
        self.plen + self.dnum
    }
}

#[derive(Debug, Error)]
pub enum CostModelError {
    #[error("hardware profile field {field} has invalid value {value}")]
    InvalidProfile { field: &'static str, value: f64 },
    #[error("calibration needs at least 4 non-degenerate targets, got {0}")]
    TooFewTargets(usize),
    #[error("singular calibration fit; deficient directions: {0}")]
    SingularFit(String),
}

/// Compute-roofline time of a batch in milliseconds.
pub fn compute_time(shape: &BatchShape, hw: &HardwareProfile) -> f64 {
    let linear = hw.c_lin * (shape.plen + shape.dnum) as f64;
    let attn_pairs = shape.prefill_ctx_sum as f64 + (shape.plen as f64).powi(2) / 2.0;
    (linear + hw.c_attn * attn_pairs) / hw.flops_per_ms
}

/// Memory-roofline time of a batch in milliseconds.
pub fn memory_time(shape: &BatchShape, hw: &HardwareProfile) -> f64 {
    let kv_traffic = shape.dnum as f64 * shape.ctx + shape.plen as f64;
    (hw.weight_bytes + hw.kv_bytes_per_token * kv_traffic) / hw.mem_bw_bytes_per_ms
}

/// Deterministic latency of executing one batch: the dense/attention
/// compute phase and the weight+KV streaming phase execute back to back.
pub fn batch_latency(shape: &BatchShape, hw: &HardwareProfile) -> f64 {
    compute_time(shape, hw) + memory_time(shape, hw) + hw.fixed_overhead_ms
}

/// Latency with optional multiplicative lognormal noise (mean preserved).
/// `sigma = 0` reduces to the deterministic model without drawing.
pub fn batch_latency_noisy<R: Rng>(
    shape: &BatchShape,
    hw: &HardwareProfile,
    sigma: f64,
    rng: &mut R,
) -> f64 {
    let base = batch_latency(shape, hw);
    if sigma <= 0.0 {
        return base;
    }
    let dist = LogNormal::new(-sigma * sigma / 2.0, sigma).expect("valid lognormal");
    base * dist.sample(rng)
}

/// Time to move `tokens` worth of KV cache across the link.
pub fn transfer_time(tokens: u64, hw: &HardwareProfile) -> f64 {
    if tokens == 0 {
        return 0.0;
    }
    hw.link_latency_ms + tokens as f64 * hw.kv_bytes_per_token / hw.link_bw_bytes_per_ms
}

/// Residuals of a calibration fit.
#[derive(Debug, Clone)]
pub struct CalibrationReport {
    /// Per-target (predicted - observed) in milliseconds.
    pub residuals: Vec<f64>,
    pub rms_ms: f64,
    pub iterations: usize,
}

/// Fit `c_lin`, `c_attn`, `weight_bytes` and `kv_bytes_per_token` to
/// observed (shape, latency) targets by linear least squares; the additive
/// latency form is linear in all four coefficients. The compute/memory
/// rates of `base` stay fixed (only ratios are identifiable) and link and
/// overhead fields carry over unchanged.
pub fn calibrate(
    targets: &[(BatchShape, f64)],
    base: &HardwareProfile,
) -> Result<(HardwareProfile, CalibrationReport), CostModelError> {
    if targets.len() < 4 {
        return Err(CostModelError::TooFewTargets(targets.len()));
    }
    // regressors per target: t - overhead = a1*x1 + a2*x2 + b0 + b1*x3
    let names = ["c_lin", "c_attn", "weight_bytes", "kv_bytes_per_token"];
    let rows: Vec<([f64; 4], f64)> = targets
        .iter()
        .map(|(s, t)| {
            let x1 = (s.plen + s.dnum) as f64;
            let x2 = s.prefill_ctx_sum as f64 + (s.plen as f64).powi(2) / 2.0;
            let x3 = s.dnum as f64 * s.ctx + s.plen as f64;
            ([x1, x2, 1.0, x3], t - base.fixed_overhead_ms)
        })
        .collect();

    // normal equations with column scaling for conditioning
    let mut scale = [0.0f64; 4];
    for (x, _) in &rows {
        for j in 0..4 {
            scale[j] = scale[j].max(x[j].abs());
        }
    }
    for (j, sc) in scale.iter().enumerate() {
        if *sc == 0.0 {
            return Err(CostModelError::SingularFit(names[j].to_string()));
        }
    }
    let mut ata = [[0.0f64; 4]; 4];
    let mut atb = [0.0f64; 4];
    for (x, t) in &rows {
        let xs: Vec<f64> = (0..4).map(|j| x[j] / scale[j]).collect();
        for i in 0..4 {
            for j in 0..4 {
                ata[i][j] += xs[i] * xs[j];
            }
            atb[i] += xs[i] * t;
        }
    }
    let coeffs = solve4(&mut ata, &mut atb, &names)?;
    let a1 = coeffs[0] / scale[0];
    let a2 = coeffs[1] / scale[1];
    let b0 = coeffs[2] / scale[2];
    let b1 = coeffs[3] / scale[3];

    let fitted = HardwareProfile {
        c_lin: a1 * base.flops_per_ms,
        c_attn: a2 * base.flops_per_ms,
        weight_bytes: b0 * base.mem_bw_bytes_per_ms,
        kv_bytes_per_token: b1 * base.mem_bw_bytes_per_ms,
        ..base.clone()
    };
    let residuals: Vec<f64> = targets
        .iter()
        .map(|(s, t)| batch_latency(s, &fitted) - t)
        .collect();
    let rms = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
    Ok((
        fitted,
        CalibrationReport {
            residuals,
            rms_ms: rms,
            iterations: 1,
        },
    ))
}

/// Gaussian elimination with partial pivoting on a 4x4 system; a vanishing
/// pivot names the unidentifiable direction.
fn solve4(
    a: &mut [[f64; 4]; 4],
    b: &mut [f64; 4],
    names: &[&str; 4],
) -> Result<[f64; 4], CostModelError> {
    let mut perm = [0usize, 1, 2, 3];
    for col in 0..4 {
        let (pivot_row, pivot) = (col..4)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .expect("non-empty");
        if pivot < 1e-9 {
            return Err(CostModelError::SingularFit(names[perm[col]].to_string()));
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        perm.swap(col, pivot_row);
        for r in 0..4 {
            if r == col {
                continue;
            }
            let f = a[r][col] / a[col][col];
            for c in 0..4 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut out = [0.0f64; 4];
    for i in 0..4 {
        out[i] = b[i] / a[i][i];
    }
    Ok(out)
}
