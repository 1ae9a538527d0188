//! Runtime-updated latency table: records executed-batch observations keyed
//! by bucketed (plen, ctx, dnum) and answers prefill-budget queries.
//!
//! Buckets are geometric with factor 2: index 0 holds the value 0, index k
//! (k >= 1) covers `(2^(k-2), 2^(k-1)]`, so the edges run 0, 1, 2, 4, 8, ...
//! Estimates for unobserved shapes fall back conservatively: donors with
//! less prefill and more decode work, scaled up by the prefill bucket ratio.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::costmodel::{batch_latency, BatchShape, HardwareProfile};
use thiserror::Error;

/// Largest prefill bucket the budget scan considers (upper edge 32768).
pub const MAX_PLEN_BUCKET: u8 = 16;

/// Bucket index for a token/count value under factor-2 edges.
pub fn bucket_index(v: u64) -> u8 {
    match v {
        0 => 0,
        // 1 + ceil(log2(v)): 1 -> 1, 2 -> 2, 3..4 -> 3, 5..8 -> 4, ...
        1 => 1,
        _ => 1 + (64 - (v - 1).leading_zeros()) as u8,
    }
}

/// Upper edge (representative value) of a bucket.
pub fn bucket_upper(idx: u8) -> u64 {
    if idx == 0 {
        0
    } else {
        1u64 << (idx - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BucketStat {
    ema_ms: f64,
    samples: u64,
}

/// Bucketed map from batch shape to observed latency.
#[derive(Debug, Clone)]
pub struct ProfileTable {
    buckets: HashMap<(u8, u8, u8), BucketStat>,
    ema_alpha: f64,
    default_budget: u64,
    /// Count of record() calls; distinguishes table states cheaply.
    generation: u64,
}

impl Default for ProfileTable {
    fn default() -> Self {
        Self::new(0.3, 512)
    }
}

#[derive(Debug, Error)]
pub enum TableIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed table row at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

impl ProfileTable {
    pub fn new(ema_alpha: f64, default_budget: u64) -> Self {
        assert!(ema_alpha > 0.0 && ema_alpha <= 1.0);
        Self {
            buckets: HashMap::new(),
            ema_alpha,
            default_budget,
            generation: 0,
        }
    }

    /// Monotone counter of state changes (records and seeds).
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn default_budget(&self) -> u64 {
        self.default_budget
    }

    fn key(plen: u64, ctx: f64, dnum: u64) -> (u8, u8, u8) {
        (
            bucket_index(plen),
            bucket_index(ctx.ceil().max(0.0) as u64),
            bucket_index(dnum),
        )
    }

    /// Fold one executed-batch observation into the table.
    pub fn record(&mut self, plen: u64, ctx: f64, dnum: u64, time_ms: f64) {
        debug_assert!(time_ms > 0.0, "observed latency must be positive");
        self.generation += 1;
        let key = Self::key(plen, ctx, dnum);
        let alpha = self.ema_alpha;
        self.buckets
            .entry(key)
            .and_modify(|b| {
                b.ema_ms = alpha * time_ms + (1.0 - alpha) * b.ema_ms;
                b.samples += 1;
            })
            .or_insert(BucketStat {
                ema_ms: time_ms,
                samples: 1,
            });
    }

    /// Estimated latency for a shape, or `None` when the table has nothing
    /// to say. Exact bucket hits return the EMA; otherwise the estimate is
    /// the max over occupied donors with smaller-or-equal plen and
    /// larger-or-equal ctx/dnum, scaled by the prefill bucket ratio.
    pub fn lookup(&self, plen: u64, ctx: f64, dnum: u64) -> Option<f64> {
        let (bp, bc, bd) = Self::key(plen, ctx, dnum);
        if let Some(stat) = self.buckets.get(&(bp, bc, bd)) {
            return Some(stat.ema_ms);
        }
        let mut best: Option<f64> = None;
        for (&(p, c, d), stat) in &self.buckets {
            if p <= bp && c >= bc && d >= bd {
                let scale = if p == bp || bp == 0 {
                    1.0
                } else if p == 0 {
                    // decode-only donor carries no prefill signal to scale
                    continue;
                } else {
                    bucket_upper(bp) as f64 / bucket_upper(p) as f64
                };
                let est = stat.ema_ms * scale;
                best = Some(best.map_or(est, |b: f64| b.max(est)));
            }
        }
        best
    }

    /// Largest prefill token budget M whose estimated latency stays within
    /// the SLO at the given decode composition.
    ///
    /// Returns 0 when the decode-only estimate already exceeds the SLO and
    /// the default budget when the table carries no prefill information.
    pub fn max_prefill_allowed(&self, slo_ms: f64, ctx: f64, dnum: u64) -> u64 {
        debug_assert!(slo_ms > 0.0);
        if dnum > 0 {
            if let Some(decode_only) = self.lookup(0, ctx, dnum) {
                if decode_only > slo_ms {
                    return 0;
                }
            }
        }
        let mut saw_estimate = false;
        for k in (1..=MAX_PLEN_BUCKET).rev() {
            let m = bucket_upper(k);
            if let Some(est) = self.lookup(m, ctx, dnum) {
                saw_estimate = true;
                if est <= slo_ms {
                    return m;
                }
            }
        }
        if saw_estimate {
            // every informed bucket breached the SLO
            0
        } else {
            self.default_budget
        }
    }

    /// Pre-populate every bucket combination from the cost model, evaluated
    /// at bucket upper edges (conservative within each bucket).
    pub fn seed_from_cost_model(&mut self, hw: &HardwareProfile, max_ctx_bucket: u8, max_dnum_bucket: u8) {
        for bp in 0..=MAX_PLEN_BUCKET {
            for bc in 0..=max_ctx_bucket {
                for bd in 0..=max_dnum_bucket {
                    let shape = BatchShape {
                        plen: bucket_upper(bp),
                        dnum: bucket_upper(bd),
                        ctx: bucket_upper(bc) as f64,
                        prefill_ctx_sum: 0,
                    };
                    if shape.is_empty() {
                        continue;
                    }
                    let t = batch_latency(&shape, hw);
                    self.buckets.insert(
                        (bp, bc, bd),
                        BucketStat {
                            ema_ms: t,
                            samples: 1,
                        },
                    );
                }
            }
        }
        self.generation += 1;
    }

    /// Write the table as flat CSV: plen_bucket,ctx_bucket,dnum_bucket,ema_ms,samples.
    pub fn dump_csv<W: Write>(&self, mut w: W) -> Result<(), TableIoError> {
        writeln!(w, "plen_bucket,ctx_bucket,dnum_bucket,ema_ms,samples")?;
        let mut keys: Vec<_> = self.buckets.keys().copied().collect();
        keys.sort_unstable();
        for k in keys {
            let stat = self.buckets[&k];
            writeln!(w, "{},{},{},{},{}", k.0, k.1, k.2, stat.ema_ms, stat.samples)?;
        }
        Ok(())
    }

    pub fn dump_csv_path(&self, path: &Path) -> Result<(), TableIoError> {
        let f = std::fs::File::create(path)?;
        self.dump_csv(std::io::BufWriter::new(f))
    }

    /// Load a table previously written by [`Self::dump_csv`].
    pub fn load_csv<R: BufRead>(r: R, ema_alpha: f64, default_budget: u64) -> Result<Self, TableIoError> {
        let mut table = Self::new(ema_alpha, default_budget);
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 {
                continue; // header
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(TableIoError::Malformed {
                    line: i + 1,
                    reason: format!("expected 5 fields, got {}", parts.len()),
                });
            }
            let parse = |s: &str, what: &str| -> Result<f64, TableIoError> {
                s.trim().parse().map_err(|e| TableIoError::Malformed {
                    line: i + 1,
                    reason: format!("{what}: {e}"),
                })
            };
            let bp = parse(parts[0], "plen_bucket")? as u8;
            let bc = parse(parts[1], "ctx_bucket")? as u8;
            let bd = parse(parts[2], "dnum_bucket")? as u8;
            let ema = parse(parts[3], "ema_ms")?;
            let samples = parse(parts[4], "samples")? as u64;
            table.buckets.insert(
                (bp, bc, bd),
                BucketStat {
                    ema_ms: ema,
                    samples,
                },
            );
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn bucket_edges_follow_powers_of_two() {
        assert_eq!(bucket_index(0), 0);
        assert_eq!(bucket_index(1), 1);
        assert_eq!(bucket_index(2), 2);
        assert_eq!(bucket_index(3), 3);
        assert_eq!(bucket_index(4), 3);
        assert_eq!(bucket_index(5), 4);
        assert_eq!(bucket_index(8), 4);
        // 500 and 700 land in distinct buckets under edges ...,256,512,1024,...
        assert_ne!(bucket_index(500), bucket_index(700));
        assert_eq!(bucket_upper(bucket_index(500)), 512);
        assert_eq!(bucket_upper(bucket_index(700)), 1024);
        for k in 1..=20u8 {
            let u = bucket_upper(k);
            assert_eq!(bucket_index(u), k);
            assert_eq!(bucket_index(u / 2 + 1), k);
        }
    }

    #[test]
    fn ema_updates_as_specified() {
        let mut t = ProfileTable::new(0.5, 512);
        t.record(500, 100.0, 4, 40.0);
        t.record(500, 100.0, 4, 60.0);
        assert_relative_eq!(t.lookup(500, 100.0, 4).unwrap(), 50.0);
    }

    #[test]
    fn fresh_bucket_takes_time_directly() {
        let mut t = ProfileTable::default();
        t.record(100, 50.0, 2, 33.0);
        assert_eq!(t.lookup(100, 50.0, 2), Some(33.0));
    }

    #[test]
    fn empty_table_lookup_absent() {
        let t = ProfileTable::default();
        assert_eq!(t.lookup(512, 1024.0, 8), None);
    }

    #[test]
    fn empty_table_budget_is_default() {
        let t = ProfileTable::default();
        assert_eq!(t.max_prefill_allowed(50.0, 1024.0, 8), 512);
    }

    #[test]
    fn decode_only_breach_zeroes_budget() {
        let mut t = ProfileTable::default();
        t.record(0, 1024.0, 8, 80.0);
        assert_eq!(t.max_prefill_allowed(50.0, 1024.0, 8), 0);
    }

    #[test]
    fn seeded_budget_matches_cost_model_within_one_bucket() {
        let hw = HardwareProfile::default();
        let mut t = ProfileTable::default();
        t.seed_from_cost_model(&hw, 15, 9);
        // anchor: at 50 ms SLO, ctx=1024, dnum=29 the true admissible prefill
        // is ~512; budget must land within one bucket of that
        let m = t.max_prefill_allowed(50.0, 1024.0, 29);
        assert!(
            (256..=1024).contains(&m),
            "budget {m} not within one bucket of 512"
        );
        // oracle check: the budget the table grants is safe under the model
        // evaluated at the bucket edges it reasons over
        let shape = BatchShape {
            plen: m,
            dnum: 32,
            ctx: 1024.0,
            prefill_ctx_sum: 0,
        };
        assert!(batch_latency(&shape, &hw) <= 50.0 + 1e-9);
    }

    #[test]
    fn csv_round_trip() {
        let mut t = ProfileTable::default();
        t.record(512, 1024.0, 8, 42.0);
        t.record(0, 2048.0, 64, 17.5);
        let mut buf = Vec::new();
        t.dump_csv(&mut buf).unwrap();
        let loaded = ProfileTable::load_csv(&buf[..], 0.3, 512).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.lookup(512, 1024.0, 8), t.lookup(512, 1024.0, 8));
        assert_eq!(loaded.lookup(0, 2048.0, 64), t.lookup(0, 2048.0, 64));
    }

    #[test]
    fn malformed_csv_reports_line() {
        let data = "plen_bucket,ctx_bucket,dnum_bucket,ema_ms,samples\n1,2,3\n";
        match ProfileTable::load_csv(data.as_bytes(), 0.3, 512) {
            Err(TableIoError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    proptest! {
        /// Fallback estimates never sit below any donor bucket's EMA.
        #[test]
        fn fallback_never_underestimates_donors(
            entries in proptest::collection::vec(
                (0u64..4096, 0u64..8192, 0u64..256, 1.0f64..200.0), 1..20),
            q_plen in 0u64..4096, q_ctx in 0u64..8192, q_dnum in 0u64..256,
        ) {
            let mut t = ProfileTable::new(0.3, 512);
            for (p, c, d, ms) in &entries {
                t.record(*p, *c as f64, *d, *ms);
            }
            let (bp, bc, bd) = ProfileTable::key(q_plen, q_ctx as f64, q_dnum);
            if t.buckets.contains_key(&(bp, bc, bd)) {
                // exact hit: nothing to check
                return Ok(());
            }
            if let Some(est) = t.lookup(q_plen, q_ctx as f64, q_dnum) {
                // exhaustive donor scan
                for (&(p, c, d), stat) in &t.buckets {
                    let donor_ok = p <= bp && c >= bc && d >= bd && !(p == 0 && bp > 0);
                    if donor_ok {
                        prop_assert!(est >= stat.ema_ms - 1e-9,
                            "estimate {} under donor {}", est, stat.ema_ms);
                    }
                }
            }
        }

        /// Fewer decodes never shrink the budget (monotone underlying table).
        #[test]
        fn budget_antitone_in_dnum(ctx in 0u64..4096, d1 in 0u64..128, d2 in 0u64..128) {
            let hw = HardwareProfile::default();
            let mut t = ProfileTable::default();
            t.seed_from_cost_model(&hw, 15, 9);
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let m_lo = t.max_prefill_allowed(100.0, ctx as f64, lo);
            let m_hi = t.max_prefill_allowed(100.0, ctx as f64, hi);
            prop_assert!(m_lo >= m_hi, "M({lo})={m_lo} < M({hi})={m_hi}");
        }
    }
}
