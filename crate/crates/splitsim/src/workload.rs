//! Request stream construction: Poisson synthetic generators over named
//! shape presets, CSV trace replay, and the decode-length predictor with a
//! configurable error model and safety margin.
//!
//! Generation is a pure pre-pass over an explicitly seeded PRNG (ChaCha8),
//! so streams are reproducible across platforms. Actual decode lengths stay
//! hidden from schedulers; only the predicted length reaches planning code.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Request, RequestId};

/// Distribution of one request's (prompt, decode) lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeSpec {
    /// Fixed lengths for every request.
    Fixed { prompt: u64, decode: u64 },
    /// Independent lognormal draws around the given medians.
    LogNormal {
        prompt_median: u64,
        prompt_sigma: f64,
        decode_median: u64,
        decode_sigma: f64,
        #[serde(default = "default_len_cap")]
        max_len: u64,
    },
    /// Weighted mixture of shapes.
    Mix { parts: Vec<(f64, ShapeSpec)> },
}

fn default_len_cap() -> u64 {
    32768
}

/// Named workload presets.
pub fn preset(name: &str) -> Option<ShapeSpec> {
    match name {
        // long prompt, short output
        "prefill_heavy" => Some(ShapeSpec::Fixed {
            prompt: 8192,
            decode: 32,
        }),
        // balanced input/output
        "balanced" => Some(ShapeSpec::Fixed {
            prompt: 2048,
            decode: 512,
        }),
        // short prompt, long output
        "reasoning" => Some(ShapeSpec::Fixed {
            prompt: 219,
            decode: 1467,
        }),
        // even mix of the balanced and prefill-heavy shapes
        "hybrid" => Some(ShapeSpec::Mix {
            parts: vec![
                (0.5, preset("balanced").unwrap()),
                (0.5, preset("prefill_heavy").unwrap()),
            ],
        }),
        _ => None,
    }
}

pub fn preset_names() -> &'static [&'static str] {
    &["prefill_heavy", "balanced", "reasoning", "hybrid"]
}

/// Decode-length prediction error model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LengthPredictor {
    /// "oracle" predicts the true length; "noisy" adds normal error.
    pub mode: PredictorMode,
    /// Standard deviation of the additive error, in tokens.
    pub sigma_tokens: f64,
    /// Safety margin added after prediction, in tokens.
    pub margin_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorMode {
    Oracle,
    Noisy,
}

impl Default for LengthPredictor {
    fn default() -> Self {
        Self {
            mode: PredictorMode::Oracle,
            sigma_tokens: 0.0,
            margin_tokens: 20,
        }
    }
}

impl LengthPredictor {
    /// Predicted decode length for a request whose true length is `actual`.
    pub fn predict<R: Rng>(&self, actual: u64, rng: &mut R) -> u64 {
        let raw = match self.mode {
            PredictorMode::Oracle => actual as f64,
            PredictorMode::Noisy => {
                if self.sigma_tokens <= 0.0 {
                    actual as f64
                } else {
                    let n = Normal::new(0.0, self.sigma_tokens).expect("valid normal");
                    actual as f64 + n.sample(rng)
                }
            }
        };
        (raw.round().max(1.0) as u64) + self.margin_tokens
    }
}

/// Full synthetic-workload description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Named preset, or inline shape below.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub shape: Option<ShapeSpec>,
    pub rate_qps: f64,
    pub duration_s: f64,
    pub seed: u64,
    #[serde(default)]
    pub predictor: LengthPredictor,
    #[serde(default = "default_slo")]
    pub slo_tbt_ms: f64,
}

fn default_slo() -> f64 {
    100.0
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("workload spec needs either a preset name or an inline shape")]
    NoShape,
    #[error("unknown preset {0:?}; known: {1}")]
    UnknownPreset(String, String),
    #[error("rate_qps must be positive, got {0}")]
    BadRate(f64),
    #[error("mixture weights must be positive and sum to 1, got {0}")]
    BadWeights(f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace row {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error("trace not sorted by arrival at line {0}")]
    Unsorted(usize),
}

fn draw_shape<R: Rng>(shape: &ShapeSpec, rng: &mut R) -> (u64, u64) {
    match shape {
        ShapeSpec::Fixed { prompt, decode } => (*prompt, *decode),
        ShapeSpec::LogNormal {
            prompt_median,
            prompt_sigma,
            decode_median,
            decode_sigma,
            max_len,
        } => {
            let p_dist = LogNormal::new((*prompt_median as f64).ln(), *prompt_sigma)
                .expect("valid lognormal");
            let d_dist = LogNormal::new((*decode_median as f64).ln(), *decode_sigma)
                .expect("valid lognormal");
            let p = (p_dist.sample(rng).round() as u64).clamp(1, *max_len);
            let d = (d_dist.sample(rng).round() as u64).clamp(1, *max_len);
            (p, d)
        }
        ShapeSpec::Mix { parts } => {
            let total: f64 = parts.iter().map(|(w, _)| w).sum();
            let mut pick = rng.gen_range(0.0..total);
            for (w, s) in parts {
                if pick < *w {
                    return draw_shape(s, rng);
                }
                pick -= w;
            }
            draw_shape(&parts.last().expect("non-empty mix").1, rng)
        }
    }
}

fn validate_shape(shape: &ShapeSpec) -> Result<(), WorkloadError> {
    if let ShapeSpec::Mix { parts } = shape {
        let total: f64 = parts.iter().map(|(w, _)| w).sum();
        if parts.iter().any(|(w, _)| *w <= 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(WorkloadError::BadWeights(total));
        }
        for (_, s) in parts {
            validate_shape(s)?;
        }
    }
    Ok(())
}

impl WorkloadSpec {
    pub fn synthetic(preset_name: &str, rate_qps: f64, duration_s: f64, seed: u64) -> Self {
        Self {
            preset: Some(preset_name.to_string()),
            shape: None,
            rate_qps,
            duration_s,
            seed,
            predictor: LengthPredictor::default(),
            slo_tbt_ms: default_slo(),
        }
    }

    fn resolve_shape(&self) -> Result<ShapeSpec, WorkloadError> {
        if let Some(s) = &self.shape {
            validate_shape(s)?;
            return Ok(s.clone());
        }
        match &self.preset {
            Some(name) => preset(name).ok_or_else(|| {
                WorkloadError::UnknownPreset(name.clone(), preset_names().join(", "))
            }),
            None => Err(WorkloadError::NoShape),
        }
    }
}

/// Generate a Poisson arrival stream under the spec.
pub fn generate(spec: &WorkloadSpec) -> Result<Vec<Request>, WorkloadError> {
    if spec.rate_qps <= 0.0 {
        return Err(WorkloadError::BadRate(spec.rate_qps));
    }
    let shape = spec.resolve_shape()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let horizon_ms = spec.duration_s * 1000.0;
    let mean_gap_ms = 1000.0 / spec.rate_qps;
    let mut requests = Vec::new();
    let mut t = 0.0f64;
    let mut id = 0u64;
    loop {
        // exponential inter-arrival via inverse transform
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        t += -mean_gap_ms * u.ln();
        if t > horizon_ms {
            break;
        }
        let (p, d) = draw_shape(&shape, &mut rng);
        let predicted = spec.predictor.predict(d, &mut rng);
        requests.push(Request::new(RequestId(id), t, p, d, predicted, spec.slo_tbt_ms));
        id += 1;
    }
    Ok(requests)
}

/// Load a request stream from CSV: `arrival_ms,prompt_tokens,output_tokens`,
/// rows sorted by arrival. Predictions are applied on load, as they would be
/// at the serving front end.
pub fn load_trace(
    path: &Path,
    predictor: &LengthPredictor,
    slo_tbt_ms: f64,
    seed: u64,
    time_scale: f64,
) -> Result<Vec<Request>, WorkloadError> {
    let file = std::fs::File::open(path)?;
    load_trace_reader(std::io::BufReader::new(file), predictor, slo_tbt_ms, seed, time_scale)
}

pub fn load_trace_reader<R: BufRead>(
    reader: R,
    predictor: &LengthPredictor,
    slo_tbt_ms: f64,
    seed: u64,
    time_scale: f64,
) -> Result<Vec<Request>, WorkloadError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut requests: Vec<Request> = Vec::new();
    let mut last_arrival = f64::NEG_INFINITY;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if i == 0 {
            let want = "arrival_ms,prompt_tokens,output_tokens";
            if line.trim() != want {
                return Err(WorkloadError::BadRow {
                    line: lineno,
                    reason: format!("expected header {want:?}, got {:?}", line.trim()),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(WorkloadError::BadRow {
                line: lineno,
                reason: format!("expected 3 fields, got {}", parts.len()),
            });
        }
        let arrival: f64 = parts[0].trim().parse().map_err(|e| WorkloadError::BadRow {
            line: lineno,
            reason: format!("arrival_ms: {e}"),
        })?;
        let parse_tokens = |s: &str, what: &str| -> Result<u64, WorkloadError> {
            let v: i64 = s.trim().parse().map_err(|e| WorkloadError::BadRow {
                line: lineno,
                reason: format!("{what}: {e}"),
            })?;
            if v < 1 {
                return Err(WorkloadError::BadRow {
                    line: lineno,
                    reason: format!("{what} must be >= 1, got {v}"),
                });
            }
            Ok(v as u64)
        };
        let p = parse_tokens(parts[1], "prompt_tokens")?;
        let d = parse_tokens(parts[2], "output_tokens")?;
        if arrival < last_arrival {
            return Err(WorkloadError::Unsorted(lineno));
        }
        last_arrival = arrival;
        let predicted = predictor.predict(d, &mut rng);
        requests.push(Request::new(
            RequestId(requests.len() as u64),
            arrival * time_scale,
            p,
            d,
            predicted,
            slo_tbt_ms,
        ));
    }
    Ok(requests)
}

/// Write a stream in the trace CSV schema.
pub fn dump_trace<W: Write>(requests: &[Request], mut w: W) -> std::io::Result<()> {
    writeln!(w, "arrival_ms,prompt_tokens,output_tokens")?;
    for r in requests {
        writeln!(w, "{},{},{}", r.arrival_ms, r.prompt_len, r.actual_decode())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(preset: &str, rate: f64, dur: f64) -> WorkloadSpec {
        WorkloadSpec::synthetic(preset, rate, dur, 42)
    }

    #[test]
    fn presets_have_the_documented_shapes() {
        let s = generate(&spec("prefill_heavy", 1.0, 10.0)).unwrap();
        assert!(s.iter().all(|r| r.prompt_len == 8192 && r.actual_decode() == 32));
        let s = generate(&spec("reasoning", 1.0, 10.0)).unwrap();
        assert!(s.iter().all(|r| r.prompt_len == 219 && r.actual_decode() == 1467));
        let s = generate(&spec("balanced", 1.0, 10.0)).unwrap();
        assert!(s.iter().all(|r| r.prompt_len == 2048 && r.actual_decode() == 512));
    }

    #[test]
    fn hybrid_mixes_both_shapes() {
        let s = generate(&spec("hybrid", 20.0, 60.0)).unwrap();
        let heavy = s.iter().filter(|r| r.prompt_len == 8192).count();
        let balanced = s.iter().filter(|r| r.prompt_len == 2048).count();
        assert_eq!(heavy + balanced, s.len());
        let frac = heavy as f64 / s.len() as f64;
        assert!((0.4..=0.6).contains(&frac), "mix fraction {frac}");
    }

    #[test]
    fn poisson_mean_gap_close_to_rate() {
        let mut all_gaps = Vec::new();
        let reqs = generate(&WorkloadSpec::synthetic("balanced", 10.0, 1000.0, 42)).unwrap();
        let mut last = 0.0;
        for r in &reqs {
            all_gaps.push(r.arrival_ms - last);
            last = r.arrival_ms;
        }
        assert!(all_gaps.len() > 9000);
        let mean: f64 = all_gaps.iter().sum::<f64>() / all_gaps.len() as f64;
        // 2% tolerance around 100 ms at this fixed seed
        assert_relative_eq!(mean, 100.0, max_relative = 0.02);
    }

    #[test]
    fn generation_is_deterministic_under_seed() {
        let a = generate(&spec("hybrid", 5.0, 30.0)).unwrap();
        let b = generate(&spec("hybrid", 5.0, 30.0)).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.arrival_ms, y.arrival_ms);
            assert_eq!(x.prompt_len, y.prompt_len);
            assert_eq!(x.actual_decode(), y.actual_decode());
            assert_eq!(x.predicted_decode, y.predicted_decode);
        }
    }

    #[test]
    fn oracle_prediction_adds_margin() {
        let p = LengthPredictor {
            mode: PredictorMode::Oracle,
            sigma_tokens: 0.0,
            margin_tokens: 20,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(p.predict(1467, &mut rng), 1487);
        let exact = LengthPredictor {
            mode: PredictorMode::Oracle,
            sigma_tokens: 0.0,
            margin_tokens: 0,
        };
        assert_eq!(exact.predict(333, &mut rng), 333);
    }

    #[test]
    fn noisy_prediction_error_distribution() {
        let p = LengthPredictor {
            mode: PredictorMode::Noisy,
            sigma_tokens: 100.0,
            margin_tokens: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let within = (0..n)
            .filter(|_| {
                let pred = p.predict(1467, &mut rng) as i64;
                (pred - 1467).abs() <= 200
            })
            .count();
        let frac = within as f64 / n as f64;
        // ~95% of draws fall within +/- 2 sigma
        assert!((0.93..=0.97).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn margin_never_decreases_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for margin in [0u64, 5, 20, 100] {
            let lo = LengthPredictor {
                mode: PredictorMode::Noisy,
                sigma_tokens: 50.0,
                margin_tokens: margin,
            };
            let hi = LengthPredictor {
                margin_tokens: margin + 10,
                ..lo
            };
            for actual in [1u64, 32, 512, 1467] {
                let mut r1 = rng.clone();
                let mut r2 = rng.clone();
                assert!(hi.predict(actual, &mut r2) >= lo.predict(actual, &mut r1));
                let _ = rng.gen::<u64>();
            }
        }
    }

    #[test]
    fn trace_round_trip_is_exact() {
        let reqs = generate(&spec("hybrid", 5.0, 20.0)).unwrap();
        let mut buf = Vec::new();
        dump_trace(&reqs, &mut buf).unwrap();
        let pred = LengthPredictor {
            mode: PredictorMode::Oracle,
            sigma_tokens: 0.0,
            margin_tokens: 20,
        };
        let loaded = load_trace_reader(&buf[..], &pred, 100.0, 0, 1.0).unwrap();
        assert_eq!(loaded.len(), reqs.len());
        for (a, b) in reqs.iter().zip(&loaded) {
            assert_eq!(a.arrival_ms, b.arrival_ms);
            assert_eq!(a.prompt_len, b.prompt_len);
            assert_eq!(a.actual_decode(), b.actual_decode());
        }
    }

    #[test]
    fn malformed_rows_name_the_line() {
        let pred = LengthPredictor::default();
        let data = "arrival_ms,prompt_tokens,output_tokens\n0.0,100,10\n5.0,abc,10\n";
        match load_trace_reader(data.as_bytes(), &pred, 100.0, 0, 1.0) {
            Err(WorkloadError::BadRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected BadRow, got {other:?}"),
        }
        let neg = "arrival_ms,prompt_tokens,output_tokens\n0.0,100,-5\n";
        assert!(matches!(
            load_trace_reader(neg.as_bytes(), &pred, 100.0, 0, 1.0),
            Err(WorkloadError::BadRow { line: 2, .. })
        ));
        let unsorted = "arrival_ms,prompt_tokens,output_tokens\n10.0,100,5\n3.0,100,5\n";
        assert!(matches!(
            load_trace_reader(unsorted.as_bytes(), &pred, 100.0, 0, 1.0),
            Err(WorkloadError::Unsorted(3))
        ));
    }

    #[test]
    fn unknown_preset_is_explicit() {
        assert!(matches!(
            generate(&spec("nope", 1.0, 1.0)),
            Err(WorkloadError::UnknownPreset(..))
        ));
    }
}
