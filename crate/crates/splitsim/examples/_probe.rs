use splitsim::config::*;
use splitsim::engine::{self, PolicyConfig, TransferMode};
use splitsim::experiments::*;
use splitsim::global_scheduler::{ForcedPhi, Orientation};
use splitsim::metrics::*;
use splitsim::workload::*;
use splitsim::HardwareProfile;

fn base(preset: &str, qps: f64, dur: f64) -> ExperimentConfig {
    ExperimentConfig {
        seed: 42,
        hardware: HardwareProfile::default(),
        cluster: ClusterConfig { instances: 2 },
        policy: PolicyConfig::aps_default(),
        workload: WorkloadConfig::Synthetic {
            preset: Some(preset.into()),
            shape: None,
            rate_qps: qps,
            duration_s: dur,
            seed: 1,
            predictor: Default::default(),
        },
        engine: Default::default(),
        metrics: Default::default(),
        capacity: Default::default(),
        sweep: Default::default(),
        output: Default::default(),
    }
}

fn main() {
    let t0 = std::time::Instant::now();
    // ---- A4 probe: prefill-heavy stress, aps vs chunked-2048
    let mut cfg = base("prefill_heavy", 1.5, 120.0);
    cfg.policy = PolicyConfig::Chunked { chunk_size: 2048 };
    let ab = ablate_batching(&cfg, None).unwrap();
    println!("A4: aps attainment={:.4} chunked attainment={:.4} (t={:?})", ab.adaptive_attainment, ab.fixed_attainment, t0.elapsed());

    // ---- A5 probe: decode-merged forced split, chunked vs whole transfer
    let mut cfg = base("balanced", 1.0, 120.0);
    cfg.policy = PolicyConfig::aps_forced(ForcedPhi::Ratio(0.95), Orientation::Fixed);
    let tr = ablate_transfer(&cfg, None).unwrap();
    println!("A5: chunked wait={:.1} whole wait={:.1} reduction={:.3} (t={:?})", tr.chunked_wait_ms, tr.whole_wait_ms, tr.wait_reduction, t0.elapsed());

    // ---- A8 probe: reasoning preset goodput at sigma 0 vs 100
    for sigma in [0.0, 100.0] {
        let mut cfg = base("reasoning", 3.0, 120.0);
        if let WorkloadConfig::Synthetic { predictor, .. } = &mut cfg.workload {
            *predictor = LengthPredictor { mode: if sigma > 0.0 { PredictorMode::Noisy } else { PredictorMode::Oracle }, sigma_tokens: sigma, margin_tokens: 20 };
        }
        let art = run_experiment(&cfg, None).unwrap();
        println!("A8 sigma={}: goodput={:.1} attainment={:.4} (t={:?})", sigma, art.summary.goodput_tok_s, art.summary.attainment, t0.elapsed());
    }

    // ---- A7 probe: capacity per policy on hybrid + reasoning
    for preset in ["hybrid", "reasoning"] {
        let mut cfg = base(preset, 1.0, 60.0);
        cfg.capacity = CapacitySection { lo_qps: 0.25, hi_qps: 16.0, resolution_qps: 0.25, target_attainment: 0.99, probe_duration_s: 60.0, probe_seeds: 3 };
        cfg.policy = PolicyConfig::Chunked { chunk_size: 2048 };
        for policy in capacity_policy_set(&cfg) {
            let t1 = std::time::Instant::now();
            let (_, row) = capacity_of_policy(&cfg, &policy).unwrap();
            println!("A7 {preset} {}: capacity={:.2} qps probes={} ({:?})", row.policy, row.capacity_qps, row.probes, t1.elapsed());
        }
    }
    println!("total {:?}", t0.elapsed());
}
