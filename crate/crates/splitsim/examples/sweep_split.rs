//! Throughput as a function of the forced split position for a fixed
//! request shape on a two-instance cluster. The prompt boundary reproduces
//! strict disaggregation; the peak typically sits past it, where part of
//! the decode work migrates to the first instance.
//!
//!     cargo run --release --example sweep_split

use splitsim::config::{ClusterConfig, ExperimentConfig, SweepSection, WorkloadConfig};
use splitsim::engine::PolicyConfig;
use splitsim::experiments::sweep_split;
use splitsim::HardwareProfile;

fn main() {
    let cfg = ExperimentConfig {
        seed: 42,
        hardware: HardwareProfile::default(),
        cluster: ClusterConfig { instances: 2 },
        policy: PolicyConfig::aps_default(),
        workload: WorkloadConfig::Synthetic {
            preset: None,
            shape: Some(splitsim::workload::ShapeSpec::Fixed {
                prompt: 1024,
                decode: 1024,
            }),
            rate_qps: 12.0,
            duration_s: 90.0,
            seed: 5,
            predictor: splitsim::workload::LengthPredictor {
                mode: splitsim::workload::PredictorMode::Oracle,
                sigma_tokens: 0.0,
                margin_tokens: 0,
            },
        },
        engine: Default::default(),
        metrics: Default::default(),
        capacity: Default::default(),
        sweep: SweepSection { points: 17 },
        output: Default::default(),
    };
    let curve = sweep_split(&cfg, None).expect("sweep");
    println!("split_point  throughput(tok/s)  attainment");
    let mut best = &curve[0];
    for p in &curve {
        println!(
            "{:>11}  {:>17.1}  {:>10.4}",
            p.split_point, p.throughput_tok_s, p.attainment
        );
        if p.throughput_tok_s > best.throughput_tok_s {
            best = p;
        }
    }
    let at_prompt = curve
        .iter()
        .min_by_key(|p| p.split_point.abs_diff(1024))
        .unwrap();
    println!(
        "\nbest split at {} ({:.1} tok/s); prompt-boundary split gives {:.1} tok/s ({:+.1}%)",
        best.split_point,
        best.throughput_tok_s,
        at_prompt.throughput_tok_s,
        100.0 * (best.throughput_tok_s / at_prompt.throughput_tok_s - 1.0)
    );
}
