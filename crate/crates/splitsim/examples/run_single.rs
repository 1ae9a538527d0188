//! Run one simulation end to end and print its summary.
//!
//!     cargo run --release --example run_single

use splitsim::config::{ClusterConfig, ExperimentConfig, WorkloadConfig};
use splitsim::engine::PolicyConfig;
use splitsim::experiments::run_experiment;
use splitsim::HardwareProfile;

fn main() {
    let cfg = ExperimentConfig {
        seed: 42,
        hardware: HardwareProfile::default(),
        cluster: ClusterConfig { instances: 2 },
        policy: PolicyConfig::aps_default(),
        workload: WorkloadConfig::Synthetic {
            preset: Some("balanced".into()),
            shape: None,
            rate_qps: 2.0,
            duration_s: 60.0,
            seed: 1,
            predictor: Default::default(),
        },
        engine: Default::default(),
        metrics: Default::default(),
        capacity: Default::default(),
        sweep: Default::default(),
        output: Default::default(),
    };
    let art = run_experiment(&cfg, None).expect("run");
    let s = &art.summary;
    println!(
        "{} on {}: {} requests, goodput {:.1} tok/s, attainment {:.4}, p99 TBT {:.1} ms",
        s.policy, s.workload, s.requests, s.goodput_tok_s, s.attainment, s.p99_tbt_ms
    );
    for i in &art.result.instances {
        println!(
            "  instance {}: busy {:.0} ms over {:.0} ms ({:.1}% wall, {:.1}% compute), {} batches, peak KV {} tokens",
            i.instance,
            i.busy_ms,
            art.result.makespan_ms,
            100.0 * i.utilization,
            100.0 * i.compute_utilization,
            i.batches,
            i.kv_peak_tokens
        );
    }
    println!(
        "  transfers: {} chunks, {} tokens, receiver wait {:.1} ms total",
        art.result.transfer.chunks_sent,
        art.result.transfer.tokens_sent,
        art.result.transfer.total_wait_ms
    );
    println!(
        "  scheduler: {:.1} probes/request, {:.1} us/decision",
        art.result.scheduler.mean_probes_per_request, art.result.scheduler.mean_decision_us
    );
}
