use splitsim::config::*;
use splitsim::engine::PolicyConfig;
use splitsim::experiments::*;
use splitsim::HardwareProfile;

fn main() {
    let cfg = ExperimentConfig {
        seed: 42,
        hardware: HardwareProfile::default(),
        cluster: ClusterConfig { instances: 2 },
        policy: PolicyConfig::aps_default(),
        workload: WorkloadConfig::Synthetic {
            preset: Some("prefill_heavy".into()),
            shape: None,
            rate_qps: 1.5,
            duration_s: 120.0,
            seed: 1,
            predictor: Default::default(),
        },
        engine: Default::default(),
        metrics: Default::default(),
        capacity: Default::default(),
        sweep: Default::default(),
        output: Default::default(),
    };
    match run_experiment(&cfg, None) {
        Ok(a) => println!("ok attainment={:.4}", a.summary.attainment),
        Err(e) => println!("ERR: {e}"),
    }
}
