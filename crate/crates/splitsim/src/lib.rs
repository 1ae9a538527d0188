//! Discrete-event simulation library for SLO-aware scheduling of large
//! language model inference across unified GPU instances.
//!
//! Requests are split at arbitrary token boundaries into cooperating
//! micro-requests, balanced across an instance pair by a bounded binary
//! search over the split ratio, batched per instance under a
//! time-between-tokens SLO, and handed off through chunked KV-cache
//! transfers that overlap with computation. Colocation (fixed-chunk) and
//! strict prefill/decode disaggregation ship as baselines behind the same
//! interfaces, so scheduling policies can be compared on equal footing
//! against brute-force oracles at desk scale.

pub mod config;
pub mod costmodel;
pub mod domain;
pub mod engine;
pub mod experiments;
pub mod global_scheduler;
pub mod local_scheduler;
pub mod metrics;
pub mod predictor;
pub mod profile_table;
pub mod workload;

pub use config::ExperimentConfig;
pub use costmodel::{batch_latency, transfer_time, BatchShape, HardwareProfile};
pub use domain::{split_request, MicroRequest, Request, RequestId, RequestPlan, SplitPlan};
pub use engine::{run, EngineConfig, RunResult};
pub use profile_table::ProfileTable;
