pub mod catalog;
mod concurrency;
pub mod config;
pub mod fusion;
pub mod instructions;
pub mod jsonl;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod recommender;
pub mod store;
pub mod stub;
pub mod synth;

/// 2023-05-09T00:00:00Z, the test-split day.
pub const DEFAULT_CUTOFF_TIMESTAMP: i64 = 1_683_590_400;
