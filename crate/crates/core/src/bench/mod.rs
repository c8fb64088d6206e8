//! Incremental generation, the latency protocol, activation heatmaps and
//! the self-test suite.

pub mod generation;
pub mod heatmap;
pub mod latency;
pub mod selftest;

pub use generation::{generate, Generation, GenerationState, StopRule};
pub use heatmap::{activation_heatmaps, dump_activations, Heatmap};
pub use latency::{latency_bench, LatencyReport};
pub use selftest::{run_selftest, CheckOutcome};
