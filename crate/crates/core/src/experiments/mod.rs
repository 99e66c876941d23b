//! Evaluation, latency benchmarks, query-count sweeps and the
//! error-propagation study.

pub mod bench;
pub mod error_prop;
pub mod eval;
pub mod sweep;

pub use bench::{bench, BenchConfig, BenchReport, BenchRow};
pub use error_prop::{error_propagation, ErrorPropReport, ErrorPropRow};
pub use eval::{evaluate, predict, DecodeMethod, Metrics};
pub use sweep::{sweep_queries, SweepReport, SweepRow};
