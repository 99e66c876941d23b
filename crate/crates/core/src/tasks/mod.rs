//! Seeded synthetic datasets: copy, grounding, jitter and multi-reference.

pub mod dataset;
pub mod generate;
pub mod spec;

pub use dataset::{Dataset, DatasetHeader, Sample, Split};
pub use generate::{
    generate, jitter_filler, jitter_target, multiref_orderings, GridBox, GroundingLayout,
};
pub use spec::{TaskKind, TaskSpec};
