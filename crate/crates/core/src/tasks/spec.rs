use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Output equals input.
    Copy,
    /// Look up a labelled box among several records; emit its 4 coordinates.
    Grounding,
    /// Copy with 0..=max_jitter filler tokens prepended to the target.
    Jitter,
    /// Describe an unordered set; any of several orderings is correct.
    Multiref,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "grounding" => Ok(TaskKind::Grounding),
            "jitter" => Ok(TaskKind::Jitter),
            "multiref" => Ok(TaskKind::Multiref),
            other => Err(Error::usage(format!(
                "unknown task `{other}` (expected copy, grounding, jitter or multiref)"
            ))),
        }
    }
}

/// Everything that determines a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Content length range (copy, jitter, multiref).
    pub min_len: usize,
    pub max_len: usize,
    /// Number of content symbols (copy, jitter, multiref).
    pub n_symbols: usize,
    /// Query count every target must be alignable to.
    pub n_queries: usize,
    /// No two adjacent content tokens are equal (copy, jitter).
    #[serde(default)]
    pub distinct_adjacent: bool,
    /// Coordinate grid size (grounding).
    pub grid: usize,
    /// Distinct record labels (grounding).
    pub n_labels: usize,
    pub min_records: usize,
    pub max_records: usize,
    /// Largest number of filler tokens (jitter).
    pub max_jitter: usize,
    /// Orderings per input (multiref).
    pub k_refs: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        let mut s = TaskSpec {
            kind,
            seed,
            n_train: 2000,
            n_val: 200,
            n_test: 200,
            min_len: 2,
            max_len: 8,
            n_symbols: 10,
            n_queries: 16,
            distinct_adjacent: false,
            grid: 16,
            n_labels: 8,
            min_records: 2,
            max_records: 3,
            max_jitter: 2,
            k_refs: 4,
        };
        match kind {
            TaskKind::Copy => {}
            TaskKind::Grounding => {
                s.min_len = 4;
                s.max_len = 4;
                s.n_queries = 8;
            }
            TaskKind::Jitter => {
                s.max_len = 6;
            }
            TaskKind::Multiref => {
                s.min_len = 3;
                s.max_len = 5;
                s.n_symbols = 16;
                s.n_queries = 10;
            }
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::usage(m));
        if self.n_train == 0 {
            return fail("n_train must be positive".into());
        }
        if self.n_queries == 0 {
            return fail("n_queries must be positive".into());
        }
        match self.kind {
            TaskKind::Copy | TaskKind::Jitter | TaskKind::Multiref => {
                if self.min_len == 0 || self.min_len > self.max_len || self.max_len > 12 {
                    return fail(format!(
                        "length range [{}, {}] must lie within [1, 12]",
                        self.min_len, self.max_len
                    ));
                }
                if self.n_symbols < 2 {
                    return fail("n_symbols must be at least 2".into());
                }
            }
            TaskKind::Grounding => {
                if self.grid < 2 {
                    return fail("grid must be at least 2".into());
                }
                if self.min_records == 0 || self.min_records > self.max_records {
                    return fail("record range must be non-empty and start at 1 or more".into());
                }
                if self.n_labels < self.max_records {
                    return fail("n_labels must cover max_records distinct labels".into());
                }
            }
        }
        if self.kind == TaskKind::Jitter && self.max_jitter > 2 {
            return fail(format!("max_jitter {} outside [0, 2]", self.max_jitter));
        }
        if self.kind == TaskKind::Multiref {
            if !(2..=6).contains(&self.k_refs) {
                return fail(format!("k_refs {} outside [2, 6]", self.k_refs));
            }
            if self.min_len < 2 {
                return fail("multiref sets need at least 2 items to have several orderings".into());
            }
            if self.max_len > self.n_symbols {
                return fail("multiref sets cannot be larger than n_symbols".into());
            }
        }
        Ok(())
    }
}
