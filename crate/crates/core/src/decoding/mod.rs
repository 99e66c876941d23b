//! Sequence extraction from logit grids and autoregressive models.

pub mod ar;
pub mod nar;

use serde::{Deserialize, Serialize};

use crate::ctc::{AlignmentPath, TokenSeq};
use crate::error::{Error, Result};
use crate::numerics::LogProb;

pub use ar::{ar_beam, ar_greedy, ar_greedy_fixed_length};
pub use nar::{nar_greedy, nar_greedy_positional, nar_prefix_beam};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    /// Output length limit for autoregressive decoding.
    pub max_len: usize,
}

impl BeamConfig {
    pub fn new(width: usize) -> Self {
        BeamConfig {
            width,
            max_len: usize::MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::usage("beam width must be at least 1"));
        }
        Ok(())
    }
}

/// How a greedy parallel decode turns its argmax path into a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NarReading {
    /// Merge repeats, then drop blanks.
    Collapse,
    /// Drop blanks only; position i carries token i.
    Positional,
}

impl NarReading {
    pub fn for_objective(objective: crate::model::StudentObjective) -> Self {
        match objective {
            crate::model::StudentObjective::Qctc => NarReading::Collapse,
            crate::model::StudentObjective::Ce => NarReading::Positional,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub sequence: TokenSeq,
    pub score: LogProb,
    pub raw_path: Option<AlignmentPath>,
    /// Decoder forward passes spent on this sequence.
    pub passes: usize,
}
