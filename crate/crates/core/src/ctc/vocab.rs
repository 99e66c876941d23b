use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Sequence of token ids: a target, a collapsed output, or a model input.
pub type TokenSeq = Vec<TokenId>;

/// Length-N uncollapsed sequence (blanks allowed), one token per query position.
pub type AlignmentPath = Vec<TokenId>;

/// The blank id used by every vocabulary built here.
pub const BLANK: TokenId = 0;

/// Token inventory with a reserved blank at id 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    blank_id: TokenId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
}

impl Vocab {
    /// `size` includes the blank.
    pub fn new(size: usize) -> Result<Self> {
        let v = Vocab {
            size,
            blank_id: BLANK,
            names: None,
        };
        v.validate()?;
        Ok(v)
    }

    /// Names are indexed by token id; `names[0]` labels the blank.
    pub fn with_names(names: Vec<String>) -> Result<Self> {
        let v = Vocab {
            size: names.len(),
            blank_id: BLANK,
            names: Some(names),
        };
        v.validate()?;
        Ok(v)
    }

    /// Checks the invariants; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::usage("a vocabulary needs at least the blank and one token"));
        }
        if self.blank_id != BLANK {
            return Err(Error::usage("the blank token must have id 0"));
        }
        if let Some(names) = &self.names {
            if names.len() != self.size {
                return Err(Error::usage("vocabulary names do not match its size"));
            }
            let unique: HashSet<&String> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(Error::usage("vocabulary names must be unique"));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn blank_id(&self) -> TokenId {
        self.blank_id
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.size
    }

    /// Human-readable label, falling back to the numeric id.
    pub fn name(&self, id: TokenId) -> String {
        match &self.names {
            Some(n) if (id as usize) < n.len() => n[id as usize].clone(),
            _ if id == self.blank_id => "-".to_string(),
            _ => id.to_string(),
        }
    }

    /// Validates a target: in range and blank-free.
    pub fn check_target(&self, target: &[TokenId]) -> Result<()> {
        for &t in target {
            if !self.contains(t) {
                return Err(Error::usage(format!(
                    "token {t} is outside a vocabulary of size {}",
                    self.size
                )));
            }
            if t == self.blank_id {
                return Err(Error::usage("targets must not contain the blank token"));
            }
        }
        Ok(())
    }
}
