use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctc::{min_path_length, TokenId, TokenSeq, Vocab};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::tasks::spec::TaskSpec;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub input: TokenSeq,
    pub target: TokenSeq,
    /// Every acceptable output; always contains `target`.
    pub valid_refs: Vec<TokenSeq>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::usage(format!("unknown split `{other}`"))),
        }
    }
}

/// Sidecar describing how a dataset was made and how to score it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub spec: TaskSpec,
    pub vocab_in: Vocab,
    pub vocab_out: Vocab,
    /// Output token ignored when scoring (jitter filler).
    #[serde(default)]
    pub filler: Option<TokenId>,
    /// Draw each epoch's training target uniformly from `valid_refs`.
    #[serde(default)]
    pub resample_targets: bool,
    /// Training targets were replaced by a teacher's outputs.
    #[serde(default)]
    pub distilled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    /// `seq` with scoring-neutral tokens removed.
    pub fn normalize(&self, seq: &[TokenId]) -> TokenSeq {
        match self.header.filler {
            Some(f) => seq.iter().copied().filter(|&t| t != f).collect(),
            None => seq.to_vec(),
        }
    }

    /// Whether `prediction` matches any reference after normalization.
    pub fn is_correct(&self, sample: &Sample, prediction: &[TokenId]) -> bool {
        let p = self.normalize(prediction);
        sample.valid_refs.iter().any(|r| self.normalize(r) == p)
    }

    /// The target used for one training step.
    pub fn training_target<'a>(&self, sample: &'a Sample, rng: &mut Rng) -> &'a TokenSeq {
        if self.header.resample_targets && sample.valid_refs.len() > 1 {
            &sample.valid_refs[rng.below(sample.valid_refs.len())]
        } else {
            &sample.target
        }
    }

    /// Longest target or reference.
    pub fn max_target_len(&self) -> usize {
        self.all_targets().map(|t| t.len()).max().unwrap_or(0)
    }

    pub fn max_input_len(&self) -> usize {
        Split::ALL
            .iter()
            .flat_map(|&s| self.split(s))
            .map(|x| x.input.len())
            .max()
            .unwrap_or(0)
    }

    /// Largest alignment length any target needs.
    pub fn max_min_path_length(&self) -> usize {
        self.all_targets().map(|t| min_path_length(t)).max().unwrap_or(0)
    }

    fn all_targets(&self) -> impl Iterator<Item = &TokenSeq> {
        Split::ALL.iter().flat_map(move |&s| {
            self.split(s)
                .iter()
                .flat_map(|x| std::iter::once(&x.target).chain(x.valid_refs.iter()))
        })
    }

    /// Typed error naming the first sample whose target or any reference
    /// needs more than `n_queries` alignment positions.
    pub fn check_feasible(&self, n_queries: usize) -> Result<()> {
        for split in Split::ALL {
            for (index, s) in self.split(split).iter().enumerate() {
                let need = std::iter::once(&s.target)
                    .chain(s.valid_refs.iter())
                    .map(|t| min_path_length(t))
                    .max()
                    .unwrap_or(0);
                if need > n_queries {
                    return Err(Error::InfeasibleSample {
                        split: split.name().into(),
                        index,
                        required: need,
                        available: n_queries,
                    });
                }
            }
        }
        Ok(())
    }

    /// Structural checks: vocab bounds, no blanks in targets, target among
    /// references.
    pub fn validate(&self) -> Result<()> {
        self.header.vocab_in.validate()?;
        self.header.vocab_out.validate()?;
        for split in Split::ALL {
            for (i, s) in self.split(split).iter().enumerate() {
                let bad = |m: &str| Error::usage(format!("{} sample {i}: {m}", split.name()));
                if s.input.is_empty() || !s.input.iter().all(|&t| self.header.vocab_in.contains(t)) {
                    return Err(bad("input empty or outside the input vocabulary"));
                }
                for r in std::iter::once(&s.target).chain(&s.valid_refs) {
                    self.header.vocab_out.check_target(r).map_err(|e| bad(&e.to_string()))?;
                }
                if !s.valid_refs.contains(&s.target) {
                    return Err(bad("target missing from valid_refs"));
                }
            }
        }
        Ok(())
    }

    /// Writes `header.json` and one JSONL file per split. Existing files are
    /// an error unless `force`.
    pub fn save(&self, dir: &Path, force: bool) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = dir.join("header.json");
        let files: Vec<_> = std::iter::once(header.clone())
            .chain(Split::ALL.iter().map(|s| dir.join(format!("{}.jsonl", s.name()))))
            .collect();
        if !force {
            if let Some(existing) = files.iter().find(|p| p.exists()) {
                return Err(Error::usage(format!(
                    "{} already exists; pass --force to overwrite",
                    existing.display()
                )));
            }
        }
        let text = serde_json::to_string_pretty(&self.header).expect("header serializes") + "\n";
        fs::write(&header, text).map_err(|e| Error::io(&header, e))?;
        for split in Split::ALL {
            let path = dir.join(format!("{}.jsonl", split.name()));
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for s in self.split(split) {
                let line = serde_json::to_string(s).expect("sample serializes");
                writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header_path = dir.join("header.json");
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: DatasetHeader =
            serde_json::from_str(&text).map_err(|e| Error::format(&header_path, e))?;
        let mut ds = Dataset {
            header,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for split in Split::ALL {
            let path = dir.join(format!("{}.jsonl", split.name()));
            let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let out = ds.split_mut(split);
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let s: Sample = serde_json::from_str(&line)
                    .map_err(|e| Error::format(&path, format!("line {}: {e}", n + 1)))?;
                out.push(s);
            }
        }
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::spec::TaskKind;

    fn tiny() -> Dataset {
        let mut spec = TaskSpec::new(TaskKind::Copy, 1);
        spec.n_queries = 3;
        let s = |i: Vec<u32>, t: Vec<u32>| Sample {
            input: i,
            target: t.clone(),
            valid_refs: vec![t],
        };
        Dataset {
            header: DatasetHeader {
                spec,
                vocab_in: Vocab::new(4).unwrap(),
                vocab_out: Vocab::new(4).unwrap(),
                filler: None,
                resample_targets: false,
                distilled: false,
            },
            train: vec![s(vec![1, 2], vec![1, 2]), s(vec![3, 3], vec![3, 3])],
            val: vec![s(vec![2], vec![2])],
            test: vec![s(vec![3, 1, 1], vec![3, 1, 1])],
        }
    }

    #[test]
    fn save_load_round_trip_and_refuse_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        ds.save(dir.path(), false).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        assert!(matches!(ds.save(dir.path(), false), Err(Error::Usage(_))));
        ds.save(dir.path(), true).unwrap();
        let lines = fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 2);
    }

    #[test]
    fn feasibility_names_first_offender() {
        let ds = tiny();
        ds.check_feasible(4).unwrap();
        match ds.check_feasible(3) {
            Err(Error::InfeasibleSample { split, index, required, available }) => {
                assert_eq!((split.as_str(), index, required, available), ("test", 0, 4, 3));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn filler_is_ignored_when_scoring() {
        let mut ds = tiny();
        ds.header.filler = Some(3);
        let s = Sample {
            input: vec![1],
            target: vec![3, 1],
            valid_refs: vec![vec![3, 1]],
        };
        assert!(ds.is_correct(&s, &[1]));
        assert!(ds.is_correct(&s, &[3, 3, 1]));
        assert!(!ds.is_correct(&s, &[1, 1]));
    }

    #[test]
    fn malformed_lines_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path(), false).unwrap();
        fs::write(dir.path().join("val.jsonl"), "{\"input\": [1]\n").unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Format { .. })));
    }
}
