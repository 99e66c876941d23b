use std::collections::HashSet;

use crate::ctc::{TokenId, TokenSeq, Vocab};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::tasks::dataset::{Dataset, DatasetHeader, Sample};
use crate::tasks::spec::{TaskKind, TaskSpec};

/// Token layout of the grounding task.
///
/// Input ids: 0 unused, then labels, then one coordinate block of `grid`
/// values per label, then the query marker. Coordinates are written with
/// their record's block, so each coordinate token names its record. Output
/// ids: blank, then coordinate values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroundingLayout {
    pub n_labels: usize,
    pub grid: usize,
}

/// Box corners `[x1, y1, x2, y2]` on the coordinate grid.
pub type GridBox = [usize; 4];

impl GroundingLayout {
    pub fn label_token(&self, label: usize) -> TokenId {
        (1 + label) as TokenId
    }

    pub fn coord_token(&self, label: usize, v: usize) -> TokenId {
        (1 + self.n_labels + label * self.grid + v) as TokenId
    }

    pub fn query_marker(&self) -> TokenId {
        (1 + self.n_labels * (1 + self.grid)) as TokenId
    }

    pub fn input_vocab_size(&self) -> usize {
        self.n_labels * (1 + self.grid) + 2
    }

    pub fn output_token(&self, v: usize) -> TokenId {
        (1 + v) as TokenId
    }

    /// Grid value of an output token; `None` for blank or out-of-range ids.
    pub fn output_value(&self, t: TokenId) -> Option<usize> {
        let t = t as usize;
        (1..=self.grid).contains(&t).then(|| t - 1)
    }

    pub fn output_vocab_size(&self) -> usize {
        self.grid + 1
    }

    /// The sample asking for the box of `query` among `records`.
    pub fn sample(&self, records: &[(usize, GridBox)], query: usize) -> Sample {
        let mut input = Vec::with_capacity(records.len() * 5 + 2);
        let mut target = None;
        for &(label, b) in records {
            input.push(self.label_token(label));
            input.extend(b.iter().map(|&v| self.coord_token(label, v)));
            if label == query {
                target = Some(b.iter().map(|&v| self.output_token(v)).collect::<TokenSeq>());
            }
        }
        input.push(self.query_marker());
        input.push(self.label_token(query));
        let target = target.expect("query label is among the records");
        Sample {
            input,
            valid_refs: vec![target.clone()],
            target,
        }
    }
}

fn content(rng: &mut Rng, spec: &TaskSpec) -> TokenSeq {
    let len = rng.range_inclusive(spec.min_len, spec.max_len);
    let mut out: TokenSeq = Vec::with_capacity(len);
    while out.len() < len {
        let t = 1 + rng.below(spec.n_symbols) as TokenId;
        if spec.distinct_adjacent && out.last() == Some(&t) {
            continue;
        }
        out.push(t);
    }
    out
}

/// Jitter filler token in the output vocabulary.
pub fn jitter_filler(spec: &TaskSpec) -> TokenId {
    (spec.n_symbols + 1) as TokenId
}

/// `canonical` preceded by `jitter` filler tokens.
pub fn jitter_target(canonical: &[TokenId], jitter: usize, filler: TokenId) -> TokenSeq {
    let mut t = vec![filler; jitter];
    t.extend_from_slice(canonical);
    t
}

/// Up to `k` cyclic rotations of the sorted items.
pub fn multiref_orderings(items: &[TokenId], k: usize) -> Vec<TokenSeq> {
    let mut sorted = items.to_vec();
    sorted.sort_unstable();
    (0..k.min(sorted.len()))
        .map(|r| {
            let mut v = sorted.clone();
            v.rotate_left(r);
            v
        })
        .collect()
}

fn grounding_layout(spec: &TaskSpec) -> GroundingLayout {
    GroundingLayout {
        n_labels: spec.n_labels,
        grid: spec.grid,
    }
}

/// One sample and the key used to keep splits disjoint.
fn draw(spec: &TaskSpec, rng: &mut Rng) -> (Vec<TokenId>, Sample) {
    match spec.kind {
        TaskKind::Copy => {
            let seq = content(rng, spec);
            let s = Sample {
                input: seq.clone(),
                target: seq.clone(),
                valid_refs: vec![seq.clone()],
            };
            (seq, s)
        }
        TaskKind::Jitter => {
            let seq = content(rng, spec);
            let jitter = rng.below(spec.max_jitter + 1);
            let target = jitter_target(&seq, jitter, jitter_filler(spec));
            let s = Sample {
                input: seq.clone(),
                valid_refs: vec![target.clone()],
                target,
            };
            (seq, s)
        }
        TaskKind::Multiref => {
            let m = rng.range_inclusive(spec.min_len, spec.max_len);
            let mut pool: Vec<TokenId> = (1..=spec.n_symbols as TokenId).collect();
            rng.shuffle(&mut pool);
            let mut input = pool[..m].to_vec();
            rng.shuffle(&mut input);
            let refs = multiref_orderings(&input, spec.k_refs);
            let target = refs[rng.below(refs.len())].clone();
            let key = refs[0].clone();
            (
                key,
                Sample {
                    input,
                    target,
                    valid_refs: refs,
                },
            )
        }
        TaskKind::Grounding => {
            let layout = grounding_layout(spec);
            let n = rng.range_inclusive(spec.min_records, spec.max_records);
            let mut labels: Vec<usize> = (0..spec.n_labels).collect();
            rng.shuffle(&mut labels);
            let records: Vec<(usize, GridBox)> = labels[..n]
                .iter()
                .map(|&l| {
                    let x1 = rng.below(spec.grid);
                    let y1 = rng.below(spec.grid);
                    let x2 = rng.range_inclusive(x1, spec.grid - 1);
                    let y2 = rng.range_inclusive(y1, spec.grid - 1);
                    (l, [x1, y1, x2, y2])
                })
                .collect();
            let query = records[rng.below(n)].0;
            let mut key: Vec<TokenId> = {
                let mut sorted = records.clone();
                sorted.sort_unstable();
                sorted
                    .iter()
                    .flat_map(|(l, b)| std::iter::once(*l).chain(b.iter().copied()))
                    .map(|v| v as TokenId)
                    .collect()
            };
            key.push(query as TokenId);
            (key, layout.sample(&records, query))
        }
    }
}

fn header(spec: &TaskSpec) -> Result<DatasetHeader> {
    let (vin, vout, filler) = match spec.kind {
        TaskKind::Copy => (spec.n_symbols + 1, spec.n_symbols + 1, None),
        TaskKind::Jitter => (spec.n_symbols + 1, spec.n_symbols + 2, Some(jitter_filler(spec))),
        TaskKind::Multiref => (spec.n_symbols + 1, spec.n_symbols + 1, None),
        TaskKind::Grounding => {
            let l = grounding_layout(spec);
            (l.input_vocab_size(), l.output_vocab_size(), None)
        }
    };
    Ok(DatasetHeader {
        spec: spec.clone(),
        vocab_in: Vocab::new(vin)?,
        vocab_out: Vocab::new(vout)?,
        filler,
        resample_targets: spec.kind == TaskKind::Multiref,
        distilled: false,
    })
}

/// Generates train, val and test splits in that order from one seeded
/// stream. A sample whose key was already drawn is redrawn, so no input
/// appears in two splits.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let header = header(spec)?;
    let mut rng = Rng::new(spec.seed);
    let mut seen: HashSet<Vec<TokenId>> = HashSet::new();
    let total = spec.n_train + spec.n_val + spec.n_test;
    let budget = 50 * total + 1000;
    let mut attempts = 0;
    let mut samples = Vec::with_capacity(total);
    while samples.len() < total {
        attempts += 1;
        if attempts > budget {
            return Err(Error::usage(format!(
                "only {} distinct samples found after {budget} draws; enlarge the task space",
                samples.len()
            )));
        }
        let (key, sample) = draw(spec, &mut rng);
        if seen.insert(key) {
            samples.push(sample);
        }
    }
    let test = samples.split_off(spec.n_train + spec.n_val);
    let val = samples.split_off(spec.n_train);
    let ds = Dataset {
        header,
        train: samples,
        val,
        test,
    };
    ds.validate()?;
    ds.check_feasible(spec.n_queries)?;
    Ok(ds)
}
