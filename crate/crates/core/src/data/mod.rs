//! Datasets, few-shot sampling, unlabeled pools, transforms and metrics.

mod metrics;
pub mod toy;

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, PetError, Result};
use crate::pvp::{Example, LabelId, TaskSpec};
use crate::rng::{shuffle, substream};

pub use metrics::{evaluate, MetricReport, Prediction};

/// Meta key that groups rows into questions.
pub const GROUP_KEY: &str = "group";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: String,
    pub split: String,
    pub examples: Vec<Example>,
}

/// On-disk form of an [`Example`], with labels as names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Record {
    id: String,
    fields: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    candidates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(
        task: impl Into<String>,
        split: impl Into<String>,
        examples: Vec<Example>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for x in &examples {
            if !seen.insert(x.id.as_str()) {
                return Err(PetError::DuplicateId(x.id.clone()));
            }
        }
        Ok(Self {
            task: task.into(),
            split: split.into(),
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.examples.iter().map(|x| x.id.as_str()).collect()
    }

    pub fn validate(&self, spec: &TaskSpec) -> Result<()> {
        for x in &self.examples {
            x.validate(spec.num_labels())?;
        }
        Ok(())
    }

    /// Per-label example counts (unlabeled examples are not counted).
    pub fn label_counts(&self, num_labels: usize) -> Vec<usize> {
        let mut counts = vec![0; num_labels];
        for y in self.examples.iter().filter_map(|x| x.label) {
            counts[y] += 1;
        }
        counts
    }

    pub fn to_jsonl(&self, spec: &TaskSpec) -> Result<String> {
        let mut out = String::new();
        for x in &self.examples {
            let rec = Record {
                id: x.id.clone(),
                fields: x.fields.clone(),
                label: x.label.map(|y| spec.label_name(y).to_string()),
                candidates: x
                    .candidates
                    .as_ref()
                    .map(|c| c.iter().map(|&y| spec.label_name(y).to_string()).collect()),
                meta: x.meta.clone(),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, spec: &TaskSpec, split: &str) -> Result<Self> {
        let mut examples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| PetError::Parse {
                location: format!("line {}", i + 1),
                message: e.to_string(),
            })?;
            let label = rec.label.as_deref().map(|l| spec.label_id(l)).transpose()?;
            let candidates = rec
                .candidates
                .map(|c| {
                    c.iter()
                        .map(|l| spec.label_id(l))
                        .collect::<Result<Vec<LabelId>>>()
                })
                .transpose()?;
            let x = Example {
                id: rec.id,
                fields: rec.fields,
                label,
                candidates,
                meta: rec.meta,
            };
            x.validate(spec.num_labels())?;
            examples.push(x);
        }
        Self::new(spec.name.clone(), split, examples)
    }

    pub fn save(&self, path: &Path, spec: &TaskSpec) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_jsonl(spec)?.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, spec: &TaskSpec, split: &str) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut text = String::new();
        for line in f.lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::from_jsonl(&text, spec, split)
    }

    /// SHA-256 of the JSONL serialization.
    pub fn hash(&self, spec: &TaskSpec) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_jsonl(spec)?.as_bytes())))
    }

    fn with_examples(&self, split: &str, examples: Vec<Example>) -> Self {
        Self {
            task: self.task.clone(),
            split: split.to_string(),
            examples,
        }
    }
}

fn shuffled(ds: &Dataset, seed: u64) -> Vec<Example> {
    let mut xs = ds.examples.clone();
    shuffle(&mut substream(seed, "sampling"), &mut xs);
    xs
}

/// The first `n` examples after a seeded Fisher–Yates shuffle.
pub fn sample_few_shot(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if ds.len() < n {
        return Err(PetError::InsufficientExamples {
            requested: n,
            available: ds.len(),
        });
    }
    let mut xs = shuffled(ds, seed);
    xs.truncate(n);
    Ok(ds.with_examples("few-shot", xs))
}

/// Like [`sample_few_shot`] but counts `n` distinct question groups (meta
/// key `group`); every row of a chosen group is kept.
pub fn sample_few_shot_groups(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let xs = shuffled(ds, seed);
    let mut chosen: Vec<&str> = Vec::new();
    for x in &xs {
        let g = group_of(x);
        if !chosen.contains(&g) {
            if chosen.len() == n {
                continue;
            }
            chosen.push(g);
        }
    }
    if chosen.len() < n {
        return Err(PetError::InsufficientExamples {
            requested: n,
            available: chosen.len(),
        });
    }
    let keep: HashSet<&str> = chosen.into_iter().collect();
    let out = xs
        .iter()
        .filter(|x| keep.contains(group_of(x)))
        .cloned()
        .collect();
    Ok(ds.with_examples("few-shot", out))
}

pub(crate) fn group_of(x: &Example) -> &str {
    x.meta.get(GROUP_KEY).map_or(x.id.as_str(), String::as_str)
}

/// Up to `cap` examples in order, labels removed, skipping ids in `exclude`.
pub fn build_unlabeled(ds: &Dataset, cap: usize, exclude: Option<&Dataset>) -> Dataset {
    let skip: HashSet<&str> = exclude
        .map(|e| e.ids().into_iter().collect())
        .unwrap_or_default();
    let out = ds
        .examples
        .iter()
        .filter(|x| !skip.contains(x.id.as_str()))
        .take(cap)
        .map(|x| Example {
            label: None,
            ..x.clone()
        })
        .collect();
    ds.with_examples("unlabeled", out)
}

/// Few-shot set plus a disjoint unlabeled pool from one seeded shuffle.
pub fn few_shot_split(ds: &Dataset, n: usize, cap: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let few = sample_few_shot(ds, n, seed)?;
    let rest = ds.with_examples("pool", shuffled(ds, seed));
    Ok((few.clone(), build_unlabeled(&rest, cap, Some(&few))))
}

/// Keeps only examples labeled `positive`.
pub fn filter_positive(ds: &Dataset, positive: LabelId) -> Dataset {
    let out = ds
        .examples
        .iter()
        .filter(|x| x.label == Some(positive))
        .cloned()
        .collect();
    ds.with_examples(&ds.split, out)
}

/// Caps candidate sets at the gold label plus `max_negatives` randomly
/// chosen others, keeping the original candidate order.
pub fn limit_candidates(ds: &Dataset, max_negatives: usize, seed: u64) -> Result<Dataset> {
    let mut rng = substream(seed, "candidates");
    let mut out = Vec::with_capacity(ds.len());
    for x in &ds.examples {
        let mut x = x.clone();
        if let Some(c) = &x.candidates {
            let y = x.label.ok_or_else(|| {
                config_err(format!(
                    "example {} needs a label to split candidates",
                    x.id
                ))
            })?;
            let mut negatives: Vec<LabelId> = c.iter().copied().filter(|&l| l != y).collect();
            if negatives.len() > max_negatives {
                shuffle(&mut rng, &mut negatives);
                negatives.truncate(max_negatives);
                let keep: HashSet<LabelId> = negatives.into_iter().chain([y]).collect();
                x.candidates = Some(c.iter().copied().filter(|l| keep.contains(l)).collect());
            }
        }
        out.push(x);
    }
    Ok(ds.with_examples(&ds.split, out))
}
