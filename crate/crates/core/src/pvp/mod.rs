//! Patterns, verbalizers and the rewrite of inputs into cloze questions.

mod bundle;
mod pattern;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, PetError, Result};
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

pub use bundle::{FreeFormSpec, TaskBundle, TaskSpec};
pub use pattern::{Pattern, Segment};

pub type LabelId = usize;

/// One input `x` with optional gold label `y` and candidate set `Y_x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub fields: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<LabelId>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Example {
    pub fn new<K, V>(id: impl Into<String>, fields: impl IntoIterator<Item = (K, V)>) -> Self
    where
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            id: id.into(),
            fields: fields
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
            label: None,
            candidates: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_label(mut self, label: LabelId) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_candidates(mut self, candidates: Vec<LabelId>) -> Self {
        self.candidates = Some(candidates);
        self
    }

    /// `Y_x`: the candidate list, or every label when none is given.
    pub fn candidate_labels(&self, num_labels: usize) -> Vec<LabelId> {
        match &self.candidates {
            Some(c) => c.clone(),
            None => (0..num_labels).collect(),
        }
    }

    pub fn field(&self, name: &str) -> Result<&str> {
        self.fields
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| config_err(format!("example {} lacks field {name:?}", self.id)))
    }

    pub fn validate(&self, num_labels: usize) -> Result<()> {
        if self.fields.is_empty() {
            return Err(config_err(format!("example {} has no fields", self.id)));
        }
        if let Some(c) = &self.candidates {
            if c.is_empty() || c.iter().any(|&l| l >= num_labels) {
                return Err(config_err(format!(
                    "example {} has invalid candidates",
                    self.id
                )));
            }
            if let Some(y) = self.label {
                if !c.contains(&y) {
                    return Err(config_err(format!(
                        "example {}: label {y} not among candidates",
                        self.id
                    )));
                }
            }
        }
        if let Some(y) = self.label {
            if y >= num_labels {
                return Err(config_err(format!(
                    "example {}: label {y} out of range",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Label → token sequence mapping `v`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verbalizer {
    map: BTreeMap<LabelId, Vec<TokenId>>,
}

impl Verbalizer {
    pub fn new(map: BTreeMap<LabelId, Vec<TokenId>>, vocab: &Vocabulary) -> Result<Self> {
        let mut seen: BTreeMap<&[TokenId], LabelId> = BTreeMap::new();
        for (&label, toks) in &map {
            if toks.is_empty() {
                return Err(config_err(format!("empty verbalization for label {label}")));
            }
            if toks
                .iter()
                .any(|&t| t == vocab.mask_id() || t == vocab.pad_id() || t as usize >= vocab.len())
            {
                return Err(config_err(format!(
                    "verbalization for label {label} uses a reserved token"
                )));
            }
            if let Some(other) = seen.insert(toks.as_slice(), label) {
                return Err(config_err(format!(
                    "labels {other} and {label} share a verbalization"
                )));
            }
        }
        Ok(Self { map })
    }

    /// Tokenizes one surface string per label.
    pub fn from_surface<'a>(
        surfaces: impl IntoIterator<Item = (LabelId, &'a str)>,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let map = surfaces
            .into_iter()
            .map(|(l, s)| (l, vocab.encode(s)))
            .collect();
        Self::new(map, vocab)
    }

    pub fn get(&self, label: LabelId) -> Option<&[TokenId]> {
        self.map.get(&label).map(Vec::as_slice)
    }

    pub fn tokens(&self, label: LabelId) -> Result<&[TokenId]> {
        self.get(label)
            .ok_or_else(|| config_err(format!("label {label} has no verbalization")))
    }

    pub fn labels(&self) -> impl Iterator<Item = LabelId> + '_ {
        self.map.keys().copied()
    }

    pub fn is_single_token(&self) -> bool {
        self.map.values().all(|v| v.len() == 1)
    }
}

/// A pattern-verbalizer pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pvp {
    pub name: String,
    pub pattern: Pattern,
    pub verbalizer: Verbalizer,
}

impl Pvp {
    pub fn new(name: impl Into<String>, pattern: Pattern, verbalizer: Verbalizer) -> Self {
        Self {
            name: name.into(),
            pattern,
            verbalizer,
        }
    }

    /// True when every candidate of `x` is verbalized by a single token.
    pub fn single_token_for(&self, x: &Example, num_labels: usize) -> Result<bool> {
        for y in x.candidate_labels(num_labels) {
            if self.verbalizer.tokens(y)?.len() != 1 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// `l(x)`: the longest verbalization over `Y_x`.
pub fn max_verbalization_len(pvp: &Pvp, x: &Example, num_labels: usize) -> Result<usize> {
    let candidates = x.candidate_labels(num_labels);
    if candidates.is_empty() {
        return Err(config_err(format!("example {} has no candidates", x.id)));
    }
    let mut best = 0;
    for y in candidates {
        best = best.max(pvp.verbalizer.tokens(y)?.len());
    }
    Ok(best)
}

/// Builds `P^k(x)`: tokenizes and truncates field texts longest-first, then
/// assembles the pattern with the mask slot expanded to `k` masks.
pub fn apply_pattern(
    pvp: &Pvp,
    vocab: &Vocabulary,
    x: &Example,
    k: usize,
    max_seq_length: usize,
) -> Result<TokenSequence> {
    pvp.pattern.apply(vocab, x, k, max_seq_length)
}

/// Shortens token lists by repeatedly dropping the last token of the
/// currently longest one (earliest wins ties) until the weighted total fits
/// `budget`. `weights[i]` is how often list `i` is emitted.
pub fn truncate_longest_first(fields: &mut [Vec<TokenId>], weights: &[usize], budget: usize) {
    let mut total: usize = fields.iter().zip(weights).map(|(f, w)| f.len() * w).sum();
    while total > budget {
        let mut longest: Option<usize> = None;
        for (i, f) in fields.iter().enumerate() {
            if weights[i] == 0 || f.is_empty() {
                continue;
            }
            match longest {
                Some(j) if fields[j].len() >= f.len() => {}
                _ => longest = Some(i),
            }
        }
        let Some(i) = longest else { break };
        fields[i].pop();
        total -= weights[i];
    }
}

pub(crate) fn unknown_label(name: &str) -> PetError {
    PetError::UnknownLabel(name.to_string())
}
