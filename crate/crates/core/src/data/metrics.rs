use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{group_of, Dataset};
use crate::error::{config_err, PetError, Result};
use crate::pvp::{LabelId, TaskSpec};

/// A predicted label, optionally with per-label scores (full label arity).
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub label: LabelId,
    pub scores: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    id: String,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<BTreeMap<String, f64>>,
}

impl Prediction {
    pub fn to_json(&self, spec: &TaskSpec) -> Result<String> {
        let rec = PredictionRecord {
            id: self.id.clone(),
            label: spec.label_name(self.label).to_string(),
            scores: self.scores.as_ref().map(|s| {
                s.iter()
                    .enumerate()
                    .map(|(i, &v)| (spec.label_name(i).to_string(), v))
                    .collect()
            }),
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json(line: &str, spec: &TaskSpec) -> Result<Self> {
        let rec: PredictionRecord = serde_json::from_str(line)?;
        let scores = match rec.scores {
            Some(map) => {
                let mut v = vec![0.0; spec.num_labels()];
                for (name, s) in map {
                    v[spec.label_id(&name)?] = s;
                }
                Some(v)
            }
            None => None,
        };
        Ok(Self {
            id: rec.id,
            label: spec.label_id(&rec.label)?,
            scores,
        })
    }

    pub fn read_jsonl(text: &str, spec: &TaskSpec) -> Result<Vec<Self>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                Self::from_json(l, spec).map_err(|e| PetError::Parse {
                    location: format!("line {}", i + 1),
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

/// Metric values in `[0, 1]` and the number of items each was computed on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    fn put(&mut self, name: &str, value: f64, count: usize) {
        self.values.insert(name.to_string(), value);
        self.counts.insert(name.to_string(), count);
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return if fp == 0 && fn_ == 0 { 1.0 } else { 0.0 };
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

fn normalize_tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty() && !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_tokens(pred);
    let g = normalize_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return if p == g { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &g {
        *counts.entry(w).or_default() += 1;
    }
    let mut common = 0;
    for w in &p {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Scores `predictions` against the gold labels of `gold`.
///
/// Supported metrics: `acc`, `f1-macro`, `f1a` (F1 of the task's positive
/// label over all rows), `em` (share of question groups with every row
/// right), `record-em` and `record-f1` (per group, the row with the highest
/// positive-label score is the answer; its `answer` meta text is compared
/// with the gold rows' answers).
pub fn evaluate(
    predictions: &[Prediction],
    gold: &Dataset,
    spec: &TaskSpec,
    metrics: &[String],
) -> Result<MetricReport> {
    let by_id: HashMap<&str, &Prediction> =
        predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let missing: Vec<String> = gold
        .examples
        .iter()
        .filter(|x| !by_id.contains_key(x.id.as_str()))
        .map(|x| x.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(PetError::MissingPredictions(missing));
    }
    let mut rows = Vec::with_capacity(gold.len());
    for x in &gold.examples {
        let y = x
            .label
            .ok_or_else(|| config_err(format!("gold example {} has no label", x.id)))?;
        rows.push((x, y, by_id[x.id.as_str()]));
    }
    let n = rows.len();
    let positive = || {
        spec.positive_label
            .as_deref()
            .ok_or_else(|| config_err("metric needs a positive_label in the task spec"))
            .and_then(|p| spec.label_id(p))
    };
    let mut report = MetricReport::default();
    for m in metrics {
        match m.as_str() {
            "acc" => {
                let correct = rows.iter().filter(|(_, y, p)| p.label == *y).count();
                report.put(
                    m,
                    if n == 0 {
                        0.0
                    } else {
                        correct as f64 / n as f64
                    },
                    n,
                );
            }
            "f1-macro" => {
                let mut present: Vec<LabelId> =
                    rows.iter().flat_map(|(_, y, p)| [*y, p.label]).collect();
                present.sort_unstable();
                present.dedup();
                let mut total = 0.0;
                for &l in &present {
                    let tp = rows
                        .iter()
                        .filter(|(_, y, p)| *y == l && p.label == l)
                        .count();
                    let fp = rows
                        .iter()
                        .filter(|(_, y, p)| *y != l && p.label == l)
                        .count();
                    let fn_ = rows
                        .iter()
                        .filter(|(_, y, p)| *y == l && p.label != l)
                        .count();
                    total += f1(tp, fp, fn_);
                }
                let v = if present.is_empty() {
                    0.0
                } else {
                    total / present.len() as f64
                };
                report.put(m, v, n);
            }
            "f1a" => {
                let pos = positive()?;
                let tp = rows
                    .iter()
                    .filter(|(_, y, p)| *y == pos && p.label == pos)
                    .count();
                let fp = rows
                    .iter()
                    .filter(|(_, y, p)| *y != pos && p.label == pos)
                    .count();
                let fn_ = rows
                    .iter()
                    .filter(|(_, y, p)| *y == pos && p.label != pos)
                    .count();
                report.put(m, f1(tp, fp, fn_), n);
            }
            "em" => {
                let mut groups: BTreeMap<&str, bool> = BTreeMap::new();
                for (x, y, p) in &rows {
                    let ok = groups.entry(group_of(x)).or_insert(true);
                    *ok &= p.label == *y;
                }
                let right = groups.values().filter(|&&v| v).count();
                let v = if groups.is_empty() {
                    0.0
                } else {
                    right as f64 / groups.len() as f64
                };
                report.put(m, v, groups.len());
            }
            "record-em" | "record-f1" => {
                let pos = positive()?;
                let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
                for (i, (x, _, _)) in rows.iter().enumerate() {
                    groups.entry(group_of(x)).or_default().push(i);
                }
                let mut total = 0.0;
                for members in groups.values() {
                    let mut best = members[0];
                    for &i in members {
                        let s = |i: usize| {
                            rows[i]
                                .2
                                .scores
                                .as_ref()
                                .map_or(if rows[i].2.label == pos { 1.0 } else { 0.0 }, |s| s[pos])
                        };
                        if s(i) > s(best) {
                            best = i;
                        }
                    }
                    let answer =
                        |i: usize| rows[i].0.meta.get("answer").cloned().unwrap_or_default();
                    let pred = answer(best);
                    let golds: HashSet<String> = members
                        .iter()
                        .filter(|&&i| rows[i].1 == pos)
                        .map(|&i| answer(i))
                        .collect();
                    let v = golds
                        .iter()
                        .map(|g| {
                            if m == "record-em" {
                                f64::from(u8::from(normalize_tokens(&pred) == normalize_tokens(g)))
                            } else {
                                token_f1(&pred, g)
                            }
                        })
                        .fold(0.0, f64::max);
                    total += v;
                }
                let v = if groups.is_empty() {
                    0.0
                } else {
                    total / groups.len() as f64
                };
                report.put(m, v, groups.len());
            }
            other => return Err(config_err(format!("unknown metric {other:?}"))),
        }
    }
    Ok(report)
}
