//! Ensemble training, zero-shot weighting, soft-labeling, distillation and
//! the iterative self-training loop.

use std::cell::Cell;
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Prediction};
use crate::error::{config_err, PetError, Result};
use crate::mlm::{checkpoint, softmax_in_place, MlmBackend, TinyTransformer};
use crate::pvp::{Example, LabelId, Pvp, TaskSpec};
use crate::rng::{derive_seed, shuffle, substream};
use crate::scoring::{DecodingStrategy, PvpScorer, ScoreTable};
use crate::training::{classifier_input, finetune, train_classifier, TrainConfig, TrainLog};
use crate::vocab::{TokenSequence, Vocabulary};

/// Everything scoring needs to know about a task.
#[derive(Clone, Copy, Debug)]
pub struct TaskContext<'a> {
    pub spec: &'a TaskSpec,
    pub vocab: &'a Vocabulary,
    pub pvps: &'a [Pvp],
    pub max_seq_length: usize,
}

impl<'a> TaskContext<'a> {
    pub fn new(
        spec: &'a TaskSpec,
        vocab: &'a Vocabulary,
        pvps: &'a [Pvp],
        max_seq_length: usize,
    ) -> Self {
        Self {
            spec,
            vocab,
            pvps,
            max_seq_length: max_seq_length.min(spec.max_seq_length),
        }
    }

    pub fn pvp(&self, name: &str) -> Result<&'a Pvp> {
        self.pvps
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| config_err(format!("unknown pvp {name:?}")))
    }

    pub fn scorer(&self, pvp: &'a Pvp) -> PvpScorer<'a> {
        PvpScorer::new(pvp, self.vocab, self.spec.num_labels(), self.max_seq_length)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// `w_p` = zero-shot training-set accuracy.
    #[default]
    Accuracy,
    /// `w_p` = 1.
    Uniform,
}

impl std::str::FromStr for WeightMode {
    type Err = PetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Self::Accuracy),
            "uniform" => Ok(Self::Uniform),
            other => Err(config_err(format!("unknown weight mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointRef {
    File(PathBuf),
    #[serde(skip)]
    Memory(Arc<Vec<u8>>),
}

impl CheckpointRef {
    pub fn load(&self) -> Result<TinyTransformer> {
        match self {
            Self::File(p) => checkpoint::load(p),
            Self::Memory(b) => checkpoint::from_bytes(b),
        }
    }

    /// Writes an in-memory checkpoint to `path` and returns the file form.
    pub fn persist(&self, path: &Path) -> Result<Self> {
        match self {
            Self::File(p) if p == path => Ok(self.clone()),
            Self::File(p) => {
                std::fs::copy(p, path)?;
                Ok(Self::File(path.to_path_buf()))
            }
            Self::Memory(b) => {
                std::fs::write(path, b.as_slice())?;
                Ok(Self::File(path.to_path_buf()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub pvp: String,
    /// 1-based.
    pub seed_index: usize,
    pub checkpoint: CheckpointRef,
    pub weight: f64,
}

/// Per-example teacher distribution over the full label set. Labels outside
/// an example's candidates get probability 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    pub id: String,
    pub probs: Vec<f64>,
}

impl SoftLabel {
    pub fn argmax(&self) -> LabelId {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn confidence(&self) -> f64 {
        self.probs.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SoftDataset {
    pub entries: Vec<SoftLabel>,
}

impl SoftDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line).map_err(|e| PetError::Parse {
                location: format!("line {}", i + 1),
                message: e.to_string(),
            })?);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn predictions(&self) -> Vec<Prediction> {
        self.entries
            .iter()
            .map(|e| Prediction {
                id: e.id.clone(),
                label: e.argmax(),
                scores: Some(e.probs.clone()),
            })
            .collect()
    }
}

/// Counts checkpoints currently materialized and the peak seen.
#[derive(Debug, Default)]
pub struct ResidencyMeter {
    current: Cell<usize>,
    peak: Cell<usize>,
}

pub struct Resident<'m> {
    meter: &'m ResidencyMeter,
}

impl Drop for Resident<'_> {
    fn drop(&mut self) {
        self.meter.current.set(self.meter.current.get() - 1);
    }
}

impl ResidencyMeter {
    pub fn acquire(&self) -> Resident<'_> {
        let now = self.current.get() + 1;
        self.current.set(now);
        self.peak.set(self.peak.get().max(now));
        Resident { meter: self }
    }

    pub fn current(&self) -> usize {
        self.current.get()
    }

    pub fn peak(&self) -> usize {
        self.peak.get()
    }
}

/// Scores every example, splitting the work over up to `threads` workers.
/// Output order follows `xs`.
pub fn score_all<B: MlmBackend + ?Sized>(
    model: &B,
    scorer: &PvpScorer<'_>,
    xs: &[Example],
    strategy: DecodingStrategy,
    threads: usize,
) -> Result<Vec<ScoreTable>> {
    let threads = threads.clamp(1, xs.len().max(1));
    if threads == 1 {
        return xs
            .iter()
            .map(|x| scorer.score(model, x, strategy))
            .collect();
    }
    let chunk = xs.len().div_ceil(threads);
    let parts: Vec<Result<Vec<ScoreTable>>> = std::thread::scope(|s| {
        let handles: Vec<_> = xs
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|x| scorer.score(model, x, strategy)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scoring worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(xs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Fraction of `xs` whose argmax under `q_p` matches the gold label.
pub fn accuracy<B: MlmBackend + ?Sized>(
    model: &B,
    scorer: &PvpScorer<'_>,
    xs: &[Example],
    strategy: DecodingStrategy,
) -> Result<f64> {
    if xs.is_empty() {
        return Err(PetError::EmptyTrainSet);
    }
    let mut hits = 0;
    for x in xs {
        let y = x
            .label
            .ok_or_else(|| config_err(format!("example {} has no label", x.id)))?;
        if scorer.predict(model, x, strategy)? == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / xs.len() as f64)
}

/// `w_p`: zero-shot accuracy of the untrained backend on the labeled set.
pub fn zero_shot_weight<B: MlmBackend + ?Sized>(
    scorer: &PvpScorer<'_>,
    model: &B,
    train: &[Example],
    strategy: DecodingStrategy,
) -> Result<f64> {
    accuracy(model, scorer, train, strategy)
}

pub fn pvp_weights<B: MlmBackend + ?Sized>(
    ctx: &TaskContext<'_>,
    model: &B,
    train: &[Example],
    strategy: DecodingStrategy,
    mode: WeightMode,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for p in ctx.pvps {
        let w = match mode {
            WeightMode::Uniform => 1.0,
            WeightMode::Accuracy => zero_shot_weight(&ctx.scorer(p), model, train, strategy)?,
        };
        out.insert(p.name.clone(), w);
    }
    Ok(out)
}

/// Raw member scores `s_p` for every example: logits for single-token
/// verbalizations, `log q_p` otherwise.
fn member_scores<B, F>(
    member: &EnsembleMember,
    ctx: &TaskContext<'_>,
    xs: &[Example],
    strategy: DecodingStrategy,
    load: &mut F,
    meter: &ResidencyMeter,
    threads: usize,
) -> Result<Vec<ScoreTable>>
where
    B: MlmBackend,
    F: FnMut(&EnsembleMember) -> Result<B>,
{
    let _slot = meter.acquire();
    let model = load(member)?;
    let scorer = ctx.scorer(ctx.pvp(&member.pvp)?);
    score_all(&model, &scorer, xs, strategy, threads)
}

/// Accumulates `Σ w_p s_p` member by member and normalizes.
struct Accumulator {
    sums: Vec<Vec<f64>>,
    labels: Vec<Vec<LabelId>>,
    num_labels: usize,
}

impl Accumulator {
    fn new(xs: &[Example], num_labels: usize) -> Self {
        let labels: Vec<Vec<LabelId>> = xs.iter().map(|x| x.candidate_labels(num_labels)).collect();
        Self {
            sums: labels.iter().map(|l| vec![0.0; l.len()]).collect(),
            labels,
            num_labels,
        }
    }

    fn add(&mut self, tables: &[ScoreTable], weight: f64) {
        for (row, t) in self.sums.iter_mut().zip(tables) {
            for (acc, s) in row.iter_mut().zip(t.ensemble_logits()) {
                *acc += weight * s;
            }
        }
    }

    fn finish(self, xs: &[Example]) -> SoftDataset {
        let entries = self
            .sums
            .into_iter()
            .zip(self.labels)
            .zip(xs)
            .map(|((mut row, labels), x)| {
                softmax_in_place(&mut row);
                let mut probs = vec![0.0; self.num_labels];
                for (l, p) in labels.into_iter().zip(row) {
                    probs[l] = p;
                }
                SoftLabel {
                    id: x.id.clone(),
                    probs,
                }
            })
            .collect();
        SoftDataset { entries }
    }
}

/// `q_P(y|x) ∝ exp Σ_p w_p s_p(y|x)`. Members are materialized one at a
/// time through `load`; members with zero weight are never loaded.
pub fn ensemble_soft_label_with<B, F>(
    members: &[EnsembleMember],
    ctx: &TaskContext<'_>,
    xs: &[Example],
    strategy: DecodingStrategy,
    mut load: F,
    meter: &ResidencyMeter,
    threads: usize,
) -> Result<SoftDataset>
where
    B: MlmBackend,
    F: FnMut(&EnsembleMember) -> Result<B>,
{
    let mut acc = Accumulator::new(xs, ctx.spec.num_labels());
    if xs.is_empty() {
        return Ok(SoftDataset::default());
    }
    for m in members {
        if m.weight < 0.0 || !m.weight.is_finite() {
            return Err(config_err(format!(
                "member {}#{} has invalid weight {}",
                m.pvp, m.seed_index, m.weight
            )));
        }
        if m.weight == 0.0 {
            continue;
        }
        let tables = member_scores(m, ctx, xs, strategy, &mut load, meter, threads)?;
        acc.add(&tables, m.weight);
    }
    Ok(acc.finish(xs))
}

/// Soft-labels `xs` with checkpoint-backed members. Returns the labels and
/// the peak number of simultaneously loaded checkpoints.
pub fn ensemble_soft_label(
    members: &[EnsembleMember],
    ctx: &TaskContext<'_>,
    xs: &[Example],
    strategy: DecodingStrategy,
    threads: usize,
) -> Result<(SoftDataset, usize)> {
    let meter = ResidencyMeter::default();
    let soft = ensemble_soft_label_with(
        members,
        ctx,
        xs,
        strategy,
        |m| m.checkpoint.load(),
        &meter,
        threads,
    )?;
    Ok((soft, meter.peak()))
}

/// One finetuning job of an ensemble.
#[derive(Clone, Debug)]
pub struct MemberJob {
    pub pvp: String,
    pub seed_index: usize,
    pub train: Vec<Example>,
    pub seed: u64,
}

/// Finetunes every job from `base`, running up to `parallelism` jobs at
/// once. Results follow job order and do not depend on `parallelism`.
pub fn train_members(
    base: &TinyTransformer,
    ctx: &TaskContext<'_>,
    jobs: &[MemberJob],
    cfg: &TrainConfig,
    weights: &BTreeMap<String, f64>,
    parallelism: usize,
) -> Result<Vec<(EnsembleMember, TrainLog)>> {
    let run = |job: &MemberJob| -> Result<(EnsembleMember, TrainLog)> {
        let pvp = ctx.pvp(&job.pvp)?;
        let cfg = TrainConfig {
            seed: job.seed,
            max_seq_length: cfg.max_seq_length.min(ctx.max_seq_length),
            ..*cfg
        };
        let (model, log) = finetune(
            base.clone(),
            pvp,
            ctx.vocab,
            ctx.spec,
            &job.train,
            &cfg,
            None,
        )?;
        info!(
            "trained {}#{} on {} examples, final loss {:.4}",
            job.pvp,
            job.seed_index,
            job.train.len(),
            log.steps.last().map_or(f64::NAN, |s| s.loss)
        );
        let member = EnsembleMember {
            pvp: job.pvp.clone(),
            seed_index: job.seed_index,
            checkpoint: CheckpointRef::Memory(Arc::new(checkpoint::to_bytes(&model))),
            weight: weights.get(&job.pvp).copied().unwrap_or(1.0),
        };
        Ok((member, log))
    };
    let parallelism = parallelism.clamp(1, jobs.len().max(1));
    if parallelism == 1 {
        return jobs.iter().map(run).collect();
    }
    let mut out = Vec::with_capacity(jobs.len());
    for batch in jobs.chunks(parallelism) {
        let results: Vec<Result<(EnsembleMember, TrainLog)>> = std::thread::scope(|s| {
            let handles: Vec<_> = batch.iter().map(|j| s.spawn(|| run(j))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training worker panicked"))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

fn member_seed(run_seed: u64, generation: usize, pvp: &str, seed_index: usize) -> u64 {
    derive_seed(run_seed, &format!("member/{generation}/{pvp}/{seed_index}"))
}

/// Plain jobs: every PVP × seed trained on the labeled set.
pub fn pet_jobs(
    ctx: &TaskContext<'_>,
    train: &[Example],
    seeds_per_pvp: usize,
    run_seed: u64,
) -> Vec<MemberJob> {
    let mut jobs = Vec::new();
    for p in ctx.pvps {
        for s in 1..=seeds_per_pvp {
            jobs.push(MemberJob {
                pvp: p.name.clone(),
                seed_index: s,
                train: train.to_vec(),
                seed: member_seed(run_seed, 0, &p.name, s),
            });
        }
    }
    jobs
}

/// Trains a classifier head plus backbone on soft labels. Inputs are the
/// bare fields, no pattern.
pub fn distill(
    base: &TinyTransformer,
    ctx: &TaskContext<'_>,
    soft: &SoftDataset,
    xs: &[Example],
    cfg: &TrainConfig,
) -> Result<TinyTransformer> {
    if soft.is_empty() {
        return Err(PetError::EmptyTrainSet);
    }
    let by_id: BTreeMap<&str, &Example> = xs.iter().map(|x| (x.id.as_str(), x)).collect();
    let max_len = cfg
        .max_seq_length
        .min(ctx.max_seq_length)
        .min(base.config().max_positions);
    let mut inputs = Vec::with_capacity(soft.len());
    let mut targets = Vec::with_capacity(soft.len());
    for e in &soft.entries {
        let x = by_id
            .get(e.id.as_str())
            .ok_or_else(|| config_err(format!("soft label for unknown example {}", e.id)))?;
        inputs.push(classifier_input(ctx.vocab, ctx.spec, x, max_len)?);
        targets.push(e.probs.clone());
    }
    let model = base.clone().with_classifier_head(ctx.spec.num_labels())?;
    let (model, log) = train_classifier(model, &inputs, &targets, cfg)?;
    info!(
        "distilled classifier on {} examples, final loss {:.4}",
        inputs.len(),
        log.steps.last().map_or(f64::NAN, |s| s.loss)
    );
    Ok(model)
}

/// Supervised baseline: a classifier trained on one-hot labels at
/// temperature 1.
pub fn supervised_classifier(
    base: &TinyTransformer,
    ctx: &TaskContext<'_>,
    train: &[Example],
    cfg: &TrainConfig,
) -> Result<TinyTransformer> {
    let k = ctx.spec.num_labels();
    let mut entries = Vec::with_capacity(train.len());
    for x in train {
        let y = x
            .label
            .ok_or_else(|| config_err(format!("example {} has no label", x.id)))?;
        let mut probs = vec![0.0; k];
        probs[y] = 1.0;
        entries.push(SoftLabel {
            id: x.id.clone(),
            probs,
        });
    }
    let cfg = TrainConfig {
        distillation_temperature: 1.0,
        ..*cfg
    };
    distill(base, ctx, &SoftDataset { entries }, train, &cfg)
}

/// Classifier predictions restricted to each example's candidates.
pub fn classifier_predict(
    model: &TinyTransformer,
    ctx: &TaskContext<'_>,
    xs: &[Example],
) -> Result<Vec<Prediction>> {
    let max_len = ctx.max_seq_length.min(model.config().max_positions);
    let k = ctx.spec.num_labels();
    xs.iter()
        .map(|x| {
            let z: TokenSequence = classifier_input(ctx.vocab, ctx.spec, x, max_len)?;
            let mut probs = model.forward_classify(&z)?;
            softmax_in_place(&mut probs);
            let labels = x.candidate_labels(k);
            let mut best = labels[0];
            for &l in &labels {
                if probs[l] > probs[best] {
                    best = l;
                }
            }
            Ok(Prediction {
                id: x.id.clone(),
                label: best,
                scores: Some(probs),
            })
        })
        .collect()
}

pub fn prediction_accuracy(predictions: &[Prediction], xs: &[Example]) -> f64 {
    let gold: BTreeMap<&str, Option<LabelId>> =
        xs.iter().map(|x| (x.id.as_str(), x.label)).collect();
    let hits = predictions
        .iter()
        .filter(|p| gold.get(p.id.as_str()).copied().flatten() == Some(p.label))
        .count();
    hits as f64 / xs.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub generations: usize,
    pub growth_factor: f64,
    pub subset_fraction: f64,
}

impl Default for GenerationPlan {
    fn default() -> Self {
        Self {
            generations: 3,
            growth_factor: 5.0,
            subset_fraction: 0.25,
        }
    }
}

impl GenerationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.generations == 0 {
            return Err(config_err("generations must be at least 1"));
        }
        if self.growth_factor.is_nan() || self.growth_factor <= 1.0 {
            return Err(config_err("growth_factor must exceed 1"));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction < 1.0) {
            return Err(config_err("subset_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Training-set size of generation `g` (0-based).
    pub fn size(&self, labeled: usize, g: usize) -> usize {
        (labeled as f64 * self.growth_factor.powi(g as i32)).round() as usize
    }

    pub fn subset_size(&self, members: usize) -> usize {
        ((self.subset_fraction * (members.saturating_sub(1)) as f64).ceil() as usize).max(1)
    }
}

/// Per-label targets for a set of `total` examples keeping the shares of
/// `counts` (largest remainder, ties to the lower label).
pub fn label_quotas(counts: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return vec![0; counts.len()];
    }
    let exact: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 * total as f64 / n as f64)
        .collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &l in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        quotas[l] += 1;
        rest -= 1;
    }
    quotas
}

/// The most confident pseudo-labeled examples per label, never repeating
/// a labeled example. Returns the selection and per-label shortfalls.
pub fn select_confident(
    soft: &SoftDataset,
    pool: &[Example],
    labeled: &[Example],
    quotas: &[usize],
) -> (Vec<Example>, Vec<usize>) {
    let ids: HashSet<&str> = labeled.iter().map(|x| x.id.as_str()).collect();
    let contents: HashSet<&BTreeMap<String, String>> = labeled.iter().map(|x| &x.fields).collect();
    let mut ranked: Vec<(f64, &str, LabelId, &Example)> = soft
        .entries
        .iter()
        .zip(pool)
        .filter(|(_, x)| !ids.contains(x.id.as_str()) && !contents.contains(&x.fields))
        .map(|(s, x)| (s.confidence(), x.id.as_str(), s.argmax(), x))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let mut taken = vec![0; quotas.len()];
    let mut out = Vec::new();
    for (_, _, y, x) in ranked {
        if taken[y] < quotas[y] {
            taken[y] += 1;
            out.push(x.clone().with_label(y));
        }
    }
    let shortfall = quotas.iter().zip(&taken).map(|(q, t)| q - t).collect();
    (out, shortfall)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PetConfig {
    pub train: TrainConfig,
    pub classifier: TrainConfig,
    pub seeds_per_pvp: usize,
    pub strategy: DecodingStrategy,
    pub weights: WeightMode,
    pub distill: bool,
    pub parallelism: usize,
    pub seed: u64,
}

impl Default for PetConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            classifier: TrainConfig::classifier(),
            seeds_per_pvp: 3,
            strategy: DecodingStrategy::MaxFirst,
            weights: WeightMode::Accuracy,
            distill: true,
            parallelism: 1,
            seed: 0,
        }
    }
}

/// One generation of members and the training-set sizes they saw.
#[derive(Clone, Debug)]
pub struct Generation {
    pub members: Vec<EnsembleMember>,
    pub train_sizes: Vec<usize>,
    /// Pseudo-labeled additions per member, in selection order.
    pub pseudo_labeled: Vec<Vec<Example>>,
    pub label_counts: Vec<Vec<usize>>,
    pub shortfalls: Vec<Vec<usize>>,
    pub logs: Vec<TrainLog>,
}

#[derive(Clone, Debug)]
pub struct PetOutcome {
    pub weights: BTreeMap<String, f64>,
    pub generations: Vec<Generation>,
    pub soft: SoftDataset,
    pub peak_resident: usize,
    /// `None` when distillation is disabled or the task has a single PVP;
    /// the final ensemble then is the classifier.
    pub classifier: Option<TinyTransformer>,
}

impl PetOutcome {
    pub fn final_members(&self) -> &[EnsembleMember] {
        &self
            .generations
            .last()
            .expect("at least one generation")
            .members
    }

    pub fn predict(
        &self,
        ctx: &TaskContext<'_>,
        xs: &[Example],
        strategy: DecodingStrategy,
    ) -> Result<Vec<Prediction>> {
        match &self.classifier {
            Some(m) => classifier_predict(m, ctx, xs),
            None => Ok(
                ensemble_soft_label(self.final_members(), ctx, xs, strategy, 1)?
                    .0
                    .predictions(),
            ),
        }
    }
}

fn finish_run(
    base: &TinyTransformer,
    ctx: &TaskContext<'_>,
    unlabeled: &Dataset,
    cfg: &PetConfig,
    weights: BTreeMap<String, f64>,
    generations: Vec<Generation>,
) -> Result<PetOutcome> {
    let members = &generations.last().expect("at least one generation").members;
    let (soft, peak_resident) = ensemble_soft_label(
        members,
        ctx,
        &unlabeled.examples,
        cfg.strategy,
        cfg.parallelism,
    )?;
    let classifier = if cfg.distill && ctx.pvps.len() > 1 && !soft.is_empty() {
        Some(distill(
            base,
            ctx,
            &soft,
            &unlabeled.examples,
            &cfg.classifier,
        )?)
    } else {
        None
    };
    Ok(PetOutcome {
        weights,
        generations,
        soft,
        peak_resident,
        classifier,
    })
}

/// PET: zero-shot weights, one member per PVP and seed, soft labels on the
/// unlabeled set, then distillation.
pub fn run_pet(
    base: &TinyTransformer,
    ctx: &TaskContext<'_>,
    labeled: &Dataset,
    unlabeled: &Dataset,
    cfg: &PetConfig,
) -> Result<PetOutcome> {
    run_ipet(
        base,
        ctx,
        labeled,
        unlabeled,
        cfg,
        &GenerationPlan {
            generations: 1,
            ..GenerationPlan::default()
        },
    )
}

/// iPET: each later generation retrains every member from `base` on the
/// labeled set plus examples its peer subset of the previous generation is
/// most confident about.
pub fn run_ipet(
    base: &TinyTransformer,
    ctx: &TaskContext<'_>,
    labeled: &Dataset,
    unlabeled: &Dataset,
    cfg: &PetConfig,
    plan: &GenerationPlan,
) -> Result<PetOutcome> {
    plan.validate()?;
    if labeled.is_empty() {
        return Err(PetError::EmptyTrainSet);
    }
    let k = ctx.spec.num_labels();
    let final_size = plan.size(labeled.len(), plan.generations - 1);
    if plan.generations > 1 && unlabeled.len() < final_size - labeled.len() {
        return Err(PetError::InsufficientExamples {
            requested: final_size - labeled.len(),
            available: unlabeled.len(),
        });
    }
    let weights = pvp_weights(ctx, base, &labeled.examples, cfg.strategy, cfg.weights)?;
    info!("pvp weights {weights:?}");
    let counts = labeled.label_counts(k);
    let jobs = pet_jobs(ctx, &labeled.examples, cfg.seeds_per_pvp, cfg.seed);
    let (members, logs): (Vec<_>, Vec<_>) =
        train_members(base, ctx, &jobs, &cfg.train, &weights, cfg.parallelism)?
            .into_iter()
            .unzip();
    let n = members.len();
    let mut generations = vec![Generation {
        members,
        train_sizes: vec![labeled.len(); n],
        pseudo_labeled: vec![Vec::new(); n],
        label_counts: vec![counts.clone(); n],
        shortfalls: vec![vec![0; k]; n],
        logs,
    }];
    for g in 1..plan.generations {
        let prev = &generations[g - 1].members;
        let meter = ResidencyMeter::default();
        let mut tables = Vec::with_capacity(prev.len());
        for m in prev {
            let t = if m.weight == 0.0 {
                Vec::new()
            } else {
                member_scores(
                    m,
                    ctx,
                    &unlabeled.examples,
                    cfg.strategy,
                    &mut |m: &EnsembleMember| m.checkpoint.load(),
                    &meter,
                    cfg.parallelism,
                )?
            };
            tables.push(t);
        }
        let quotas = label_quotas(&counts, plan.size(labeled.len(), g));
        let mut jobs = Vec::with_capacity(prev.len());
        let mut shortfalls = Vec::with_capacity(prev.len());
        let mut label_counts = Vec::with_capacity(prev.len());
        let mut pseudo_labeled = Vec::with_capacity(prev.len());
        for (i, me) in prev.iter().enumerate() {
            let mut peers: Vec<usize> = (0..prev.len()).filter(|&j| j != i).collect();
            let mut rng = substream(cfg.seed, &format!("ipet-subset/{g}/{i}"));
            shuffle(&mut rng, &mut peers);
            peers.truncate(plan.subset_size(prev.len()));
            peers.sort_unstable();
            let mut acc = Accumulator::new(&unlabeled.examples, k);
            for &j in &peers {
                if prev[j].weight > 0.0 {
                    acc.add(&tables[j], prev[j].weight);
                }
            }
            let soft = acc.finish(&unlabeled.examples);
            let pseudo: Vec<usize> = quotas.iter().zip(&counts).map(|(q, c)| q - c).collect();
            let (picked, short) =
                select_confident(&soft, &unlabeled.examples, &labeled.examples, &pseudo);
            if short.iter().any(|&s| s > 0) {
                warn!(
                    "generation {g} member {}#{}: label shortfall {short:?}",
                    me.pvp, me.seed_index
                );
            }
            let mut train = labeled.examples.clone();
            train.extend(picked.iter().cloned());
            pseudo_labeled.push(picked);
            let mut lc = vec![0; k];
            for x in &train {
                if let Some(y) = x.label {
                    lc[y] += 1;
                }
            }
            label_counts.push(lc);
            shortfalls.push(short);
            jobs.push(MemberJob {
                pvp: me.pvp.clone(),
                seed_index: me.seed_index,
                seed: member_seed(cfg.seed, g, &me.pvp, me.seed_index),
                train,
            });
        }
        let train_sizes = jobs.iter().map(|j| j.train.len()).collect();
        let (members, logs): (Vec<_>, Vec<_>) =
            train_members(base, ctx, &jobs, &cfg.train, &weights, cfg.parallelism)?
                .into_iter()
                .unzip();
        generations.push(Generation {
            members,
            train_sizes,
            pseudo_labeled,
            label_counts,
            shortfalls,
            logs,
        });
    }
    finish_run(base, ctx, unlabeled, cfg, weights, generations)
}

/// Replay record for a run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub task: String,
    pub seed: u64,
    pub pvps: Vec<String>,
    pub seeds_per_pvp: usize,
    pub weights: BTreeMap<String, f64>,
    pub plan: Option<GenerationPlan>,
    pub strategy: Option<DecodingStrategy>,
    pub dataset_hashes: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
