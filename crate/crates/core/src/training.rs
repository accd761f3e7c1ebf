//! Losses and training loops for PVP models and the distilled classifier.

use std::io::Write;
use std::path::Path;

use log::{debug, warn};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, PetError, Result};
use crate::mlm::{
    log_softmax_in_place, softmax_in_place, AdamConfig, Grads, Tape, TinyTransformer, Var,
};
use crate::pvp::{max_verbalization_len, truncate_longest_first, Example, LabelId, TaskSpec};
use crate::rng::{bounded, shuffle, substream, unit_f64};
use crate::scoring::{PvpScorer, ScoreTable};
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

/// Lower bound applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub gradient_accumulation_steps: usize,
    pub max_steps: usize,
    pub max_seq_length: usize,
    pub distillation_temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            adam_epsilon: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            batch_size: 2,
            gradient_accumulation_steps: 8,
            max_steps: 250,
            max_seq_length: 256,
            distillation_temperature: 2.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for the final sequence classifier (5000 steps).
    pub fn classifier() -> Self {
        Self {
            max_steps: 5000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("learning_rate", self.learning_rate),
            ("adam_epsilon", self.adam_epsilon),
            ("max_grad_norm", self.max_grad_norm),
            ("distillation_temperature", self.distillation_temperature),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(config_err("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 || self.gradient_accumulation_steps == 0 || self.max_seq_length == 0
        {
            return Err(config_err(
                "batch_size, gradient_accumulation_steps and max_seq_length must be positive",
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            ..AdamConfig::default()
        }
    }

    /// Examples per optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.gradient_accumulation_steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    Hinge,
}

impl LossKind {
    /// Cross entropy for single-token verbalizers, hinge otherwise.
    pub fn for_scorer(scorer: &PvpScorer<'_>) -> Self {
        if scorer.pvp.verbalizer.is_single_token() {
            Self::CrossEntropy
        } else {
            Self::Hinge
        }
    }
}

/// `-log q_p(y|x)` with `q_p(y|x)` floored at [`PROB_FLOOR`]. Increments
/// `floor_hits` when the floor is used.
pub fn cross_entropy_pvp_loss(
    table: &ScoreTable,
    y: LabelId,
    floor_hits: &mut usize,
) -> Result<f64> {
    if !table.normalized {
        return Err(config_err("cross entropy needs a normalized score table"));
    }
    let q = table
        .score(y)
        .ok_or_else(|| config_err(format!("label {y} not a candidate")))?;
    if q < PROB_FLOOR {
        *floor_hits += 1;
        return Ok(-PROB_FLOOR.ln());
    }
    Ok(-q.ln())
}

/// `Σ_{y' ≠ y} max(0, 1 − log q̃(y) + log q̃(y'))`. The `y' = y` term of the
/// full sum is the constant 1 and is left out.
pub fn hinge_loss(table: &ScoreTable, y: LabelId) -> Result<f64> {
    let iy = table
        .position(y)
        .ok_or_else(|| config_err(format!("label {y} not a candidate")))?;
    let log = |q: f64| q.max(PROB_FLOOR).ln();
    let sy = log(table.scores[iy]);
    Ok(table
        .scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != iy)
        .map(|(_, &q)| (1.0 - sy + log(q)).max(0.0))
        .sum())
}

/// Teacher distribution softened by `temperature`: `p_i^{1/T}` renormalized.
pub fn soften(teacher: &[f64], temperature: f64) -> Vec<f64> {
    let mut logits: Vec<f64> = teacher
        .iter()
        .map(|&p| {
            if p > 0.0 {
                p.ln() / temperature
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    softmax_in_place(&mut logits);
    logits
}

/// `T² · CE(soften(teacher), softmax(student / T))`.
pub fn distill_loss(student_logits: &[f64], teacher: &[f64], temperature: f64) -> Result<f64> {
    if student_logits.len() != teacher.len() {
        return Err(PetError::ArityMismatch(student_logits.len(), teacher.len()));
    }
    let target = soften(teacher, temperature);
    let mut lp: Vec<f64> = student_logits.iter().map(|v| v / temperature).collect();
    log_softmax_in_place(&mut lp);
    let ce: f64 = target
        .iter()
        .zip(&lp)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, l)| -t * l)
        .sum();
    Ok(temperature * temperature * ce)
}

/// PVP loss for one labeled example, recorded on `tape`.
pub fn pvp_loss_var(
    model: &TinyTransformer,
    tape: &mut Tape<'_>,
    scorer: &PvpScorer<'_>,
    x: &Example,
    y: LabelId,
    kind: LossKind,
) -> Result<Var> {
    let labels = x.candidate_labels(scorer.num_labels);
    let iy = labels
        .iter()
        .position(|&l| l == y)
        .ok_or_else(|| config_err(format!("example {}: label {y} not a candidate", x.id)))?;
    match kind {
        LossKind::CrossEntropy => {
            let mut idx = Vec::with_capacity(labels.len());
            for &l in &labels {
                let t = scorer.pvp.verbalizer.tokens(l)?;
                if t.len() != 1 {
                    return Err(PetError::MultiTokenVerbalization(l));
                }
                idx.push((0, t[0] as usize));
            }
            let z = scorer.cloze(x, 1)?;
            let logits = model.masked_logits_var(tape, &z)?;
            let picked = tape.pick(logits, &idx);
            let logq = tape.log_softmax_rows(picked);
            let mut w = vec![0.0; labels.len()];
            w[iy] = -1.0;
            Ok(tape.weighted_sum(logq, &w))
        }
        LossKind::Hinge => {
            let l = max_verbalization_len(scorer.pvp, x, scorer.num_labels)?;
            let z = scorer.cloze(x, l)?;
            let logits = model.masked_logits_var(tape, &z)?;
            let logp = tape.log_softmax_rows(logits);
            let mut idx = Vec::new();
            let mut spans = Vec::with_capacity(labels.len());
            for &lab in &labels {
                let t = scorer.pvp.verbalizer.tokens(lab)?;
                spans.push((idx.len(), t.len()));
                idx.extend(t.iter().enumerate().map(|(i, &tok)| (i, tok as usize)));
            }
            let picked = tape.pick(logp, &idx);
            let score = |tape: &mut Tape<'_>, (start, len): (usize, usize)| {
                let mut w = vec![0.0; idx.len()];
                w[start..start + len].iter_mut().for_each(|v| *v = 1.0);
                tape.weighted_sum(picked, &w)
            };
            let sy = score(tape, spans[iy]);
            let mut total: Option<Var> = None;
            for (i, &span) in spans.iter().enumerate() {
                if i == iy {
                    continue;
                }
                let so = score(tape, span);
                let diff = tape.sub(so, sy);
                let margin = tape.add_scalar(diff, 1.0);
                let term = tape.relu(margin);
                total = Some(match total {
                    Some(t) => tape.add(t, term),
                    None => term,
                });
            }
            Ok(match total {
                Some(t) => t,
                None => {
                    // a single candidate leaves nothing to rank against
                    tape.scale(sy, 0.0)
                }
            })
        }
    }
}

/// Free-form training loss: the target tokens followed by `extra_pads`
/// `PAD` targets, all predicted from one pass over the pattern with that
/// many masks.
pub fn free_form_loss_var(
    model: &TinyTransformer,
    tape: &mut Tape<'_>,
    scorer: &PvpScorer<'_>,
    x: &Example,
    target: &[TokenId],
    extra_pads: usize,
) -> Result<Var> {
    if target.is_empty() {
        return Err(config_err(format!(
            "example {}: empty free-form target",
            x.id
        )));
    }
    let k = target.len() + extra_pads;
    let z = scorer.cloze(x, k)?;
    let logits = model.masked_logits_var(tape, &z)?;
    let logp = tape.log_softmax_rows(logits);
    let pad = scorer.vocab.pad_id();
    let idx: Vec<(usize, usize)> = target
        .iter()
        .copied()
        .chain(std::iter::repeat_n(pad, extra_pads))
        .enumerate()
        .map(|(i, t)| (i, t as usize))
        .collect();
    let picked = tape.pick(logp, &idx);
    Ok(tape.weighted_sum(picked, &vec![-1.0; k]))
}

/// Distillation loss on `[1, n]` student logits.
pub fn distill_loss_var(
    tape: &mut Tape<'_>,
    logits: Var,
    teacher: &[f64],
    temperature: f64,
) -> Result<Var> {
    let n = tape.value(logits).cols;
    if n != teacher.len() {
        return Err(PetError::ArityMismatch(n, teacher.len()));
    }
    let target = soften(teacher, temperature);
    let scaled = tape.scale(logits, 1.0 / temperature);
    let lp = tape.log_softmax_rows(scaled);
    let w: Vec<f64> = target
        .iter()
        .map(|t| -t * temperature * temperature)
        .collect();
    Ok(tape.weighted_sum(lp, &w))
}

/// Runs `build` on a fresh tape, backpropagates `scale · loss` into
/// `grads`, and returns the unscaled loss.
pub fn accumulate<F>(
    model: &TinyTransformer,
    grads: &mut Grads,
    scale: f64,
    build: F,
) -> Result<f64>
where
    F: FnOnce(&TinyTransformer, &mut Tape<'_>) -> Result<Var>,
{
    let mut tape = model.tape();
    let loss = build(model, &mut tape)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(PetError::NonFiniteLoss {
            loss: value,
            step: model.optimizer().step as usize,
            detail: "loss evaluation".into(),
        });
    }
    let scaled = tape.scale(loss, scale);
    tape.backward(scaled, grads);
    Ok(value)
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// Times a probability hit [`PROB_FLOOR`].
    pub floor_hits: usize,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,loss,grad_norm")?;
        for r in &self.steps {
            writeln!(f, "{},{},{}", r.step, r.loss, r.grad_norm)?;
        }
        f.flush()?;
        Ok(())
    }

    /// Mean loss over `steps[range]`.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.steps[range];
        s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64
    }
}

/// Endless example order with a reshuffle at every epoch boundary.
pub struct EpochCycler<R> {
    order: Vec<usize>,
    cursor: usize,
    rng: R,
}

impl<R: RngCore> EpochCycler<R> {
    pub fn new(n: usize, mut rng: R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut rng, &mut order);
        Self {
            order,
            cursor: 0,
            rng,
        }
    }

    pub fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            shuffle(&mut self.rng, &mut self.order);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Label-preserving training-time input perturbations.
pub fn augment(x: &Example, spec: &TaskSpec, rng: &mut impl RngCore) -> Example {
    let mut out = x.clone();
    if let Some([a, b]) = &spec.swap_fields {
        if unit_f64(rng) < 0.5 {
            if let (Some(va), Some(vb)) = (x.fields.get(a), x.fields.get(b)) {
                out.fields.insert(a.clone(), vb.clone());
                out.fields.insert(b.clone(), va.clone());
            }
        }
    }
    if spec.shuffle_candidates {
        if let Some(c) = &mut out.candidates {
            if c.len() == 2 {
                if unit_f64(rng) < 0.5 {
                    c.swap(0, 1);
                }
            } else {
                shuffle(rng, c);
            }
        }
    }
    out
}

fn effective_max_len(cfg: &TrainConfig, spec: &TaskSpec, model: &TinyTransformer) -> usize {
    cfg.max_seq_length
        .min(spec.max_seq_length)
        .min(model.config().max_positions)
}

/// Finetunes `model` on the labeled `train` set through one PVP. Each
/// optimizer step averages the loss over `batch_size ×
/// gradient_accumulation_steps` examples drawn by epoch cycling.
pub fn finetune(
    mut model: TinyTransformer,
    pvp: &crate::pvp::Pvp,
    vocab: &Vocabulary,
    spec: &TaskSpec,
    train: &[Example],
    cfg: &TrainConfig,
    kind: Option<LossKind>,
) -> Result<(TinyTransformer, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(PetError::EmptyTrainSet);
    }
    let max_len = effective_max_len(cfg, spec, &model);
    let scorer = PvpScorer::new(pvp, vocab, spec.num_labels(), max_len);
    let kind = kind.unwrap_or_else(|| LossKind::for_scorer(&scorer));
    let free_form = spec.free_form.as_ref();
    for x in train {
        if free_form.is_none() && x.label.is_none() {
            return Err(config_err(format!(
                "training example {} has no label",
                x.id
            )));
        }
    }
    let adam = cfg.adam();
    let mut cycler = EpochCycler::new(train.len(), substream(cfg.seed, "finetune-order"));
    let mut aug_rng = substream(cfg.seed, "augment");
    let mut log = TrainLog::default();
    let per_step = cfg.effective_batch();
    let scale = 1.0 / per_step as f64;
    for step in 0..cfg.max_steps {
        let mut grads = model.zero_grads();
        let mut total = 0.0;
        for _ in 0..per_step {
            let x = augment(&train[cycler.next_index()], spec, &mut aug_rng);
            let loss = match free_form {
                Some(ff) => {
                    let target = vocab.encode(x.field(&ff.target_field)?);
                    let pads = bounded(&mut aug_rng, ff.extra_masks + 1);
                    accumulate(&model, &mut grads, scale, |m, t| {
                        free_form_loss_var(m, t, &scorer, &x, &target, pads)
                    })?
                }
                None => {
                    let y = x.label.expect("checked above");
                    accumulate(&model, &mut grads, scale, |m, t| {
                        pvp_loss_var(m, t, &scorer, &x, y, kind)
                    })?
                }
            };
            if kind == LossKind::CrossEntropy && loss > -PROB_FLOOR.ln() {
                log.floor_hits += 1;
            }
            total += loss * scale;
        }
        let grad_norm = model.apply_update(&mut grads, &adam).map_err(|e| match e {
            PetError::NonFiniteLoss { detail, .. } => PetError::NonFiniteLoss {
                loss: total,
                step,
                detail: format!("pvp {}: {detail}", pvp.name),
            },
            other => other,
        })?;
        debug!(
            "{} step {step} loss {total:.6} grad_norm {grad_norm:.4}",
            pvp.name
        );
        log.steps.push(StepRecord {
            step,
            loss: total,
            grad_norm,
        });
    }
    if log.floor_hits > 0 {
        warn!(
            "{}: probability floor hit {} times",
            pvp.name, log.floor_hits
        );
    }
    Ok((model, log))
}

/// Classifier input: the task fields in order, truncated longest-first and
/// joined by the `|` token when the vocabulary has one.
pub fn classifier_input(
    vocab: &Vocabulary,
    spec: &TaskSpec,
    x: &Example,
    max_len: usize,
) -> Result<TokenSequence> {
    let sep = vocab.id("|");
    let mut texts = Vec::with_capacity(spec.fields.len());
    for f in &spec.fields {
        texts.push(vocab.encode(x.field(f)?));
    }
    let seps = if sep.is_some() {
        texts.len().saturating_sub(1)
    } else {
        0
    };
    if seps >= max_len {
        return Err(PetError::UnfittablePattern {
            needed: seps + 1,
            max: max_len,
        });
    }
    let weights = vec![1; texts.len()];
    truncate_longest_first(&mut texts, &weights, max_len - seps);
    let mut ids = Vec::with_capacity(max_len);
    for (i, t) in texts.iter().enumerate() {
        if i > 0 {
            if let Some(s) = sep {
                ids.push(s);
            }
        }
        ids.extend_from_slice(t);
    }
    if ids.is_empty() {
        ids.push(vocab.unk_id());
    }
    Ok(TokenSequence::new(ids, vocab.mask_id()))
}

/// Trains a classification head (and backbone) to match per-example target
/// distributions under [`distill_loss`]. One-hot targets with temperature 1
/// give ordinary supervised training.
pub fn train_classifier(
    mut model: TinyTransformer,
    inputs: &[TokenSequence],
    targets: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<(TinyTransformer, TrainLog)> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(PetError::EmptyTrainSet);
    }
    if inputs.len() != targets.len() {
        return Err(PetError::ArityMismatch(inputs.len(), targets.len()));
    }
    let n_labels = model.head().ok_or(PetError::NoClassifierHead)?.num_labels();
    if let Some(bad) = targets.iter().find(|t| t.len() != n_labels) {
        return Err(PetError::ArityMismatch(n_labels, bad.len()));
    }
    let adam = cfg.adam();
    let temperature = cfg.distillation_temperature;
    let mut cycler = EpochCycler::new(inputs.len(), substream(cfg.seed, "classifier-order"));
    let per_step = cfg.effective_batch();
    let scale = 1.0 / per_step as f64;
    let mut log = TrainLog::default();
    for step in 0..cfg.max_steps {
        let mut grads = model.zero_grads();
        let mut total = 0.0;
        for _ in 0..per_step {
            let i = cycler.next_index();
            total += scale
                * accumulate(&model, &mut grads, scale, |m, t| {
                    let logits = m.classify_var(t, inputs[i].ids())?;
                    distill_loss_var(t, logits, &targets[i], temperature)
                })?;
        }
        let grad_norm = model.apply_update(&mut grads, &adam)?;
        debug!("classifier step {step} loss {total:.6}");
        log.steps.push(StepRecord {
            step,
            loss: total,
            grad_norm,
        });
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlm::TinyTransformerConfig;
    use crate::pvp::{Pattern, Pvp, Verbalizer};
    use crate::rng::seeded;
    use crate::vocab::DEFAULT_SPECIALS;

    fn table(scores: &[f64], normalized: bool) -> ScoreTable {
        ScoreTable {
            labels: (0..scores.len()).collect(),
            raw: scores.iter().map(|s| s.ln()).collect(),
            scores: scores.to_vec(),
            normalized,
        }
    }

    #[test]
    fn defaults_follow_the_reference_table() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 1e-5);
        assert_eq!(c.adam_epsilon, 1e-8);
        assert_eq!(c.gradient_accumulation_steps, 8);
        assert_eq!(c.batch_size, 2);
        assert_eq!(c.max_steps, 250);
        assert_eq!(c.max_seq_length, 256);
        assert_eq!(c.distillation_temperature, 2.0);
        assert_eq!(c.weight_decay, 0.01);
        assert_eq!(c.max_grad_norm, 1.0);
        assert_eq!(TrainConfig::classifier().max_steps, 5000);
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..c
        }
        .validate()
        .is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let mut hits = 0;
        assert_eq!(
            cross_entropy_pvp_loss(&table(&[1.0, 0.0], true), 0, &mut hits).unwrap(),
            0.0
        );
        let l = cross_entropy_pvp_loss(&table(&[0.5, 0.5], true), 1, &mut hits).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let u = 1.0 / 3.0;
        let l = cross_entropy_pvp_loss(&table(&[u, u, u], true), 2, &mut hits).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert_eq!(hits, 0);
        let l = cross_entropy_pvp_loss(&table(&[1.0, 0.0], true), 1, &mut hits).unwrap();
        assert_eq!(hits, 1);
        assert!((l - 1e12f64.ln()).abs() < 1e-9);
        assert!(cross_entropy_pvp_loss(&table(&[0.5, 0.5], false), 0, &mut hits).is_err());
    }

    #[test]
    fn hinge_values() {
        assert!((hinge_loss(&table(&[0.3, 0.3], false), 0).unwrap() - 1.0).abs() < 1e-12);
        let e = std::f64::consts::E;
        assert_eq!(hinge_loss(&table(&[e * e, 1.0], false), 0).unwrap(), 0.0);
        // gaps of 0.5 and 1.5 below y
        let t = table(&[1.0, (-0.5f64).exp(), (-1.5f64).exp()], false);
        assert!((hinge_loss(&t, 0).unwrap() - 0.5).abs() < 1e-12);
        // scale invariance
        let scaled = table(&[0.5, 0.5 * (-0.5f64).exp(), 0.5 * (-1.5f64).exp()], false);
        assert!((hinge_loss(&scaled, 0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn distillation_values() {
        let teacher = [0.2, 0.5, 0.3];
        let logits: Vec<f64> = teacher.iter().map(|p: &f64| p.ln()).collect();
        // student equal to the teacher gives the softened teacher entropy
        let t = 2.0;
        let soft = soften(&teacher, t);
        let entropy: f64 = -soft.iter().map(|p| p * p.ln()).sum::<f64>();
        let l = distill_loss(&logits, &teacher, t).unwrap();
        assert!((l - t * t * entropy).abs() < 1e-12);
        let other = distill_loss(&[0.0, 0.0, 0.0], &teacher, t).unwrap();
        assert!(other > l);
        // T = 1, one-hot teacher: ordinary cross entropy
        let ce = distill_loss(&[1.0, 2.0, 0.5], &[0.0, 1.0, 0.0], 1.0).unwrap();
        let mut lp = vec![1.0, 2.0, 0.5];
        log_softmax_in_place(&mut lp);
        assert!((ce + lp[1]).abs() < 1e-12);
        assert!(matches!(
            distill_loss(&[0.0], &teacher, 1.0),
            Err(PetError::ArityMismatch(1, 3))
        ));
    }

    fn toy() -> (Vocabulary, Pvp, Pvp, TaskSpec) {
        let v = Vocabulary::from_tokens(DEFAULT_SPECIALS.into_iter().chain([
            "good", "bad", "film", "it", "was", ".", "great", "terri", "·ble", "|",
        ]))
        .unwrap();
        let p = Pattern::parse("{text}. it was [MASK].", &v).unwrap();
        let single = Pvp::new(
            "s",
            p.clone(),
            Verbalizer::from_surface([(0, "bad"), (1, "great")], &v).unwrap(),
        );
        let multi = Pvp::new(
            "m",
            p,
            Verbalizer::from_surface([(0, "terrible"), (1, "great")], &v).unwrap(),
        );
        let spec = TaskSpec {
            name: "toy".into(),
            labels: vec!["neg".into(), "pos".into()],
            fields: vec!["text".into()],
            metrics: vec!["acc".into()],
            max_seq_length: 16,
            swap_fields: None,
            shuffle_candidates: false,
            free_form: None,
            positive_label: None,
        };
        (v, single, multi, spec)
    }

    fn small_model(v: &Vocabulary) -> TinyTransformer {
        TinyTransformer::new(
            TinyTransformerConfig {
                layers: 1,
                model_dim: 8,
                heads: 2,
                ff_dim: 16,
                max_positions: 16,
                seed: 5,
            },
            v.len(),
        )
        .unwrap()
    }

    #[test]
    fn tape_losses_match_scalar_references() {
        let (v, single, multi, _) = toy();
        let m = small_model(&v);
        let x = Example::new("1", [("text", "good film")]);
        for (pvp, kind) in [(&single, LossKind::CrossEntropy), (&multi, LossKind::Hinge)] {
            let sc = PvpScorer::new(pvp, &v, 2, 16);
            let mut g = m.zero_grads();
            let got =
                accumulate(&m, &mut g, 1.0, |m, t| pvp_loss_var(m, t, &sc, &x, 1, kind)).unwrap();
            let want = match kind {
                LossKind::CrossEntropy => {
                    cross_entropy_pvp_loss(&sc.score_single_token(&m, &x).unwrap(), 1, &mut 0)
                        .unwrap()
                }
                LossKind::Hinge => {
                    hinge_loss(&sc.score_parallel_training(&m, &x).unwrap(), 1).unwrap()
                }
            };
            assert!((got - want).abs() < 1e-12, "{kind:?}: {got} vs {want}");
        }
        let mc = m.clone().with_classifier_head(2).unwrap();
        let mut g = mc.zero_grads();
        let z = TokenSequence::new(vec![3, 4], 0);
        let got = accumulate(&mc, &mut g, 1.0, |m, t| {
            let l = m.classify_var(t, z.ids())?;
            distill_loss_var(t, l, &[0.3, 0.7], 2.0)
        })
        .unwrap();
        let want = distill_loss(&mc.forward_classify(&z).unwrap(), &[0.3, 0.7], 2.0).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn free_form_loss_counts_pads() {
        let (v, single, _, _) = toy();
        let m = small_model(&v);
        let sc = PvpScorer::new(&single, &v, 2, 16);
        let x = Example::new("1", [("text", "film")]);
        let target = v.encode("good");
        let z = sc.cloze(&x, 3).unwrap();
        let out = crate::mlm::MlmBackend::forward_masked(&m, &z).unwrap();
        let want = -(out.log_prob(0, target[0])
            + out.log_prob(1, v.pad_id())
            + out.log_prob(2, v.pad_id()));
        let mut g = m.zero_grads();
        let got = accumulate(&m, &mut g, 1.0, |m, t| {
            free_form_loss_var(m, t, &sc, &x, &target, 2)
        })
        .unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    fn train_set() -> Vec<Example> {
        (0..8)
            .map(|i| {
                let (text, y) = if i % 2 == 0 {
                    ("good film", 1)
                } else {
                    ("bad film", 0)
                };
                Example::new(i.to_string(), [("text", text)]).with_label(y)
            })
            .collect()
    }

    #[test]
    fn zero_steps_returns_input_unchanged() {
        let (v, single, _, spec) = toy();
        let m = small_model(&v);
        let cfg = TrainConfig {
            max_steps: 0,
            ..TrainConfig::default()
        };
        let (out, log) = finetune(m.clone(), &single, &v, &spec, &train_set(), &cfg, None).unwrap();
        assert_eq!(out, m);
        assert!(log.steps.is_empty());
        assert!(matches!(
            finetune(m, &single, &v, &spec, &[], &cfg, None),
            Err(PetError::EmptyTrainSet)
        ));
    }

    #[test]
    fn finetuning_reduces_loss_and_is_deterministic() {
        let (v, _, multi, spec) = toy();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            max_steps: 40,
            batch_size: 2,
            gradient_accumulation_steps: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        let (a, log) =
            finetune(small_model(&v), &multi, &v, &spec, &train_set(), &cfg, None).unwrap();
        assert!(
            log.mean_loss(30..40) < log.mean_loss(0..10),
            "{:?}",
            log.steps
        );
        let (b, _) =
            finetune(small_model(&v), &multi, &v, &spec, &train_set(), &cfg, None).unwrap();
        assert_eq!(
            crate::mlm::checkpoint::to_bytes(&a),
            crate::mlm::checkpoint::to_bytes(&b)
        );
    }

    #[test]
    fn augmentation_keeps_labels() {
        let spec = TaskSpec {
            swap_fields: Some(["a".into(), "b".into()]),
            shuffle_candidates: true,
            fields: vec!["a".into(), "b".into()],
            ..toy().3
        };
        let x = Example::new("1", [("a", "left"), ("b", "right")])
            .with_label(1)
            .with_candidates(vec![0, 1]);
        let mut rng = seeded(0);
        let mut swapped = 0;
        for _ in 0..200 {
            let y = augment(&x, &spec, &mut rng);
            assert_eq!(y.label, Some(1));
            let mut c = y.candidates.clone().unwrap();
            c.sort();
            assert_eq!(c, vec![0, 1]);
            if y.fields["a"] == "right" {
                swapped += 1;
            }
        }
        assert!((60..140).contains(&swapped));
    }

    #[test]
    fn classifier_learns_separable_targets() {
        let (v, _, _, spec) = toy();
        let m = small_model(&v).with_classifier_head(2).unwrap();
        let xs = train_set();
        let inputs: Vec<TokenSequence> = xs
            .iter()
            .map(|x| classifier_input(&v, &spec, x, 16).unwrap())
            .collect();
        let targets: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| {
                if x.label == Some(1) {
                    vec![0.0, 1.0]
                } else {
                    vec![1.0, 0.0]
                }
            })
            .collect();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            max_steps: 60,
            gradient_accumulation_steps: 2,
            ..TrainConfig::default()
        };
        let (m, _) = train_classifier(m, &inputs, &targets, &cfg).unwrap();
        let correct = inputs
            .iter()
            .zip(&targets)
            .filter(|(z, t)| {
                let l = m.forward_classify(z).unwrap();
                (l[1] > l[0]) == (t[1] > t[0])
            })
            .count();
        assert!(correct as f64 / inputs.len() as f64 >= 0.95);
    }

    #[test]
    fn classifier_input_joins_fields() {
        let (v, _, _, spec) = toy();
        let spec = TaskSpec {
            fields: vec!["text".into(), "other".into()],
            ..spec
        };
        let x = Example::new("1", [("text", "good film"), ("other", "bad")]);
        let z = classifier_input(&v, &spec, &x, 16).unwrap();
        assert_eq!(v.detokenize(z.ids()), "good film | bad");
        assert_eq!(z.num_masks(), 0);
        let short = classifier_input(&v, &spec, &x, 3).unwrap();
        assert_eq!(short.len(), 3);
    }
}
