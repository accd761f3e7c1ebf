//! Scoring labels with a PVP: single-token softmax scores, multi-token
//! autoregressive decoding, the single-pass training approximation, and
//! greedy free-form completion.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, PetError, Result};
use crate::mlm::{softmax_in_place, MlmBackend};
use crate::pvp::{apply_pattern, max_verbalization_len, Example, LabelId, Pvp};
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

/// Order in which the masks of a multi-token verbalization are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodingStrategy {
    /// Most confident slot first.
    MaxFirst,
    #[serde(rename = "ltr")]
    LeftToRight,
    /// All slots from one forward pass.
    Parallel,
}

impl DecodingStrategy {
    pub const ALL: [DecodingStrategy; 3] = [Self::MaxFirst, Self::LeftToRight, Self::Parallel];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::MaxFirst => "max-first",
            Self::LeftToRight => "ltr",
            Self::Parallel => "parallel",
        }
    }
}

impl fmt::Display for DecodingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecodingStrategy {
    type Err = PetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-first" | "max_first" => Ok(Self::MaxFirst),
            "ltr" | "left-to-right" | "left_to_right" => Ok(Self::LeftToRight),
            "parallel" => Ok(Self::Parallel),
            other => Err(config_err(format!("unknown decoding strategy {other:?}"))),
        }
    }
}

/// Per-label scores for one example.
///
/// `raw` holds `s_p`: logits for single-token scoring, log-probabilities
/// for multi-token scoring. `scores` holds `q_p` (or `q̃_p`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub labels: Vec<LabelId>,
    pub raw: Vec<f64>,
    pub scores: Vec<f64>,
    pub normalized: bool,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn position(&self, label: LabelId) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    pub fn score(&self, label: LabelId) -> Option<f64> {
        self.position(label).map(|i| self.scores[i])
    }

    pub fn raw_score(&self, label: LabelId) -> Option<f64> {
        self.position(label).map(|i| self.raw[i])
    }

    /// Label with the highest score; ties go to the earlier candidate.
    pub fn argmax(&self) -> LabelId {
        let mut best = 0;
        for i in 1..self.scores.len() {
            if self.scores[i] > self.scores[best] {
                best = i;
            }
        }
        self.labels[best]
    }

    /// Raw scores as the ensemble sees them: logits for normalized tables,
    /// `log q` otherwise.
    pub fn ensemble_logits(&self) -> &[f64] {
        &self.raw
    }
}

fn argmax_slot(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `log q(t | z)` under `strategy`. `t[i]` is the target for the `i`-th
/// mask of `z`. Returns 0 when `z` has no masks and `t` is empty.
pub fn decode_sequence_log_prob<B: MlmBackend + ?Sized>(
    model: &B,
    z: &TokenSequence,
    t: &[TokenId],
    strategy: DecodingStrategy,
) -> Result<f64> {
    if t.len() != z.num_masks() {
        return Err(PetError::TargetLength {
            expected: t.len(),
            masks: z.num_masks(),
        });
    }
    if t.is_empty() {
        return Ok(0.0);
    }
    if strategy == DecodingStrategy::Parallel {
        let out = model.forward_masked(z)?;
        return Ok(t
            .iter()
            .enumerate()
            .map(|(i, &tok)| out.log_prob(i, tok))
            .sum());
    }
    let mut z = z.clone();
    let mut remaining = t.to_vec();
    let mut total = 0.0;
    while !remaining.is_empty() {
        let out = model.forward_masked(&z)?;
        let j = match strategy {
            DecodingStrategy::LeftToRight => 0,
            _ => {
                let lp: Vec<f64> = remaining
                    .iter()
                    .enumerate()
                    .map(|(i, &tok)| out.log_prob(i, tok))
                    .collect();
                argmax_slot(&lp)
            }
        };
        total += out.log_prob(j, remaining[j]);
        z = z.fill_slot(j, remaining[j]);
        remaining.remove(j);
    }
    Ok(total)
}

/// `q(t | z)`; the empty target has probability 1.
pub fn decode_sequence_prob<B: MlmBackend + ?Sized>(
    model: &B,
    z: &TokenSequence,
    t: &[TokenId],
    strategy: DecodingStrategy,
) -> Result<f64> {
    decode_sequence_log_prob(model, z, t, strategy).map(f64::exp)
}

/// Binds a PVP to the vocabulary and task limits it is scored under.
#[derive(Clone, Copy, Debug)]
pub struct PvpScorer<'a> {
    pub pvp: &'a Pvp,
    pub vocab: &'a Vocabulary,
    pub num_labels: usize,
    pub max_seq_length: usize,
}

impl<'a> PvpScorer<'a> {
    pub fn new(
        pvp: &'a Pvp,
        vocab: &'a Vocabulary,
        num_labels: usize,
        max_seq_length: usize,
    ) -> Self {
        Self {
            pvp,
            vocab,
            num_labels,
            max_seq_length,
        }
    }

    /// `P^k(x)`.
    pub fn cloze(&self, x: &Example, k: usize) -> Result<TokenSequence> {
        apply_pattern(self.pvp, self.vocab, x, k, self.max_seq_length)
    }

    pub fn is_single_token(&self, x: &Example) -> Result<bool> {
        self.pvp.single_token_for(x, self.num_labels)
    }

    /// Softmax over `Y_x` of the verbalizer token logits at the single mask.
    pub fn score_single_token<B: MlmBackend + ?Sized>(
        &self,
        model: &B,
        x: &Example,
    ) -> Result<ScoreTable> {
        let labels = x.candidate_labels(self.num_labels);
        let mut tokens = Vec::with_capacity(labels.len());
        for &y in &labels {
            let v = self.pvp.verbalizer.tokens(y)?;
            if v.len() != 1 {
                return Err(PetError::MultiTokenVerbalization(y));
            }
            tokens.push(v[0]);
        }
        let z = self.cloze(x, 1)?;
        let out = model.forward_masked(&z)?;
        let raw: Vec<f64> = tokens.iter().map(|&t| out.logits(0)[t as usize]).collect();
        let mut scores = raw.clone();
        softmax_in_place(&mut scores);
        Ok(ScoreTable {
            labels,
            raw,
            scores,
            normalized: true,
        })
    }

    /// `q_p(y|x) = q(v(y) | P^{|v(y)|}(x))` decoded with `strategy`.
    pub fn score_multi_token<B: MlmBackend + ?Sized>(
        &self,
        model: &B,
        x: &Example,
        strategy: DecodingStrategy,
    ) -> Result<ScoreTable> {
        let labels = x.candidate_labels(self.num_labels);
        if labels.is_empty() {
            return Err(config_err(format!("example {} has no candidates", x.id)));
        }
        let mut raw = Vec::with_capacity(labels.len());
        for &y in &labels {
            let t = self.pvp.verbalizer.tokens(y)?;
            let z = self.cloze(x, t.len())?;
            raw.push(decode_sequence_log_prob(model, &z, t, strategy)?);
        }
        let scores = raw.iter().map(|v| v.exp()).collect();
        Ok(ScoreTable {
            labels,
            raw,
            scores,
            normalized: false,
        })
    }

    /// `q̃_p`: every candidate read off one pass over `P^{l(x)}(x)`,
    /// ignoring superfluous masks.
    pub fn score_parallel_training<B: MlmBackend + ?Sized>(
        &self,
        model: &B,
        x: &Example,
    ) -> Result<ScoreTable> {
        let labels = x.candidate_labels(self.num_labels);
        let l = max_verbalization_len(self.pvp, x, self.num_labels)?;
        let z = self.cloze(x, l)?;
        let out = model.forward_masked(&z)?;
        let mut raw = Vec::with_capacity(labels.len());
        for &y in &labels {
            let t = self.pvp.verbalizer.tokens(y)?;
            raw.push(
                t.iter()
                    .enumerate()
                    .map(|(i, &tok)| out.log_prob(i, tok))
                    .sum::<f64>(),
            );
        }
        let scores = raw.iter().map(|v| v.exp()).collect();
        Ok(ScoreTable {
            labels,
            raw,
            scores,
            normalized: false,
        })
    }

    /// Single-token scoring when every candidate of `x` is one token,
    /// multi-token decoding otherwise.
    pub fn score<B: MlmBackend + ?Sized>(
        &self,
        model: &B,
        x: &Example,
        strategy: DecodingStrategy,
    ) -> Result<ScoreTable> {
        if self.is_single_token(x)? {
            self.score_single_token(model, x)
        } else {
            self.score_multi_token(model, x, strategy)
        }
    }

    pub fn predict<B: MlmBackend + ?Sized>(
        &self,
        model: &B,
        x: &Example,
        strategy: DecodingStrategy,
    ) -> Result<LabelId> {
        Ok(self.score(model, x, strategy)?.argmax())
    }
}

/// Greedy completion of every mask in `z`: repeatedly fills the
/// (slot, token) pair with the highest probability. Returns the filled
/// tokens in position order with `PAD` removed. `MASK` is never emitted.
pub fn free_form_decode<B: MlmBackend + ?Sized>(
    model: &B,
    z: &TokenSequence,
    vocab: &Vocabulary,
) -> Result<Vec<TokenId>> {
    if z.num_masks() == 0 {
        return Err(PetError::NoMask);
    }
    let mut z = z.clone();
    let positions = z.mask_positions().to_vec();
    while z.num_masks() > 0 {
        let out = model.forward_masked(&z)?;
        let mut best = (0, 0, f64::NEG_INFINITY);
        for slot in 0..z.num_masks() {
            let mut lp = out.log_probs(slot);
            lp[vocab.mask_id() as usize] = f64::NEG_INFINITY;
            let tok = argmax_slot(&lp);
            if lp[tok] > best.2 {
                best = (slot, tok, lp[tok]);
            }
        }
        z = z.fill_slot(best.0, best.1 as TokenId);
    }
    Ok(positions
        .iter()
        .map(|&p| z.ids()[p])
        .filter(|&t| t != vocab.pad_id())
        .collect())
}

fn normalize_answer(s: &str) -> String {
    s.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whether a generated answer names `candidate`: after lowercasing and
/// stripping punctuation, one must contain the other.
pub fn free_form_matches(prediction: &str, candidate: &str) -> bool {
    let p = normalize_answer(prediction);
    let c = normalize_answer(candidate);
    if p.is_empty() || c.is_empty() {
        return false;
    }
    let (pw, cw) = (format!(" {p} "), format!(" {c} "));
    pw.contains(&cw) || cw.contains(&pw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlm::{CountingBackend, MaskLogits, TabularMlm};
    use crate::pvp::{Pattern, Verbalizer};
    use crate::rng::{bounded, seeded};
    use crate::vocab::DEFAULT_SPECIALS;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(DEFAULT_SPECIALS.into_iter().chain([
            "awful", "pizza", "!", ".", "it", "was", "great", "terri", "·ble", "a", "b",
        ]))
        .unwrap()
    }

    fn sentiment(v: &Vocabulary) -> Pvp {
        let pattern = Pattern::parse("{text}. It was [MASK].", v).unwrap();
        let verbalizer = Verbalizer::from_surface([(0, "great"), (1, "terrible")], v).unwrap();
        Pvp::new("s", pattern, verbalizer)
    }

    fn id(v: &Vocabulary, t: &str) -> TokenId {
        v.id(t).unwrap()
    }

    /// Direct recursive reading of the autoregressive definition, in
    /// probability space.
    fn oracle(m: &TabularMlm, z: &TokenSequence, t: &[TokenId], ltr: bool) -> f64 {
        if t.is_empty() {
            return 1.0;
        }
        let out = m.forward_masked(z).unwrap();
        let q: Vec<f64> = (0..t.len()).map(|i| out.probs(i)[t[i] as usize]).collect();
        let mut j = 0;
        if !ltr {
            for i in 1..q.len() {
                if q[i] > q[j] {
                    j = i;
                }
            }
        }
        let mut rest = t.to_vec();
        rest.remove(j);
        q[j] * oracle(m, &z.fill_slot(j, t[j]), &rest, ltr)
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in DecodingStrategy::ALL {
            assert_eq!(s.as_str().parse::<DecodingStrategy>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.as_str()));
        }
        assert!("beam".parse::<DecodingStrategy>().is_err());
    }

    #[test]
    fn empty_target_has_probability_one() {
        let m = TabularMlm::new(5, 8, 0);
        let z = TokenSequence::new(vec![3, 4], 0);
        for s in DecodingStrategy::ALL {
            assert_eq!(decode_sequence_prob(&m, &z, &[], s).unwrap(), 1.0);
        }
        assert!(decode_sequence_prob(&m, &z, &[3], DecodingStrategy::MaxFirst).is_err());
    }

    #[test]
    fn strategies_agree_for_one_mask() {
        let m = TabularMlm::new(6, 8, 4);
        let z = TokenSequence::new(vec![3, 0, 4], 0);
        let p = m.forward_masked(&z).unwrap().probs(0)[5];
        for s in DecodingStrategy::ALL {
            assert!((decode_sequence_prob(&m, &z, &[5], s).unwrap() - p).abs() < 1e-15);
        }
    }

    #[test]
    fn max_first_picks_the_confident_slot() {
        // q1(a)=0.9, q2(b)=0.4; after placing a, q(b)=0.7
        let v = vocab();
        let (a, b, mask) = (id(&v, "a"), id(&v, "b"), v.mask_id());
        let mut m = TabularMlm::new(v.len(), 16, 0);
        let z = TokenSequence::new(vec![mask, mask], mask);
        m.set_token_prob(z.ids(), 0, a, 0.9).unwrap();
        m.set_token_prob(z.ids(), 1, b, 0.4).unwrap();
        m.set_token_prob(&[a, mask], 0, b, 0.7).unwrap();
        m.set_token_prob(&[mask, b], 0, a, 0.2).unwrap();
        let p = decode_sequence_prob(&m, &z, &[a, b], DecodingStrategy::MaxFirst).unwrap();
        assert!((p - 0.63).abs() < 1e-12);
        let ltr = decode_sequence_prob(&m, &z, &[a, b], DecodingStrategy::LeftToRight).unwrap();
        assert!((ltr - 0.63).abs() < 1e-12);
        let par = decode_sequence_prob(&m, &z, &[a, b], DecodingStrategy::Parallel).unwrap();
        assert!((par - 0.36).abs() < 1e-12);
    }

    #[test]
    fn terrible_trace_matches_two_factors() {
        // z = P^2(x); the second slot is more confident, so ·ble goes first
        let v = vocab();
        let pvp = sentiment(&v);
        let x = Example::new("1", [("text", "Awful pizza!")]);
        let sc = PvpScorer::new(&pvp, &v, 2, 64);
        let z = sc.cloze(&x, 2).unwrap();
        let (terri, ble) = (id(&v, "terri"), id(&v, "·ble"));
        let mut m = TabularMlm::new(v.len(), 64, 1);
        m.set_token_prob(z.ids(), 0, terri, 0.3).unwrap();
        m.set_token_prob(z.ids(), 1, ble, 0.8).unwrap();
        let z1 = z.fill_slot(1, ble);
        m.set_token_prob(z1.ids(), 0, terri, 0.6).unwrap();
        let z_single = sc.cloze(&x, 1).unwrap();
        m.set_token_prob(z_single.ids(), 0, id(&v, "great"), 0.1)
            .unwrap();
        let table = sc
            .score_multi_token(&m, &x, DecodingStrategy::MaxFirst)
            .unwrap();
        assert!(!table.normalized);
        assert!((table.score(1).unwrap() - 0.8 * 0.6).abs() < 1e-12);
        assert!((table.score(0).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(table.argmax(), 1);
        assert!((table.raw_score(1).unwrap() - (0.48f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_token_scores_are_a_softmax() {
        let v = vocab();
        let pattern = Pattern::parse("{text}. It was [MASK].", &v).unwrap();
        let verb = Verbalizer::from_surface([(0, "great"), (1, "awful")], &v).unwrap();
        let pvp = Pvp::new("s", pattern, verb);
        let x = Example::new("1", [("text", "pizza")]);
        let sc = PvpScorer::new(&pvp, &v, 2, 64);
        let z = sc.cloze(&x, 1).unwrap();
        let mut m = TabularMlm::new(v.len(), 64, 0);
        let mut logits = vec![0.0; v.len()];
        logits[id(&v, "great") as usize] = 2f64.ln();
        m.set_logits(z.ids(), 0, logits.clone()).unwrap();
        let t = sc.score_single_token(&m, &x).unwrap();
        assert!(t.normalized);
        assert!((t.scores[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((t.scores[1] - 1.0 / 3.0).abs() < 1e-12);
        // a constant shift leaves everything unchanged
        m.set_logits(z.ids(), 0, logits.iter().map(|l| l + 17.0).collect())
            .unwrap();
        let shifted = sc.score_single_token(&m, &x).unwrap();
        for (a, b) in t.scores.iter().zip(&shifted.scores) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(sc.score_single_token(&m, &x).is_ok());
        let multi = sentiment(&v);
        let sc2 = PvpScorer::new(&multi, &v, 2, 64);
        assert!(matches!(
            sc2.score_single_token(&m, &x),
            Err(PetError::MultiTokenVerbalization(1))
        ));
    }

    #[test]
    fn parallel_training_uses_one_call() {
        let v = vocab();
        let pvp = sentiment(&v);
        let x = Example::new("1", [("text", "Awful pizza!")]);
        let sc = PvpScorer::new(&pvp, &v, 2, 64);
        let m = CountingBackend::new(TabularMlm::new(v.len(), 64, 9));
        let t = sc.score_parallel_training(&m, &x).unwrap();
        assert_eq!(m.calls(), 1);
        let z = sc.cloze(&x, 2).unwrap();
        let out = m.inner().forward_masked(&z).unwrap();
        let great = out.probs(0)[id(&v, "great") as usize];
        let terrible =
            out.probs(0)[id(&v, "terri") as usize] * out.probs(1)[id(&v, "·ble") as usize];
        assert!((t.score(0).unwrap() - great).abs() < 1e-14);
        assert!((t.score(1).unwrap() - terrible).abs() < 1e-14);
    }

    #[test]
    fn decoding_matches_recursive_oracle() {
        let mut rng = seeded(11);
        for case in 0..50 {
            let vsize = 6 + bounded(&mut rng, 6);
            let m = TabularMlm::new(vsize, 16, case);
            let k = 1 + bounded(&mut rng, 4);
            let mut ids: Vec<TokenId> = (0..3)
                .map(|_| 3 + bounded(&mut rng, vsize - 3) as TokenId)
                .collect();
            let at = bounded(&mut rng, ids.len() + 1);
            for _ in 0..k {
                ids.insert(at, 0);
            }
            let z = TokenSequence::new(ids, 0);
            let t: Vec<TokenId> = (0..k)
                .map(|_| 3 + bounded(&mut rng, vsize - 3) as TokenId)
                .collect();
            for (s, ltr) in [
                (DecodingStrategy::MaxFirst, false),
                (DecodingStrategy::LeftToRight, true),
            ] {
                let got = decode_sequence_log_prob(&m, &z, &t, s).unwrap();
                let want = oracle(&m, &z, &t, ltr).ln();
                assert!(
                    (got - want).abs() < 1e-12,
                    "case {case} {s}: {got} vs {want}"
                );
            }
        }
    }

    /// Fixed distributions per (number of filled slots, slot).
    struct Scripted {
        rows: Vec<Vec<Vec<f64>>>,
    }

    impl MlmBackend for Scripted {
        fn vocab_size(&self) -> usize {
            4
        }

        fn max_positions(&self) -> usize {
            8
        }

        fn forward_masked(&self, z: &TokenSequence) -> Result<MaskLogits> {
            let filled = 2 - z.num_masks();
            let rows = (0..z.num_masks())
                .map(|s| {
                    // slot index in the original two-slot layout
                    let orig = if z.num_masks() == 2 {
                        s
                    } else if z.ids()[1] == 0 {
                        1
                    } else {
                        0
                    };
                    self.rows[filled][orig]
                        .iter()
                        .map(|p: &f64| p.ln())
                        .collect()
                })
                .collect();
            Ok(MaskLogits::new(rows))
        }
    }

    #[test]
    fn free_form_greedy_trace() {
        // tokens: 0 MASK, 1 PAD, 2 UNK, 3 y; step 1 best is slot 1 token y (0.7)
        let v = Vocabulary::from_tokens(DEFAULT_SPECIALS.into_iter().chain(["y"])).unwrap();
        let m = Scripted {
            rows: vec![
                vec![vec![1e-9, 0.2, 0.5, 0.3], vec![1e-9, 0.1, 0.2, 0.7]],
                vec![vec![1e-9, 0.6, 0.3, 0.1], vec![1e-9, 0.6, 0.3, 0.1]],
            ],
        };
        let z = TokenSequence::new(vec![0, 0], 0);
        // slot 0 then resolves to PAD, which is stripped
        assert_eq!(free_form_decode(&m, &z, &v).unwrap(), vec![3]);
        let all_pad = Scripted {
            rows: vec![vec![vec![1e-9, 0.9, 0.05, 0.05]; 2]; 2],
        };
        assert!(free_form_decode(&all_pad, &z, &v).unwrap().is_empty());
    }

    #[test]
    fn answer_matching() {
        assert!(free_form_matches("The Dog.", "dog"));
        assert!(free_form_matches("dog", "the big dog"));
        assert!(!free_form_matches("do", "dog"));
        assert!(!free_form_matches("", "dog"));
    }
}
