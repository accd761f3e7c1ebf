use std::collections::HashMap;

use crate::error::{config_err, Result};
use crate::mlm::{check_input, MaskLogits, MlmBackend};
use crate::rng::{fnv1a64, seeded, splitmix64, unit_f64};
use crate::vocab::{TokenId, TokenSequence};

/// Logit used for zero-probability entries: finite, but `exp` underflows
/// to exactly zero after normalization.
const ZERO_PROB_LOGIT: f64 = -1.0e3;

/// Exact lookup-table MLM.
///
/// Distributions are keyed on the full token sequence and the mask slot
/// index. Keys without a stored entry get logits drawn uniformly from
/// `[-spread, spread]` by a generator seeded from `(seed, key)`, so every
/// query is replayable without training.
#[derive(Clone, Debug)]
pub struct TabularMlm {
    vocab_size: usize,
    max_positions: usize,
    seed: u64,
    spread: f64,
    table: HashMap<(Vec<TokenId>, usize), Vec<f64>>,
}

impl TabularMlm {
    pub fn new(vocab_size: usize, max_positions: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            max_positions,
            seed,
            spread: 3.0,
            table: HashMap::new(),
        }
    }

    pub fn with_spread(mut self, spread: f64) -> Self {
        self.spread = spread;
        self
    }

    pub fn set_logits(&mut self, ids: &[TokenId], slot: usize, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.vocab_size || logits.iter().any(|v| !v.is_finite()) {
            return Err(config_err(
                "tabular logits must be finite and cover the vocabulary",
            ));
        }
        self.table.insert((ids.to_vec(), slot), logits);
        Ok(())
    }

    /// Stores a probability distribution (need not be normalized).
    pub fn set_distribution(&mut self, ids: &[TokenId], slot: usize, probs: &[f64]) -> Result<()> {
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) || probs.iter().all(|&p| p == 0.0) {
            return Err(config_err("invalid tabular distribution"));
        }
        let logits = probs
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { ZERO_PROB_LOGIT })
            .collect();
        self.set_logits(ids, slot, logits)
    }

    /// Gives `token` probability `p` at `slot`, spreading `1 - p` evenly over
    /// the other tokens.
    pub fn set_token_prob(
        &mut self,
        ids: &[TokenId],
        slot: usize,
        token: TokenId,
        p: f64,
    ) -> Result<()> {
        let rest = (1.0 - p) / (self.vocab_size - 1) as f64;
        let mut probs = vec![rest; self.vocab_size];
        probs[token as usize] = p;
        self.set_distribution(ids, slot, &probs)
    }

    pub fn stored(&self, ids: &[TokenId], slot: usize) -> Option<&[f64]> {
        self.table.get(&(ids.to_vec(), slot)).map(Vec::as_slice)
    }

    fn fill(&self, ids: &[TokenId], slot: usize) -> Vec<f64> {
        let mut bytes = Vec::with_capacity(ids.len() * 4 + 8);
        for id in ids {
            bytes.extend_from_slice(&id.to_le_bytes());
        }
        bytes.extend_from_slice(&(slot as u64).to_le_bytes());
        let mut rng = seeded(splitmix64(self.seed) ^ fnv1a64(&bytes));
        (0..self.vocab_size)
            .map(|_| (2.0 * unit_f64(&mut rng) - 1.0) * self.spread)
            .collect()
    }
}

impl MlmBackend for TabularMlm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_positions(&self) -> usize {
        self.max_positions
    }

    fn forward_masked(&self, z: &TokenSequence) -> Result<MaskLogits> {
        check_input(z, self.max_positions)?;
        let rows = (0..z.num_masks())
            .map(|slot| match self.stored(z.ids(), slot) {
                Some(l) => l.to_vec(),
                None => self.fill(z.ids(), slot),
            })
            .collect();
        Ok(MaskLogits::new(rows))
    }
}
