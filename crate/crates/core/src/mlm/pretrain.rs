//! Masked-language-model pretraining for the tiny transformer.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, PetError, Result};
use crate::mlm::{AdamConfig, TinyTransformer};
use crate::rng::{bounded, shuffle, substream, unit_f64};
use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            mask_prob: 0.15,
            adam: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

/// Picks mask positions: each position with probability `p`, at least one.
pub fn choose_mask_positions(rng: &mut impl RngCore, len: usize, p: f64) -> Vec<usize> {
    let mut out: Vec<usize> = (0..len).filter(|_| unit_f64(rng) < p).collect();
    if out.is_empty() && len > 0 {
        out.push(bounded(rng, len));
    }
    out
}

/// Mean masked-token cross entropy of one sequence and its gradient.
fn sequence_loss(
    model: &TinyTransformer,
    ids: &[TokenId],
    positions: &[usize],
    mask_id: TokenId,
    grads: &mut crate::mlm::Grads,
    scale: f64,
) -> Result<f64> {
    let mut input = ids.to_vec();
    for &p in positions {
        input[p] = mask_id;
    }
    let mut tape = model.tape();
    let hidden = model.encode(&mut tape, &input)?;
    let logits = model.mlm_logits(&mut tape, hidden, positions);
    let logp = tape.log_softmax_rows(logits);
    let targets: Vec<(usize, usize)> = positions
        .iter()
        .enumerate()
        .map(|(r, &p)| (r, ids[p] as usize))
        .collect();
    let picked = tape.pick(logp, &targets);
    let w = vec![-scale / positions.len() as f64; positions.len()];
    let loss = tape.weighted_sum(picked, &w);
    tape.backward(loss, grads);
    Ok(tape.scalar(loss) / scale)
}

/// Runs `cfg.steps` optimizer steps of masked-token prediction over
/// `corpus`, cycling with per-epoch reshuffles. Returns the per-step mean
/// loss.
pub fn pretrain_mlm(
    model: &mut TinyTransformer,
    corpus: &[Vec<TokenId>],
    mask_id: TokenId,
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(PetError::EmptyTrainSet);
    }
    if cfg.batch_size == 0 {
        return Err(config_err("batch_size must be positive"));
    }
    let mut order_rng = substream(cfg.seed, "pretrain-order");
    let mut mask_rng = substream(cfg.seed, "pretrain-mask");
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    shuffle(&mut order_rng, &mut order);
    let mut cursor = 0;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads = model.zero_grads();
        let mut total = 0.0;
        let scale = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                shuffle(&mut order_rng, &mut order);
                cursor = 0;
            }
            let ids = &corpus[order[cursor]];
            cursor += 1;
            let positions = choose_mask_positions(&mut mask_rng, ids.len(), cfg.mask_prob);
            total += sequence_loss(model, ids, &positions, mask_id, &mut grads, scale)? * scale;
        }
        if !total.is_finite() {
            return Err(PetError::NonFiniteLoss {
                loss: total,
                step,
                detail: "mlm pretraining".into(),
            });
        }
        model.apply_update(&mut grads, &cfg.adam)?;
        history.push(total);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlm::{MlmBackend, TinyTransformerConfig};
    use crate::rng::seeded;
    use crate::vocab::TokenSequence;

    #[test]
    fn mask_positions_nonempty() {
        let mut r = seeded(1);
        for len in 1..10 {
            let p = choose_mask_positions(&mut r, len, 0.0);
            assert_eq!(p.len(), 1);
            assert!(p[0] < len);
        }
    }

    #[test]
    fn learns_a_deterministic_pattern() {
        // token 3 is always followed by 4; 5 by 6
        let corpus: Vec<Vec<TokenId>> = (0..20)
            .map(|i| {
                if i % 2 == 0 {
                    vec![3, 4, 7]
                } else {
                    vec![5, 6, 7]
                }
            })
            .collect();
        let cfg = TinyTransformerConfig {
            layers: 1,
            model_dim: 16,
            heads: 2,
            ff_dim: 32,
            max_positions: 8,
            seed: 1,
        };
        let mut model = TinyTransformer::new(cfg, 8).unwrap();
        let pcfg = PretrainConfig {
            steps: 150,
            batch_size: 8,
            mask_prob: 0.3,
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            seed: 2,
        };
        let hist = pretrain_mlm(&mut model, &corpus, 0, &pcfg).unwrap();
        let head: f64 = hist[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = hist[hist.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head * 0.5, "loss {head} -> {tail}");
        let z = TokenSequence::new(vec![3, 0, 7], 0);
        let p = model.forward_masked(&z).unwrap().probs(0);
        assert!(p[4] > 0.5, "p(4) = {}", p[4]);
    }
}
