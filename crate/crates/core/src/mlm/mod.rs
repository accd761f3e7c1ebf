//! Masked language models: the backend abstraction, an exact tabular
//! oracle, and a tiny trainable transformer.

pub mod autograd;
pub mod checkpoint;
pub mod optim;
pub mod pretrain;
mod tabular;
pub mod tensor;
mod transformer;

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{PetError, Result};
use crate::vocab::{TokenId, TokenSequence};

pub use autograd::{log_softmax_in_place, softmax_in_place, Grads, Tape, Var};
pub use optim::{AdamConfig, AdamState};
pub use tabular::TabularMlm;
pub use tensor::Tensor;
pub use transformer::{ClassifierHead, ParamSet, TinyTransformer, TinyTransformerConfig};

/// Raw scores `s_M^k` for every mask slot, in `mask_positions` order.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    rows: Vec<Vec<f64>>,
}

impl MaskLogits {
    pub fn new(rows: Vec<Vec<f64>>) -> Self {
        Self { rows }
    }

    pub fn num_slots(&self) -> usize {
        self.rows.len()
    }

    pub fn logits(&self, slot: usize) -> &[f64] {
        &self.rows[slot]
    }

    /// `q_M^k(· | z)` for slot `k`.
    pub fn probs(&self, slot: usize) -> Vec<f64> {
        let mut row = self.rows[slot].clone();
        softmax_in_place(&mut row);
        row
    }

    pub fn log_probs(&self, slot: usize) -> Vec<f64> {
        let mut row = self.rows[slot].clone();
        log_softmax_in_place(&mut row);
        row
    }

    pub fn log_prob(&self, slot: usize, token: TokenId) -> f64 {
        let row = &self.rows[slot];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row[token as usize] - lse
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(|v| v.is_finite()))
    }
}

/// Anything that yields per-mask-slot logits for a token sequence.
pub trait MlmBackend: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn max_positions(&self) -> usize;

    /// Logits for every mask slot of `z` from a single model invocation.
    fn forward_masked(&self, z: &TokenSequence) -> Result<MaskLogits>;
}

impl<B: MlmBackend + ?Sized> MlmBackend for &B {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn max_positions(&self) -> usize {
        (**self).max_positions()
    }

    fn forward_masked(&self, z: &TokenSequence) -> Result<MaskLogits> {
        (**self).forward_masked(z)
    }
}

pub(crate) fn check_input(z: &TokenSequence, max_positions: usize) -> Result<()> {
    if z.len() > max_positions {
        return Err(PetError::SequenceTooLong {
            len: z.len(),
            max: max_positions,
        });
    }
    if z.num_masks() == 0 {
        return Err(PetError::NoMask);
    }
    Ok(())
}

/// Wraps a backend and counts forward invocations.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: MlmBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: MlmBackend> MlmBackend for CountingBackend<B> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn max_positions(&self) -> usize {
        self.inner.max_positions()
    }

    fn forward_masked(&self, z: &TokenSequence) -> Result<MaskLogits> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.forward_masked(z)
    }
}
