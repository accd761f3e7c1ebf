use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, PetError, Result};
use crate::mlm::autograd::{Grads, Tape, Var};
use crate::mlm::optim::{self, AdamConfig, AdamState};
use crate::mlm::tensor::Tensor;
use crate::mlm::{check_input, MaskLogits, MlmBackend};
use crate::rng::substream;
use crate::vocab::{TokenId, TokenSequence};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyTransformerConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for TinyTransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            model_dim: 64,
            heads: 4,
            ff_dim: 128,
            max_positions: 128,
            seed: 0,
        }
    }
}

impl TinyTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.model_dim == 0
            || self.heads == 0
            || self.ff_dim == 0
            || self.max_positions == 0
        {
            return Err(config_err("transformer dimensions must be positive"));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(config_err(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Named parameter tensors in declaration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    /// Whether weight decay applies (matrices yes; biases and norms no).
    pub decay: Vec<bool>,
}

impl ParamSet {
    fn add(&mut self, name: String, t: Tensor, decay: bool) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.decay.push(decay);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIds>,
    lnf_g: usize,
    lnf_b: usize,
    out_bias: usize,
}

/// Sequence-classification head over the first-position representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierHead {
    weight: usize,
    bias: usize,
    num_labels: usize,
}

impl ClassifierHead {
    pub fn num_labels(&self) -> usize {
        self.num_labels
    }
}

/// Small bidirectional transformer encoder with an MLM output layer tied to
/// the input embeddings and an optional classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyTransformer {
    config: TinyTransformerConfig,
    vocab_size: usize,
    params: ParamSet,
    layout: Layout,
    head: Option<ClassifierHead>,
    optimizer: AdamState,
}

fn round_f32(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = f64::from(*v as f32));
}

impl TinyTransformer {
    pub fn new(config: TinyTransformerConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(config_err("vocabulary is empty"));
        }
        let mut rng = substream(config.seed, "init");
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = ParamSet::default();
        let mut random = |rows: usize, cols: usize, scale: f64| {
            let mut t = Tensor::from_vec(
                rows,
                cols,
                (0..rows * cols)
                    .map(|_| scale * normal.sample(&mut rng))
                    .collect(),
            );
            round_f32(&mut t);
            t
        };
        let d = config.model_dim;
        // Embeddings at INIT_STD, projections at 1/sqrt(fan_in).
        let proj = 1.0 / (INIT_STD * (d as f64).sqrt());
        let ff_out = 1.0 / (INIT_STD * (config.ff_dim as f64).sqrt());
        let ones = |n: usize| Tensor::from_vec(1, n, vec![1.0; n]);
        let zeros = |n: usize| Tensor::zeros(1, n);

        let tok_emb = params.add("tok_emb".into(), random(vocab_size, d, 1.0), true);
        let pos_emb = params.add("pos_emb".into(), random(config.max_positions, d, 1.0), true);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerIds {
                ln1_g: params.add(p("ln1.gain"), ones(d), false),
                ln1_b: params.add(p("ln1.bias"), zeros(d), false),
                wq: params.add(p("attn.wq"), random(d, d, proj), true),
                bq: params.add(p("attn.bq"), zeros(d), false),
                wk: params.add(p("attn.wk"), random(d, d, proj), true),
                bk: params.add(p("attn.bk"), zeros(d), false),
                wv: params.add(p("attn.wv"), random(d, d, proj), true),
                bv: params.add(p("attn.bv"), zeros(d), false),
                wo: params.add(p("attn.wo"), random(d, d, proj), true),
                bo: params.add(p("attn.bo"), zeros(d), false),
                ln2_g: params.add(p("ln2.gain"), ones(d), false),
                ln2_b: params.add(p("ln2.bias"), zeros(d), false),
                w1: params.add(p("ff.w1"), random(d, config.ff_dim, proj), true),
                b1: params.add(p("ff.b1"), zeros(config.ff_dim), false),
                w2: params.add(p("ff.w2"), random(config.ff_dim, d, ff_out), true),
                b2: params.add(p("ff.b2"), zeros(d), false),
            });
        }
        let lnf_g = params.add("lnf.gain".into(), ones(d), false);
        let lnf_b = params.add("lnf.bias".into(), zeros(d), false);
        let out_bias = params.add("mlm.bias".into(), zeros(vocab_size), false);
        let optimizer = AdamState::new(&params.tensors);
        Ok(Self {
            config,
            vocab_size,
            params,
            layout: Layout {
                tok_emb,
                pos_emb,
                layers,
                lnf_g,
                lnf_b,
                out_bias,
            },
            head: None,
            optimizer,
        })
    }

    /// Appends a zero-initialized classification head (replacing any
    /// existing head's role) and resets optimizer state.
    pub fn with_classifier_head(mut self, num_labels: usize) -> Result<Self> {
        if num_labels == 0 {
            return Err(config_err("classifier needs at least one label"));
        }
        if self.head.is_some() {
            return Err(config_err("model already has a classifier head"));
        }
        let d = self.config.model_dim;
        let weight = self
            .params
            .add("cls.weight".into(), Tensor::zeros(num_labels, d), true);
        let bias = self
            .params
            .add("cls.bias".into(), Tensor::zeros(1, num_labels), false);
        self.head = Some(ClassifierHead {
            weight,
            bias,
            num_labels,
        });
        self.reset_optimizer();
        Ok(self)
    }

    pub fn config(&self) -> &TinyTransformerConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable parameter access; values should stay `f32`-representable so
    /// checkpoints round-trip exactly.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn head(&self) -> Option<&ClassifierHead> {
        self.head.as_ref()
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    pub fn reset_optimizer(&mut self) {
        self.optimizer = AdamState::new(&self.params.tensors);
    }

    pub fn zero_grads(&self) -> Grads {
        Grads::zeros_like(&self.params.tensors)
    }

    pub fn tape(&self) -> Tape<'_> {
        Tape::new(&self.params.tensors)
    }

    /// Final hidden states `[len, model_dim]`.
    pub fn encode(&self, tape: &mut Tape<'_>, ids: &[TokenId]) -> Result<Var> {
        let n = ids.len();
        if n > self.config.max_positions {
            return Err(PetError::SequenceTooLong {
                len: n,
                max: self.config.max_positions,
            });
        }
        if n == 0 {
            return Err(config_err("cannot encode an empty sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(config_err(format!("token id {bad} outside vocabulary")));
        }
        let d = self.config.model_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let att_scale = 1.0 / (dh as f64).sqrt();
        let l = &self.layout;

        let tok = tape.param(l.tok_emb);
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let tok = tape.rows(tok, &idx);
        let pos = tape.param(l.pos_emb);
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.rows(pos, &positions);
        let mut x = tape.add(tok, pos);

        for ly in &l.layers {
            let (g, b) = (tape.param(ly.ln1_g), tape.param(ly.ln1_b));
            let h = tape.layer_norm(x, g, b);
            let q = linear(tape, h, ly.wq, ly.bq);
            let k = linear(tape, h, ly.wk, ly.bk);
            let v = linear(tape, h, ly.wv, ly.bv);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let scores = tape.matmul_bt(qh, kh);
                let scores = tape.scale(scores, att_scale);
                let att = tape.softmax_rows(scores);
                outs.push(tape.matmul(att, vh));
            }
            let cat = if heads == 1 {
                outs[0]
            } else {
                tape.concat_cols(&outs)
            };
            let a = linear(tape, cat, ly.wo, ly.bo);
            x = tape.add(x, a);

            let (g, b) = (tape.param(ly.ln2_g), tape.param(ly.ln2_b));
            let h = tape.layer_norm(x, g, b);
            let f = linear(tape, h, ly.w1, ly.b1);
            let f = tape.gelu(f);
            let f = linear(tape, f, ly.w2, ly.b2);
            x = tape.add(x, f);
        }
        let (g, b) = (tape.param(l.lnf_g), tape.param(l.lnf_b));
        Ok(tape.layer_norm(x, g, b))
    }

    /// MLM logits `[positions.len(), vocab]` at the given rows of `hidden`.
    pub fn mlm_logits(&self, tape: &mut Tape<'_>, hidden: Var, positions: &[usize]) -> Var {
        let h = tape.rows(hidden, positions);
        let emb = tape.param(self.layout.tok_emb);
        let logits = tape.matmul_bt(h, emb);
        let bias = tape.param(self.layout.out_bias);
        tape.add_row(logits, bias)
    }

    /// Mask-slot logits `[num_masks, vocab]` for `z`.
    pub fn masked_logits_var(&self, tape: &mut Tape<'_>, z: &TokenSequence) -> Result<Var> {
        check_input(z, self.config.max_positions)?;
        let hidden = self.encode(tape, z.ids())?;
        Ok(self.mlm_logits(tape, hidden, z.mask_positions()))
    }

    /// Label logits `[1, num_labels]` from the first-position representation.
    pub fn classify_var(&self, tape: &mut Tape<'_>, ids: &[TokenId]) -> Result<Var> {
        let head = self.head.ok_or(PetError::NoClassifierHead)?;
        let hidden = self.encode(tape, ids)?;
        let first = tape.rows(hidden, &[0]);
        let w = tape.param(head.weight);
        let logits = tape.matmul_bt(first, w);
        let b = tape.param(head.bias);
        Ok(tape.add_row(logits, b))
    }

    pub fn forward_classify(&self, z: &TokenSequence) -> Result<Vec<f64>> {
        let mut tape = self.tape();
        let v = self.classify_var(&mut tape, z.ids())?;
        Ok(tape.value(v).data.clone())
    }

    /// Clips `grads` to the configured global norm and applies one AdamW
    /// step. Returns the pre-clip gradient norm.
    pub fn apply_update(&mut self, grads: &mut Grads, cfg: &AdamConfig) -> Result<f64> {
        if !grads.is_finite() {
            return Err(PetError::NonFiniteLoss {
                loss: f64::NAN,
                step: self.optimizer.step as usize,
                detail: "non-finite gradient".into(),
            });
        }
        let norm = optim::clip_grad_norm(grads, cfg.max_grad_norm);
        optim::adam_step(&mut self.params, grads, &mut self.optimizer, cfg);
        Ok(norm)
    }

    pub(crate) fn from_parts(
        config: TinyTransformerConfig,
        vocab_size: usize,
        num_labels: usize,
        tensors: Vec<Tensor>,
        optimizer: AdamState,
    ) -> Result<Self> {
        let mut model = Self::new(config, vocab_size)?;
        if num_labels > 0 {
            model = model.with_classifier_head(num_labels)?;
        }
        if tensors.len() != model.params.len()
            || tensors
                .iter()
                .zip(&model.params.tensors)
                .any(|(a, b)| (a.rows, a.cols) != (b.rows, b.cols))
        {
            return Err(PetError::Checkpoint(
                "parameter shapes do not match config".into(),
            ));
        }
        if optimizer.m.len() != tensors.len() || optimizer.v.len() != tensors.len() {
            return Err(PetError::Checkpoint(
                "optimizer state does not match parameters".into(),
            ));
        }
        model.params.tensors = tensors;
        model.optimizer = optimizer;
        Ok(model)
    }
}

fn linear(tape: &mut Tape<'_>, x: Var, w: usize, b: usize) -> Var {
    let w = tape.param(w);
    let y = tape.matmul(x, w);
    let b = tape.param(b);
    tape.add_row(y, b)
}

impl MlmBackend for TinyTransformer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_positions(&self) -> usize {
        self.config.max_positions
    }

    fn forward_masked(&self, z: &TokenSequence) -> Result<MaskLogits> {
        let mut tape = self.tape();
        let v = self.masked_logits_var(&mut tape, z)?;
        let t = tape.value(v);
        let rows = (0..t.rows).map(|r| t.row(r).to_vec()).collect();
        Ok(MaskLogits::new(rows))
    }
}
