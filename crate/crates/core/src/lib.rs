//! Pattern-exploiting cloze training: patterns and verbalizers, masked
//! language model backends, scoring, fine-tuning, ensembling and iterative
//! self-training.

pub mod data;
pub mod error;
pub mod mlm;
pub mod pipeline;
pub mod pvp;
pub mod rng;
pub mod scoring;
pub mod training;
pub mod vocab;

pub use data::toy::{make_toy_task, ToyConfig, ToyKind, ToyTask};
pub use data::{evaluate, Dataset, MetricReport, Prediction};
pub use error::{PetError, Result};
pub use mlm::{MaskLogits, MlmBackend, TabularMlm, TinyTransformer, TinyTransformerConfig};
pub use pipeline::{
    ensemble_soft_label, run_ipet, run_pet, EnsembleMember, GenerationPlan, PetConfig, PetOutcome,
    SoftDataset, TaskContext, WeightMode,
};
pub use pvp::{Example, LabelId, Pattern, Pvp, TaskBundle, TaskSpec, Verbalizer};
pub use scoring::{DecodingStrategy, PvpScorer, ScoreTable};
pub use training::{LossKind, TrainConfig};
pub use vocab::{TokenId, TokenSequence, Vocabulary};
