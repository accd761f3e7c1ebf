//! Shared fixtures for the benchmarks.

use pet_core::mlm::checkpoint;
use pet_core::pipeline::{CheckpointRef, EnsembleMember};
use pet_core::{
    make_toy_task, Example, Pvp, TinyTransformer, TinyTransformerConfig, ToyConfig, ToyKind,
    ToyTask,
};
use std::sync::Arc;

pub struct Fixture {
    pub task: ToyTask,
    pub pvps: Vec<Pvp>,
    pub model: TinyTransformer,
}

impl Fixture {
    /// A toy task with an untrained transformer of the acceptance-suite size.
    pub fn new(kind: ToyKind) -> Self {
        let task = make_toy_task(&ToyConfig {
            corpus: 10,
            ..ToyConfig::new(kind, 7)
        })
        .expect("toy task");
        let pvps = task.bundle.pvps(&task.vocab).expect("pvps");
        let model = TinyTransformer::new(
            TinyTransformerConfig {
                layers: 2,
                model_dim: 32,
                heads: 4,
                ff_dim: 64,
                max_positions: 32,
                seed: 1,
            },
            task.vocab.len(),
        )
        .expect("model");
        Self { task, pvps, model }
    }

    pub fn examples(&self, n: usize) -> &[Example] {
        &self.task.test.examples[..n]
    }

    /// One member per PVP sharing the fixture checkpoint.
    pub fn members(&self) -> Vec<EnsembleMember> {
        let bytes = Arc::new(checkpoint::to_bytes(&self.model));
        self.pvps
            .iter()
            .map(|p| EnsembleMember {
                pvp: p.name.clone(),
                seed_index: 1,
                checkpoint: CheckpointRef::Memory(bytes.clone()),
                weight: 1.0,
            })
            .collect()
    }
}
