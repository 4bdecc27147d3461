#![allow(dead_code)]

use chair_core::data::{generate, retrieval_split, Dataset, Protocol, SynthConfig};
use chair_core::model::{AnyModel, Checkpoint, CheckpointMeta};
use chair_core::training::{train_chair, Mode, TrainConfig};

pub fn small_synth() -> SynthConfig {
    SynthConfig {
        num_classes: 8,
        num_concepts: 6,
        input_dim: 12,
        samples_per_class: 10,
        ..Default::default()
    }
}

pub fn small_train() -> TrainConfig {
    TrainConfig {
        mode: Mode::Joint,
        stage1_epochs: 4,
        stage2_epochs: 3,
        batch_size: 16,
        hidden: 16,
        embed_dim: 8,
        ..Default::default()
    }
}

/// Small dataset plus a CHAIR checkpoint trained on its seen-class half.
pub fn fixture() -> (Dataset, Checkpoint) {
    let ds = generate(&small_synth()).unwrap();
    let split = retrieval_split(&ds).unwrap();
    let cfg = small_train();
    let run = train_chair(&split.train, None, &cfg, true).unwrap();
    let ck = Checkpoint {
        model: AnyModel::Chair(run.model),
        meta: CheckpointMeta {
            protocol: Protocol::Retrieval,
            mode: Some(cfg.mode),
            stages: vec![1, 2],
            seed: cfg.seed,
        },
        intervention_values: Some(run.values),
    };
    (ds, ck)
}
