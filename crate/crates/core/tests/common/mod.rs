//! Shared fixtures: a small synthetic task and a briefly trained encoder.

#![allow(dead_code)]

pub mod oracles;

use mse2d::eval::RetrievalSet;
use mse2d::synth::{SynthConfig, SynthData};
use mse2d::trainer::TrainRun;
use mse2d::{EncoderConfig, ObjectiveConfig, ObjectiveKind, TrainConfig};

pub fn small_synth() -> SynthConfig {
    SynthConfig {
        vocab_size: 64,
        n_docs: 60,
        n_train: 40,
        n_eval: 12,
        n_topics: 4,
        words_per_topic: 5,
        ..SynthConfig::default()
    }
}

pub fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 64,
        d_model: 16,
        n_layers: 3,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 12,
        ..EncoderConfig::default()
    }
}

pub fn small_train(objective: ObjectiveConfig, steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        objective: ObjectiveConfig { seed, ..objective },
        encoder: small_encoder(),
        steps,
        batch_size: 8,
        learning_rate: 3e-3,
        seed,
        ..TrainConfig::default()
    }
}

pub fn full_small() -> ObjectiveConfig {
    ObjectiveConfig {
        dims: vec![4, 8, 16],
        target_dim: 8,
        ..ObjectiveConfig::default()
    }
}

pub fn v2_small() -> ObjectiveConfig {
    ObjectiveConfig {
        kind: ObjectiveKind::V2,
        dims: vec![4, 8, 16],
        target_dim: 8,
        ..ObjectiveConfig::default()
    }
}

pub struct Fixture {
    pub data: SynthData,
    pub run: TrainRun,
}

impl Fixture {
    pub fn set(&self) -> &RetrievalSet {
        &self.data.eval
    }
}

pub fn trained(objective: ObjectiveConfig, steps: usize, seed: u64) -> Fixture {
    let data = small_synth().generate().unwrap();
    let run = mse2d::train(&small_train(objective, steps, seed), &data.train, &data.vocab).unwrap();
    Fixture { data, run }
}
