//! Fixtures shared by the benchmarks.

use refgaze_core::data::{synthesize_corpus, Corpus, SynthConfig};
use refgaze_core::engine::{sample_scanpaths, train, LearningRates, TrainConfig};
use refgaze_core::model::{GazeModel, ModelConfig, Vocab};

pub fn corpus(n_records: usize) -> Corpus {
    synthesize_corpus(&SynthConfig { n_records, seed: 1, ..Default::default() }).expect("synthetic corpus")
}

/// A toy-scale model with fresh parameters.
pub fn toy_model(corpus: &Corpus) -> GazeModel {
    let cfg = ModelConfig { n_heads: 4, ..ModelConfig::toy() };
    GazeModel::new(cfg, Vocab::of(corpus), 7).expect("toy model")
}

/// A toy model after a few epochs, so inference produces non-trivial packs.
pub fn trained_model(corpus: &Corpus) -> GazeModel {
    let mut m = toy_model(corpus);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        lr: LearningRates { stubs: 1e-5, vl: 1e-4, rest: 1e-3 },
        grad_clip: None,
        early_stopping: None,
        ..TrainConfig::train()
    };
    train(&mut m, corpus, None, &cfg).expect("training");
    m
}

/// Ten sampled scanpaths per record.
pub fn samples(model: &GazeModel, corpus: &Corpus) -> Vec<Vec<refgaze_core::domain::Scanpath>> {
    corpus.records.iter().map(|r| sample_scanpaths(model, r, 10, 0).expect("sampling")).collect()
}
