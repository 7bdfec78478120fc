//! Corpus files, the synthetic trial generator, and train/val/test splits.

mod io;
mod split;
mod synth;

pub use io::{
    load_corpus, read_corpus, read_scanpaths, save_corpus, write_corpus, write_scanpaths, ScanpathEntry,
    CORPUS_SCHEMA_VERSION,
};
pub use split::split_corpus;
pub use synth::{synthesize_corpus, OraclePolicy, SynthConfig, SHAPE_NAMES, COLOR_NAMES};

use crate::domain::TrialRecord;

/// Reserved word indices shared by every corpus vocabulary.
pub const BOT: usize = 0;
pub const EOT: usize = 1;
pub const PAD: usize = 2;
pub const RESERVED_WORDS: [&str; 3] = ["<bot>", "<eot>", "<pad>"];

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<TrialRecord>,
    pub category_vocab: Vec<String>,
    /// Starts with the reserved `<bot>`, `<eot>`, `<pad>` entries.
    pub word_vocab: Vec<String>,
    /// `(rows, cols)` of every feature grid.
    pub grid_shape: (usize, usize),
    pub feature_dim: usize,
}

impl Corpus {
    /// A corpus with the same vocabularies and grid but other records.
    pub fn with_records(&self, records: Vec<TrialRecord>) -> Self {
        Self {
            records,
            category_vocab: self.category_vocab.clone(),
            word_vocab: self.word_vocab.clone(),
            grid_shape: self.grid_shape,
            feature_dim: self.feature_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn word_index(&self, word: &str) -> Option<usize> {
        self.word_vocab.iter().position(|w| w == word)
    }

    pub fn category_index(&self, category: &str) -> Option<usize> {
        self.category_vocab.iter().position(|c| c == category)
    }

    /// Mean duration over every human fixation, or `None` for a corpus
    /// without fixations.
    pub fn mean_fixation_ms(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in &self.records {
            for h in &r.human_scanpaths {
                for f in h.scanpath.flatten() {
                    sum += f.duration_ms as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    Schema { field: String, line: usize, message: String },
    #[error("line {line} (trial {trial_id}): {violations}")]
    Validation { line: usize, trial_id: String, violations: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
