//! Character-level encoder–decoder translators from raw log lines to
//! annotation strings.

mod adam;
mod attention;
mod cell;
mod checkpoint;
mod config;
mod decode;
mod model;
mod real;
mod train;
mod vocab;
mod weights;

use std::path::PathBuf;

pub use adam::Adam;
pub use attention::masked_softmax;
pub use cell::{backward_step, forward_step, CellState, StepCache, StepGrads};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{Arch, CellKind, ModelConfig, OptimizerConfig, PAPER_CELL_GRID, PAPER_DROPOUT_GRID};
pub use decode::{Decoding, Hypothesis, Translator};
pub use model::{batch_gradients, batch_loss, BatchLoss, Example, PreparedBatch};
pub use real::Real;
pub use train::{encode_examples, split_indices, train, write_history, EpochStats, TrainOutcome, MIN_CORPUS};
pub use vocab::{build_vocab, CharVocab, VocabKind, END, PAD, START, UNK};
pub use weights::{AttentionParams, CellParams, Layout, Weights};

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("symbol {0:?} is not in the vocabulary")]
    UnknownSymbol(char),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus of {records} records is too small to train on")]
    CorpusTooSmall { records: usize },
    #[error("loss became non-finite at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}
