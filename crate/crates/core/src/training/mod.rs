//! Corpus ingestion, batching, the training loop and checkpoints.

mod batch;
mod checkpoint;
mod corpus;
mod train;

use std::path::PathBuf;

use thiserror::Error;

use crate::model::ModelError;
use crate::optim::OptimError;

pub use batch::{collate, make_batches, sequential_batches, Batch, BatchStream, IGNORE, SHUFFLE_STREAM};
pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint,
    Checkpoint, CheckpointError, CheckpointSize, MAGIC,
};
pub use corpus::{
    couplet_example, load_couplet_corpus, load_text_corpus, strip_html, Corpus, CorpusStats, Task,
};
pub use train::{eval_loss, train, train_step, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus {0} has no usable examples")]
    EmptyCorpus(PathBuf),
    #[error("couplet files are not aligned: {first} first lines vs {second} second lines")]
    Alignment { first: usize, second: usize },
    #[error("non-finite loss {loss} at step {step} (gradient norm {grad_norm}, largest parameter gradient {worst_param} = {worst_norm})")]
    NonFinite {
        step: u64,
        loss: f64,
        grad_norm: f64,
        worst_param: String,
        worst_norm: f64,
    },
    #[error("corpus tokens exceed the model vocabulary ({vocab})")]
    VocabMismatch { vocab: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<crate::tensor::TensorError> for TrainingError {
    fn from(e: crate::tensor::TensorError) -> Self {
        Self::Model(ModelError::Tensor(e))
    }
}
