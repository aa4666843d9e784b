//! A desk-scale implementation of the parameter sharing decoder pair (PSDP)
//! language model: a small dense-tensor autodiff core, the stacked and PSDP
//! decoder architectures, WordPiece and character tokenizers, a training loop
//! with checkpoints, and top-k sampling with the repeat-retry and
//! chunk-selection generation tricks.

pub mod autodiff;
pub mod config;
pub mod generation;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use config::{ConfigError, RunConfig, VocabSize};
pub use generation::{ChunkPolicy, GenerationError, LanguageModel, SamplerPolicy};
pub use model::{Model, ModelConfig, Variant};
pub use tensor::{IdTensor, Tensor, TensorError};
pub use tokenizer::{Tokenizer, TokenizerKind, Vocabulary};
pub use training::{Checkpoint, Corpus, Task, TrainingError};
