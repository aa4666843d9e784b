use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{Corpus, Task};
use crate::tensor::IdTensor;
use crate::tokenizer::SpecialIds;

/// Target id marking a position that contributes no loss.
pub const IGNORE: usize = usize::MAX;

/// ChaCha stream used for shuffling; stream 0 belongs to initialisation.
pub const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: IdTensor,
    /// Row-major `[B, T]`, [`IGNORE`] where no loss applies.
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn target(&self, b: usize, t: usize) -> usize {
        self.targets[b * self.inputs.seq_len() + t]
    }

    pub fn loss_positions(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE).count()
    }
}

/// Pads to the longest example and builds next-token targets. For couplets,
/// targets up to and including the SEP are ignored.
pub fn collate(examples: &[&[usize]], task: Task, specials: SpecialIds) -> Batch {
    let b = examples.len();
    let t = examples.iter().map(|e| e.len()).max().unwrap_or(1).max(1);
    let mut inputs = vec![specials.pad; b * t];
    let mut targets = vec![IGNORE; b * t];
    for (row, ex) in examples.iter().enumerate() {
        inputs[row * t..row * t + ex.len()].copy_from_slice(ex);
        let first_scored = match task {
            Task::Lm => 0,
            Task::Couplet => ex.iter().position(|&id| id == specials.sep).unwrap_or(0),
        };
        for pos in first_scored..ex.len().saturating_sub(1) {
            targets[row * t + pos] = ex[pos + 1];
        }
    }
    Batch {
        inputs: IdTensor::new(b, t, inputs).expect("non-empty batch"),
        targets,
    }
}

/// Endless stream of batches; each epoch visits every example once in an
/// order shuffled by the seeded generator.
pub struct BatchStream<'a> {
    corpus: &'a Corpus,
    specials: SpecialIds,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl<'a> BatchStream<'a> {
    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

pub fn make_batches(corpus: &Corpus, batch_size: usize, specials: SpecialIds, seed: u64) -> BatchStream<'_> {
    assert!(!corpus.is_empty(), "make_batches needs a non-empty corpus");
    assert!(batch_size > 0, "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM);
    BatchStream {
        corpus,
        specials,
        batch_size,
        rng,
        order: Vec::new(),
        cursor: 0,
        epoch: 0,
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            self.order = (0..self.corpus.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let rows: Vec<&[usize]> = self.order[self.cursor..end]
            .iter()
            .map(|&i| self.corpus.examples[i].as_slice())
            .collect();
        self.cursor = end;
        Some(collate(&rows, self.corpus.task, self.specials))
    }
}

/// Unshuffled batches covering the corpus once, for evaluation.
pub fn sequential_batches(corpus: &Corpus, batch_size: usize, specials: SpecialIds) -> Vec<Batch> {
    corpus
        .examples
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let rows: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
            collate(&rows, corpus.task, specials)
        })
        .collect()
}
