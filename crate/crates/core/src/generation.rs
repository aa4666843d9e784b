//! Top-k sampling, repeat-retry generation, chunk-by-chunk selection and
//! couplet completion.
//!
//! Randomness comes from a [`ChaCha8Rng`] seeded with the policy seed. Every
//! sampling decision, including each retry, consumes exactly one `f64` drawn
//! with `rng.gen::<f64>()`. Chunk candidates are sampled one after another
//! from the same stream, so a single candidate reproduces plain generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::log_sum_exp;
use crate::model::{Model, ModelError};
use crate::tensor::IdTensor;
use crate::tokenizer::{Tokenizer, TokenizerError};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("top-k width {k} must be between 1 and the vocabulary size {vocab}")]
    InvalidK { k: usize, vocab: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("first sentence is empty")]
    EmptyFirstSentence,
    #[error("chunk length and candidate count must be at least 1")]
    InvalidChunkPolicy,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

type Result<T> = std::result::Result<T, GenerationError>;

/// Anything that can score a next token given a context.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    fn max_seq_len(&self) -> usize;

    /// Logits for the token following `context`.
    fn next_logits(&self, context: &[usize]) -> Result<Vec<f64>>;

    /// Logits at every position of `ids`; row `t` predicts `ids[t + 1]`.
    fn all_logits(&self, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
        (1..=ids.len()).map(|t| self.next_logits(&ids[..t])).collect()
    }
}

impl LanguageModel for Model {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.config().max_seq_len
    }

    fn next_logits(&self, context: &[usize]) -> Result<Vec<f64>> {
        Ok(self.all_logits(context)?.pop().expect("non-empty context"))
    }

    fn all_logits(&self, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
        if ids.is_empty() {
            return Err(GenerationError::EmptyPrompt);
        }
        let logits = self.logits(&IdTensor::from_row(ids).map_err(ModelError::from)?)?;
        let v = self.config().vocab_size;
        Ok(logits.data().chunks(v).map(<[f64]>::to_vec).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerPolicy {
    pub k: usize,
    /// Extra draws allowed when the sampled token already occurs in the
    /// generated continuation.
    pub retries: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Generation stops after emitting this token.
    pub eos: Option<usize>,
}

impl Default for SamplerPolicy {
    fn default() -> Self {
        Self {
            k: 10,
            retries: 3,
            max_new_tokens: 64,
            temperature: 1.0,
            seed: 0,
            eos: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkPolicy {
    pub chunk_len: usize,
    pub candidates: usize,
}

/// Token ids of the `k` largest logits, largest first, ties to the lower id.
pub fn top_k_ids(logits: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// Softmax over all logits, restrict to the top `k`, renormalise, draw once.
pub fn top_k_sample(logits: &[f64], k: usize, temperature: f64, rng: &mut impl Rng) -> Result<usize> {
    if k == 0 || k > logits.len() {
        return Err(GenerationError::InvalidK { k, vocab: logits.len() });
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(GenerationError::InvalidTemperature(temperature));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let lse = log_sum_exp(&scaled);
    let ids = top_k_ids(&scaled, k);
    let probs: Vec<f64> = ids.iter().map(|&i| (scaled[i] - lse).exp()).collect();
    let total: f64 = probs.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (&id, p) in ids.iter().zip(&probs) {
        acc += p;
        if u < acc {
            return Ok(id);
        }
    }
    Ok(*ids.last().expect("k >= 1"))
}

fn check_prompt(model: &impl LanguageModel, prompt: &[usize]) -> Result<()> {
    if prompt.is_empty() {
        return Err(GenerationError::EmptyPrompt);
    }
    if prompt.len() > model.max_seq_len() {
        return Err(GenerationError::TooLong {
            len: prompt.len(),
            max: model.max_seq_len(),
        });
    }
    Ok(())
}

/// Extends `out` by up to `max_new` tokens. Repeats are checked against
/// `out[generated_from..]`. Returns true if EOS was emitted.
fn extend(
    model: &impl LanguageModel,
    out: &mut Vec<usize>,
    generated_from: usize,
    max_new: usize,
    policy: &SamplerPolicy,
    rng: &mut impl Rng,
) -> Result<bool> {
    for _ in 0..max_new {
        if out.len() >= model.max_seq_len() {
            break;
        }
        let logits = model.next_logits(out)?;
        let mut tok = top_k_sample(&logits, policy.k, policy.temperature, rng)?;
        for _ in 0..policy.retries {
            if !out[generated_from..].contains(&tok) {
                break;
            }
            tok = top_k_sample(&logits, policy.k, policy.temperature, rng)?;
        }
        out.push(tok);
        if policy.eos == Some(tok) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Autoregressive top-k generation with the repeat-retry rule, drawing from
/// a caller-owned generator. The result starts with `prompt`.
pub fn generate_with_rng(
    model: &impl LanguageModel,
    prompt: &[usize],
    policy: &SamplerPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    check_prompt(model, prompt)?;
    let mut out = prompt.to_vec();
    extend(model, &mut out, prompt.len(), policy.max_new_tokens, policy, rng)?;
    Ok(out)
}

pub fn generate(model: &impl LanguageModel, prompt: &[usize], policy: &SamplerPolicy) -> Result<Vec<usize>> {
    generate_with_rng(model, prompt, policy, &mut ChaCha8Rng::seed_from_u64(policy.seed))
}

/// Sum of log-probabilities of `continuation` following `context`.
pub fn sequence_log_prob(model: &impl LanguageModel, context: &[usize], continuation: &[usize]) -> Result<f64> {
    if continuation.is_empty() {
        return Ok(0.0);
    }
    check_prompt(model, context)?;
    let len = context.len() + continuation.len();
    if len > model.max_seq_len() {
        return Err(GenerationError::TooLong {
            len,
            max: model.max_seq_len(),
        });
    }
    let mut ids = context.to_vec();
    ids.extend_from_slice(&continuation[..continuation.len() - 1]);
    let rows = model.all_logits(&ids)?;
    Ok(continuation
        .iter()
        .enumerate()
        .map(|(i, &tok)| {
            let row = &rows[context.len() - 1 + i];
            row[tok] - log_sum_exp(row)
        })
        .sum())
}

/// Index of the highest score, the first one on ties.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// One round of chunk selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkRound {
    pub context: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    /// Mean log-probability per candidate; empty when only one was sampled.
    pub scores: Vec<f64>,
    pub chosen: usize,
}

/// Chunk-by-chunk generation, also returning every selection round.
pub fn chunk_generate_traced(
    model: &impl LanguageModel,
    prompt: &[usize],
    sampler: &SamplerPolicy,
    chunks: &ChunkPolicy,
    total_tokens: usize,
) -> Result<(Vec<usize>, Vec<ChunkRound>)> {
    if chunks.chunk_len == 0 || chunks.candidates == 0 {
        return Err(GenerationError::InvalidChunkPolicy);
    }
    check_prompt(model, prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut out = prompt.to_vec();
    let mut rounds = Vec::new();
    let mut emitted = 0;
    while emitted < total_tokens && out.len() < model.max_seq_len() {
        let len = chunks.chunk_len.min(total_tokens - emitted);
        let mut candidates = Vec::with_capacity(chunks.candidates);
        let mut hit_eos = Vec::with_capacity(chunks.candidates);
        for _ in 0..chunks.candidates {
            let mut cand = out.clone();
            hit_eos.push(extend(model, &mut cand, prompt.len(), len, sampler, &mut rng)?);
            candidates.push(cand.split_off(out.len()));
        }
        let scores = if candidates.len() > 1 {
            candidates
                .iter()
                .map(|c| Ok(sequence_log_prob(model, &out, c)? / c.len() as f64))
                .collect::<Result<Vec<f64>>>()?
        } else {
            Vec::new()
        };
        let chosen = select_best(&scores).unwrap_or(0);
        let chunk = &candidates[chosen];
        emitted += chunk.len();
        let context = out.clone();
        out.extend_from_slice(chunk);
        let stop = hit_eos[chosen] || chunk.is_empty();
        rounds.push(ChunkRound {
            context,
            candidates,
            scores,
            chosen,
        });
        if stop {
            break;
        }
    }
    Ok((out, rounds))
}

pub fn chunk_generate(
    model: &impl LanguageModel,
    prompt: &[usize],
    sampler: &SamplerPolicy,
    chunks: &ChunkPolicy,
    total_tokens: usize,
) -> Result<Vec<usize>> {
    Ok(chunk_generate_traced(model, prompt, sampler, chunks, total_tokens)?.0)
}

/// Samples `n` second sentences for `first`, sample `i` seeded with
/// `policy.seed + i`. Generation stops at EOS or after `len(first) + 4`
/// tokens. `policy.eos` and `policy.max_new_tokens` are overridden.
pub fn complete_couplet(
    model: &impl LanguageModel,
    tokenizer: &Tokenizer,
    first: &str,
    policy: &SamplerPolicy,
    n: usize,
) -> Result<Vec<String>> {
    let compact: String = first.chars().filter(|c| !c.is_whitespace()).collect();
    let encoded = tokenizer.encode(&compact);
    if encoded.is_empty() {
        return Err(GenerationError::EmptyFirstSentence);
    }
    let sp = tokenizer.specials();
    let mut prompt = Vec::with_capacity(encoded.len() + 2);
    prompt.push(sp.bos);
    prompt.extend_from_slice(&encoded);
    prompt.push(sp.sep);
    (0..n)
        .map(|i| {
            let p = SamplerPolicy {
                seed: policy.seed.wrapping_add(i as u64),
                eos: Some(sp.eos),
                max_new_tokens: encoded.len() + 4,
                ..*policy
            };
            let ids = generate(model, &prompt, &p)?;
            Ok(tokenizer.decode(&ids[prompt.len()..])?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed logits regardless of context.
    struct Constant {
        logits: Vec<f64>,
        max: usize,
    }

    impl LanguageModel for Constant {
        fn vocab_size(&self) -> usize {
            self.logits.len()
        }
        fn max_seq_len(&self) -> usize {
            self.max
        }
        fn next_logits(&self, _: &[usize]) -> Result<Vec<f64>> {
            Ok(self.logits.clone())
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn k_one_is_argmax() {
        let mut r = rng(1);
        assert_eq!(top_k_sample(&[0.1, 3.0, -1.0, 2.9], 1, 1.0, &mut r).unwrap(), 1);
    }

    #[test]
    fn ties_broken_by_lower_id() {
        assert_eq!(top_k_ids(&[1.0, 2.0, 2.0, 2.0], 2), vec![1, 2]);
        let mut r = rng(0);
        for _ in 0..200 {
            let t = top_k_sample(&[1.0, 2.0, 2.0, 2.0], 2, 1.0, &mut r).unwrap();
            assert!(t == 1 || t == 2);
        }
    }

    #[test]
    fn invalid_k_and_temperature() {
        let mut r = rng(0);
        assert!(matches!(top_k_sample(&[0.0; 3], 4, 1.0, &mut r), Err(GenerationError::InvalidK { k: 4, vocab: 3 })));
        assert!(top_k_sample(&[0.0; 3], 0, 1.0, &mut r).is_err());
        assert!(top_k_sample(&[0.0; 3], 2, 0.0, &mut r).is_err());
    }

    #[test]
    fn sampling_consumes_one_draw() {
        let mut a = rng(5);
        let mut b = rng(5);
        top_k_sample(&[0.0; 6], 3, 1.0, &mut a).unwrap();
        let _: f64 = b.gen();
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());
    }

    #[test]
    fn zero_new_tokens_returns_prompt() {
        let m = Constant { logits: vec![0.0; 5], max: 10 };
        let p = SamplerPolicy { max_new_tokens: 0, ..Default::default() };
        assert_eq!(generate(&m, &[1, 2], &p).unwrap(), vec![1, 2]);
    }

    #[test]
    fn stops_at_eos_and_max_len() {
        let m = Constant { logits: vec![0.0, 0.0, 9.0], max: 6 };
        let p = SamplerPolicy { k: 1, max_new_tokens: 10, eos: Some(2), ..Default::default() };
        assert_eq!(generate(&m, &[0], &p).unwrap(), vec![0, 2]);
        let p = SamplerPolicy { eos: None, retries: 0, ..p };
        assert_eq!(generate(&m, &[0], &p).unwrap().len(), 6);
    }

    #[test]
    fn prompt_errors() {
        let m = Constant { logits: vec![0.0; 3], max: 3 };
        let p = SamplerPolicy { k: 1, ..Default::default() };
        assert!(matches!(generate(&m, &[], &p), Err(GenerationError::EmptyPrompt)));
        assert!(matches!(generate(&m, &[0; 4], &p), Err(GenerationError::TooLong { len: 4, max: 3 })));
    }

    #[test]
    fn retry_scope_excludes_prompt() {
        // Token 0 dominates; k=1 means retries can never change it.
        let m = Constant { logits: vec![5.0, 0.0], max: 10 };
        let p = SamplerPolicy { k: 1, retries: 3, max_new_tokens: 3, ..Default::default() };
        assert_eq!(generate(&m, &[0], &p).unwrap(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn log_prob_uniform() {
        let m = Constant { logits: vec![0.0; 10], max: 10 };
        let lp = sequence_log_prob(&m, &[1], &[2, 3, 4]).unwrap();
        assert!((lp - 3.0 * (0.1f64).ln()).abs() < 1e-12);
        assert_eq!(sequence_log_prob(&m, &[1], &[]).unwrap(), 0.0);
        assert!(sequence_log_prob(&m, &[1; 8], &[1, 2, 3]).is_err());
    }

    #[test]
    fn select_best_first_on_ties() {
        assert_eq!(select_best(&[-1.0, -0.5, -2.0]), Some(1));
        assert_eq!(select_best(&[-1.0, -1.0]), Some(0));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn single_candidate_matches_generate() {
        let m = Constant { logits: vec![0.3, 0.1, 0.0, -0.2, 0.4], max: 30 };
        let p = SamplerPolicy { k: 4, retries: 2, max_new_tokens: 12, seed: 17, eos: Some(3), ..Default::default() };
        let plain = generate(&m, &[0], &p).unwrap();
        let chunked = chunk_generate(&m, &[0], &p, &ChunkPolicy { chunk_len: 5, candidates: 1 }, 12).unwrap();
        assert_eq!(plain, chunked);
    }
}
