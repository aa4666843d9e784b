use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use psdp::generation::{self, ChunkPolicy, GenerationError, SamplerPolicy};
use psdp::model::{count_parameters, sharing_ratio, ModelConfig, Variant};
use psdp::tokenizer::{build_char_vocab, TokenizerError};
use psdp::training::{
    self, load_checkpoint, load_couplet_corpus, load_text_corpus, save_checkpoint, CheckpointError,
};
use psdp::{Checkpoint, ConfigError, Corpus, RunConfig, Task, Tokenizer, TokenizerKind, TrainingError, Vocabulary};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config, paths or incompatible inputs.
    Usage(String),
    /// Failure while doing the actual work.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::Io { .. }
            | TrainingError::EmptyCorpus(_)
            | TrainingError::Alignment { .. }
            | TrainingError::VocabMismatch { .. } => Self::Usage(e.to_string()),
            TrainingError::Checkpoint(c) => c.into(),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<GenerationError> for CliError {
    fn from(e: GenerationError) -> Self {
        match e {
            GenerationError::Model(_) => Self::Runtime(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("cannot write {}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn validated(cfg: ModelConfig) -> Result<ModelConfig> {
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn group(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn count_params(config: &Path) -> Result<()> {
    let cfg = validated(RunConfig::load(config)?.model_config(None)?)?;
    let b = count_parameters(&cfg);
    let rows = [
        ("per layer", b.per_layer),
        ("layer sets stored", b.layer_sets),
        ("decoders", b.decoders_total),
        ("mapping weight", b.mapping_weight),
        ("mapping bias", b.mapping_bias),
        ("final norm", b.final_norm),
        ("token embeddings", b.token_embeddings),
        ("position embeddings", b.position_embeddings),
        ("total excluding embeddings", b.excluding_embeddings()),
        ("total", b.total),
    ];
    let mut out = String::new();
    out.push_str(&format!("variant: {}\n", cfg.variant));
    for (name, v) in rows {
        out.push_str(&format!("{name:<28}{:>16}\n", group(v)));
    }
    out.push_str(&format!(
        "{:<28}{:>16}\n",
        "stored size (MB)",
        format!("{:.1}", b.stored_bytes() as f64 / 1e6)
    ));
    if cfg.variant == Variant::Psdp {
        let ratio = sharing_ratio(&cfg).expect("psdp config");
        out.push_str(&format!("{:<28}{:>16}\n", "shared/stacked ratio", format!("{:.2}%", ratio * 100.0)));
    }
    print!("{out}");
    Ok(())
}

fn corpus_paths(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    match cfg.task {
        Task::Lm => Ok(vec![cfg.corpus.clone().ok_or(ConfigError::Missing("corpus"))?]),
        Task::Couplet => Ok(vec![
            cfg.couplet_first.clone().ok_or(ConfigError::Missing("couplet_first"))?,
            cfg.couplet_second.clone().ok_or(ConfigError::Missing("couplet_second"))?,
        ]),
    }
}

/// Loads the configured vocabulary, or builds a character vocabulary from
/// the corpus when none is given.
fn tokenizer_for(cfg: &RunConfig) -> Result<Tokenizer> {
    let vocab = match (&cfg.vocab, cfg.tokenizer) {
        (Some(path), _) => Vocabulary::load(path)?,
        (None, TokenizerKind::Char) => build_char_vocab(&corpus_paths(cfg)?)?,
        (None, TokenizerKind::WordPiece) => {
            return Err(ConfigError::Missing("vocab (wordpiece needs a vocabulary file)").into())
        }
    };
    Ok(Tokenizer::new(vocab, cfg.tokenizer))
}

fn load_corpus(cfg: &RunConfig, tokenizer: &Tokenizer) -> Result<Corpus> {
    let paths = corpus_paths(cfg)?;
    let corpus = match cfg.task {
        Task::Lm => load_text_corpus(&paths[0], tokenizer, cfg.max_seq_len, cfg.min_words)?,
        Task::Couplet => load_couplet_corpus(&paths[0], &paths[1], tokenizer, cfg.max_seq_len)?,
    };
    let s = &corpus.stats;
    if s.length_mismatched > 0 || s.dropped_too_long > 0 {
        eprintln!(
            "note: {} pairs with unequal halves kept, {} over-long examples dropped",
            s.length_mismatched, s.dropped_too_long
        );
    }
    Ok(corpus)
}

fn model_config(cfg: &RunConfig, vocab: &Vocabulary) -> Result<ModelConfig> {
    let mc = validated(cfg.model_config(Some(vocab.len()))?)?;
    if mc.vocab_size < vocab.len() {
        return Err(CliError::Usage(format!(
            "vocab_size {} is smaller than the vocabulary ({} tokens)",
            mc.vocab_size,
            vocab.len()
        )));
    }
    Ok(mc)
}

pub fn train(config: &Path, task: Option<Task>, overrides: &[String]) -> Result<()> {
    let mut cfg = load_config(config, overrides)?;
    if let Some(task) = task {
        cfg.task = task;
    }
    let tokenizer = tokenizer_for(&cfg)?;
    if let Some(path) = &cfg.vocab_out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        }
        tokenizer.vocab.save(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let corpus = load_corpus(&cfg, &tokenizer)?;
    let mc = model_config(&cfg, &tokenizer.vocab)?;

    let state = match &cfg.checkpoint_in {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if *ckpt.model.config() != mc {
                return Err(CliError::Usage(format!(
                    "checkpoint {} was trained with a different model config",
                    path.display()
                )));
            }
            ckpt
        }
        None => Checkpoint::init(mc, cfg.adam(), cfg.seed).map_err(|e| CliError::Usage(e.to_string()))?,
    };

    let out = cfg.checkpoint_out.clone();
    let mut last_size = None;
    let outcome = training::train(state, &corpus, tokenizer.specials(), &cfg.train_config(), |c| {
        if let Some(path) = &out {
            last_size = Some(save_checkpoint(path, c)?);
            info!("saved {} at step {}", path.display(), c.step);
        }
        Ok(())
    })?;

    if let Some(path) = &cfg.loss_log {
        let mut log = String::new();
        for (step, loss) in &outcome.losses {
            log.push_str(&format!("{step},{loss:.6}\n"));
        }
        write_file(path, &log)?;
    }

    let mut stdout = std::io::stdout().lock();
    let tail = &outcome.losses[outcome.losses.len().saturating_sub(50)..];
    if let Some((step, loss)) = outcome.losses.last() {
        let mean = tail.iter().map(|(_, l)| l).sum::<f64>() / tail.len() as f64;
        writeln!(stdout, "final loss {loss:.6} at step {step} (mean of last {}: {mean:.6})", tail.len()).ok();
    } else {
        writeln!(stdout, "no training steps run").ok();
    }
    match (&out, last_size) {
        (Some(path), Some(size)) => {
            writeln!(
                stdout,
                "checkpoint {}: {} bytes ({} bytes of parameters)",
                path.display(),
                size.file_bytes,
                size.parameter_bytes
            )
            .ok();
        }
        _ => {
            writeln!(
                stdout,
                "no checkpoint written; parameters would take {} bytes",
                outcome.checkpoint.parameter_bytes()
            )
            .ok();
        }
    }
    Ok(())
}

fn load_for_inference(checkpoint: &Path, vocab: &Path, kind: TokenizerKind) -> Result<(Checkpoint, Tokenizer)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let vocab = Vocabulary::load(vocab)?;
    let v = ckpt.model.config().vocab_size;
    if vocab.len() > v {
        return Err(CliError::Usage(format!(
            "vocabulary has {} tokens but the checkpoint expects at most {v}",
            vocab.len()
        )));
    }
    Ok((ckpt, Tokenizer::new(vocab, kind)))
}

pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub tokenizer: TokenizerKind,
    pub prompt: String,
    pub k: usize,
    pub retries: usize,
    pub max_tokens: usize,
    pub seed: u64,
    pub temperature: f64,
    pub chunks: Option<ChunkPolicy>,
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let (ckpt, tokenizer) = load_for_inference(&args.checkpoint, &args.vocab, args.tokenizer)?;
    let sp = tokenizer.specials();
    let mut prompt = vec![sp.bos];
    prompt.extend(tokenizer.encode(&args.prompt));
    let policy = SamplerPolicy {
        k: args.k,
        retries: args.retries,
        max_new_tokens: args.max_tokens,
        temperature: args.temperature,
        seed: args.seed,
        eos: Some(sp.eos),
    };
    let ids = match args.chunks {
        Some(chunks) => generation::chunk_generate(&ckpt.model, &prompt, &policy, &chunks, args.max_tokens)?,
        None => generation::generate(&ckpt.model, &prompt, &policy)?,
    };
    println!("{}", tokenizer.decode(&ids)?);
    Ok(())
}

pub struct CoupletArgs {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub tokenizer: TokenizerKind,
    pub first: String,
    pub n: usize,
    pub k: usize,
    pub retries: usize,
    pub seed: u64,
    pub temperature: f64,
}

pub fn couplet(args: CoupletArgs) -> Result<()> {
    if args.first.trim().is_empty() {
        return Err(GenerationError::EmptyFirstSentence.into());
    }
    let (ckpt, tokenizer) = load_for_inference(&args.checkpoint, &args.vocab, args.tokenizer)?;
    let policy = SamplerPolicy {
        k: args.k,
        retries: args.retries,
        temperature: args.temperature,
        seed: args.seed,
        ..Default::default()
    };
    let lines = generation::complete_couplet(&ckpt.model, &tokenizer, &args.first, &policy, args.n)?;
    let mut stdout = std::io::stdout().lock();
    for line in lines {
        writeln!(stdout, "{line}").map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

pub fn tokenize(vocab: &Path, mode: TokenizerKind, text: &str) -> Result<()> {
    let tokenizer = Tokenizer::new(Vocabulary::load(vocab)?, mode);
    let ids = tokenizer.encode(text);
    let pieces = ids
        .iter()
        .map(|&id| Ok(format!("{}:{id}", tokenizer.vocab.token(id)?)))
        .collect::<std::result::Result<Vec<_>, TokenizerError>>()?;
    println!("{}", pieces.join(" "));
    println!("{}", tokenizer.decode(&ids)?);
    Ok(())
}

pub fn eval(config: &Path, checkpoint: &Path, overrides: &[String]) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let tokenizer = tokenizer_for(&cfg)?;
    if tokenizer.vocab.len() > ckpt.model.config().vocab_size {
        return Err(CliError::Usage("vocabulary is larger than the checkpoint's vocab_size".into()));
    }
    let corpus = load_corpus(&cfg, &tokenizer)?;
    let loss = training::eval_loss(&ckpt.model, &corpus, tokenizer.specials(), cfg.batch_size)?;
    println!("loss {loss:.6} over {} examples", corpus.len());
    Ok(())
}

pub fn dump_config(config: Option<&Path>, overrides: &[String]) -> Result<()> {
    let mut cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    print!("{}", cfg.dump());
    Ok(())
}
