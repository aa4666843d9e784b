//! `psdp`: train, sample from and inspect PSDP language models.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use psdp::{Task, TokenizerKind};

#[derive(Parser)]
#[command(name = "psdp", version, about = "Parameter sharing decoder pair language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the parameter breakdown of a model config.
    CountParams {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a model. Config keys: see `dump-config`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: Option<Task>,
        /// Override a config key, `key=value`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Sample a continuation of a prompt.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value = "wordpiece")]
        tokenizer: TokenizerKind,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        retries: usize,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Generate chunk by chunk, keeping the best of several candidates.
        #[arg(long)]
        chunked: bool,
        #[arg(long, default_value_t = 8)]
        chunk_len: usize,
        #[arg(long, default_value_t = 4)]
        candidates: usize,
    },
    /// Complete the second sentence of a couplet.
    Couplet {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value = "char")]
        tokenizer: TokenizerKind,
        #[arg(long)]
        first: String,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 15)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        retries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Show how text is split into vocabulary pieces.
    Tokenize {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value = "wordpiece")]
        mode: TokenizerKind,
        text: String,
    },
    /// Mean loss of a checkpoint on the corpus named in a config.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print a config with every default filled in.
    DumpConfig {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::CountParams { config } => commands::count_params(&config),
        Command::Train {
            config,
            task,
            overrides,
        } => commands::train(&config, task, &overrides),
        Command::Generate {
            checkpoint,
            vocab,
            tokenizer,
            prompt,
            k,
            retries,
            max_tokens,
            seed,
            temperature,
            chunked,
            chunk_len,
            candidates,
        } => commands::generate(commands::GenerateArgs {
            checkpoint,
            vocab,
            tokenizer,
            prompt,
            k,
            retries,
            max_tokens,
            seed,
            temperature,
            chunks: chunked.then_some(psdp::ChunkPolicy {
                chunk_len,
                candidates,
            }),
        }),
        Command::Couplet {
            checkpoint,
            vocab,
            tokenizer,
            first,
            n,
            k,
            retries,
            seed,
            temperature,
        } => commands::couplet(commands::CoupletArgs {
            checkpoint,
            vocab,
            tokenizer,
            first,
            n,
            k,
            retries,
            seed,
            temperature,
        }),
        Command::Tokenize { vocab, mode, text } => commands::tokenize(&vocab, mode, &text),
        Command::Eval {
            config,
            checkpoint,
            overrides,
        } => commands::eval(&config, &checkpoint, &overrides),
        Command::DumpConfig { config, overrides } => commands::dump_config(config.as_deref(), &overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
