//! `ja-tacotron`: corpus generation, training, synthesis and evaluation runs.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, config or inputs),
//! 2 runtime failure.

mod data;
mod eval;
mod manifest;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ja_tacotron::features::{
    generate_toy_corpus, ingest_dir, split_corpus, PhonemeInventory, ToyCorpusConfig, Utterance,
};

use data::{CORPUS_FILE, MEL_SHIFT_MS, TEST_FRAC, VAL_FRAC, VOCODER_SHIFT_MS};
use manifest::{create_out_dir, hash_input, prepare_out_dir, RunManifest};

#[derive(Parser)]
#[command(name = "ja-tacotron", version, about = "Japanese Tacotron experiments on toy or ingested corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic pitch-accent corpus.
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Output directory; receives corpus.atnc and manifest.json.
        #[arg(long)]
        out: PathBuf,
        /// Accentual types drawn per phrase (1 to 4).
        #[arg(long, default_value_t = 4)]
        accent_types: usize,
    },
    /// Convert a directory of `.lab`/`.feat` pairs into a corpus file.
    Ingest {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = MEL_SHIFT_MS)]
        mel_shift_ms: f64,
        #[arg(long, default_value_t = VOCODER_SHIFT_MS)]
        vocoder_shift_ms: f64,
    },
    /// Train a model; `--steps` is the total step count, also when resuming.
    Train(train::TrainArgs),
    /// Decode a split of a corpus with a trained checkpoint.
    Synth(synth::SynthArgs),
    /// Objective evaluation of synthesis dumps against reference features.
    Eval(eval::EvalArgs),
}

/// Failure kind, mapped to the exit code.
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

pub type CmdResult = std::result::Result<(), Failure>;

pub trait UsageContext<T> {
    fn usage(self) -> std::result::Result<T, Failure>;
    fn runtime(self) -> std::result::Result<T, Failure>;
}

impl<T> UsageContext<T> for Result<T> {
    fn usage(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Usage)
    }
    fn runtime(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Runtime)
    }
}

fn gen_corpus(seed: u64, n: usize, out: PathBuf, accent_types: usize) -> CmdResult {
    let inv = PhonemeInventory::toy();
    prepare_out_dir(&out).usage()?;
    let utts = generate_toy_corpus(seed, n, &inv, accent_types, &ToyCorpusConfig::default())
        .context("generating corpus")
        .usage()?;
    create_out_dir(&out).runtime()?;
    let mut m = RunManifest::new("gen-corpus", Some(seed));
    m.write(&out).runtime()?;
    let path = out.join(CORPUS_FILE);
    Utterance::save_corpus(&path, &utts).context("writing corpus").runtime()?;
    m.corpus = Some(hash_input(&path).runtime()?);
    m.finish(&out).runtime()?;
    let (tr, va, te) = split_corpus(n, VAL_FRAC, TEST_FRAC);
    println!("{}: {n} utterances, split {tr}/{va}/{te}", path.display());
    Ok(())
}

fn ingest(dir: PathBuf, out: PathBuf, mel_shift_ms: f64, vocoder_shift_ms: f64) -> CmdResult {
    let inv = PhonemeInventory::toy();
    prepare_out_dir(&out).usage()?;
    let utts = ingest_dir(&dir, &inv, mel_shift_ms, vocoder_shift_ms)
        .with_context(|| format!("ingesting {}", dir.display()))
        .usage()?;
    if utts.is_empty() {
        return Err(Failure::Usage(anyhow::anyhow!("no .lab files in {}", dir.display())));
    }
    create_out_dir(&out).runtime()?;
    let mut m = RunManifest::new("ingest", None);
    m.corpus = Some(hash_input(&dir).runtime()?);
    m.write(&out).runtime()?;
    Utterance::save_corpus(&out.join(CORPUS_FILE), &utts).context("writing corpus").runtime()?;
    m.finish(&out).runtime()?;
    println!("{}: {} utterances", out.join(CORPUS_FILE).display(), utts.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let r = match cli.command {
        Command::GenCorpus { seed, n, out, accent_types } => gen_corpus(seed, n, out, accent_types),
        Command::Ingest { dir, out, mel_shift_ms, vocoder_shift_ms } => {
            ingest(dir, out, mel_shift_ms, vocoder_shift_ms)
        }
        Command::Train(a) => train::run(a),
        Command::Synth(a) => synth::run(a),
        Command::Eval(a) => eval::run(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
