//! Corpus loading and split selection shared by the commands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use ja_tacotron::features::{ingest_dir, split_corpus, trim_silence, PhonemeInventory, Utterance};
use ja_tacotron::model::ModelConfig;

pub const CORPUS_FILE: &str = "corpus.atnc";
pub const VAL_FRAC: f64 = 0.05;
pub const TEST_FRAC: f64 = 0.05;
pub const MEL_SHIFT_MS: f64 = 12.5;
pub const VOCODER_SHIFT_MS: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

/// A corpus file, a directory holding `corpus.atnc`, or a directory of
/// `.lab`/`.feat` pairs.
pub fn resolve_corpus(path: &Path) -> PathBuf {
    if path.is_dir() && path.join(CORPUS_FILE).is_file() {
        path.join(CORPUS_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_corpus(path: &Path, inv: &PhonemeInventory) -> Result<Vec<Utterance>> {
    let utts = if path.is_dir() {
        ingest_dir(path, inv, MEL_SHIFT_MS, VOCODER_SHIFT_MS)
    } else {
        Utterance::load_corpus(path)
    }
    .with_context(|| format!("loading corpus {}", path.display()))?;
    if utts.is_empty() {
        bail!("corpus {} is empty", path.display());
    }
    Ok(utts)
}

/// Utterances in corpus order: training first, then validation, then test.
pub fn split(utts: &[Utterance], which: Split) -> &[Utterance] {
    let (tr, va, _) = split_corpus(utts.len(), VAL_FRAC, TEST_FRAC);
    match which {
        Split::Train => &utts[..tr],
        Split::Val => &utts[tr..tr + va],
        Split::Test => &utts[tr + va..],
        Split::All => utts,
    }
}

/// Silence-trimmed copies after checking the labels against the model.
pub fn prepare(utts: &[Utterance], inv: &PhonemeInventory, cfg: &ModelConfig) -> Result<Vec<Utterance>> {
    utts.iter()
        .map(|u| {
            check_labels(u, cfg)?;
            trim_silence(u, inv).with_context(|| format!("trimming {}", u.id))
        })
        .collect()
}

pub fn check_labels(u: &Utterance, cfg: &ModelConfig) -> Result<()> {
    if let Some(&p) = u.phonemes.iter().find(|&&p| p >= cfg.n_phonemes) {
        bail!("{}: phoneme id {p} outside the model's {} symbols", u.id, cfg.n_phonemes);
    }
    match (&u.accents, cfg.use_accent_labels) {
        (Some(a), true) => {
            if let Some(&x) = a.iter().find(|&&x| x >= cfg.n_accents) {
                bail!("{}: accent id {x} outside the model's {} types", u.id, cfg.n_accents);
            }
        }
        (None, true) => bail!("{}: model {} expects accent labels", u.id, cfg.code()),
        // Accents present but unused by the model are ignored.
        (_, false) => {}
    }
    Ok(())
}
