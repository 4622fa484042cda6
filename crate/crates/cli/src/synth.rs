use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use ja_tacotron::features::{write_feature_file, PhonemeInventory, Utterance};
use ja_tacotron::model::{Labels, Model, PredictionOutput, Target, Targets};
use ja_tacotron::numerics::{Checkpoint, RngStream};

use crate::data::{load_corpus, prepare, resolve_corpus, split, Split};
use crate::manifest::{create_out_dir, hash_input, prepare_out_dir, RunManifest};
use crate::{CmdResult, UsageContext};

pub const SYNTH_INDEX: &str = "synth.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthMode {
    /// Predicted alignment: free-running decoding from labels alone.
    Free,
    /// Teacher-forced alignment reused for a free-running pass.
    Forced,
    /// Teacher forcing throughout.
    Teacher,
}

impl SynthMode {
    /// Last letter of the experiment code.
    pub fn letter(self) -> char {
        match self {
            SynthMode::Free => 'P',
            SynthMode::Forced => 'F',
            SynthMode::Teacher => 'T',
        }
    }
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus file, or a directory holding corpus.atnc or `.lab`/`.feat` pairs.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub mode: SynthMode,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Predicted streams as an utterance: mel rows, or MGC rows with decoded F0.
fn predicted_features(u: &Utterance, pred: &PredictionOutput, model: &Model) -> ja_tacotron::Result<Utterance> {
    let mut out = Utterance {
        id: u.id.clone(),
        phonemes: u.phonemes.clone(),
        accents: None,
        durations: None,
        mel: None,
        mgc: None,
        logf0: None,
        voiced: None,
        mel_shift_ms: u.mel_shift_ms,
        vocoder_shift_ms: u.vocoder_shift_ms,
    };
    match model.cfg.target {
        Target::Mel => out.mel = Some(pred.frames.clone()),
        Target::Vocoder => {
            out.mgc = Some(pred.frames.clone());
            if let Some((hz, voiced)) = pred.f0_track(&model.cfg.f0)? {
                out.logf0 = Some(hz.iter().zip(&voiced).map(|(&f, &v)| if v { f.ln() } else { 0.0 }).collect());
                out.voiced = Some(voiced);
            }
        }
    }
    Ok(out)
}

fn write_outputs(dir: &Path, u: &Utterance, pred: &PredictionOutput, model: &Model) -> anyhow::Result<()> {
    let feats = predicted_features(u, pred, model)?;
    let mut f = BufWriter::new(File::create(dir.join(format!("{}.feat", u.id)))?);
    write_feature_file(&mut f, &feats)?;
    f.flush()?;
    for a in pred.alignments.iter().chain(&pred.encoder_self) {
        let mut f = BufWriter::new(File::create(dir.join(format!("{}_{}.csv", u.id, a.source_kind)))?);
        a.write_csv(&mut f)?;
        f.flush()?;
    }
    Ok(())
}

pub fn run(a: SynthArgs) -> CmdResult {
    let inv = PhonemeInventory::toy();
    let ckpt = Checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display())).usage()?;
    let (model, _) = Model::from_checkpoint(&ckpt).context("restoring model").usage()?;
    let input = resolve_corpus(&a.input);
    let utts = load_corpus(&input, &inv).usage()?;
    let utts = prepare(split(&utts, a.split), &inv, &model.cfg).usage()?;
    if utts.is_empty() {
        return Err(crate::Failure::Usage(anyhow!("the {:?} split of {} is empty", a.split, input.display())));
    }
    let targets: Vec<Option<Targets>> = match a.mode {
        SynthMode::Free => vec![None; utts.len()],
        SynthMode::Forced | SynthMode::Teacher => utts
            .iter()
            .map(|u| {
                Targets::from_utterance(u, &model.cfg)
                    .with_context(|| {
                        format!(
                            "{} mode needs target features",
                            if a.mode == SynthMode::Forced { "forced" } else { "teacher" }
                        )
                    })
                    .map(Some)
            })
            .collect::<anyhow::Result<_>>()
            .usage()?,
    };
    prepare_out_dir(&a.out).usage()?;

    create_out_dir(&a.out).runtime()?;
    let experiment = format!("{}{}", model.cfg.code(), a.mode.letter());
    let mut m = RunManifest::new("synth", Some(a.seed));
    m.experiment = Some(experiment.clone());
    m.checkpoint = Some(hash_input(&a.ckpt).runtime()?);
    m.corpus = Some(hash_input(&input).runtime()?);
    m.write(&a.out).runtime()?;

    let body = || -> anyhow::Result<()> {
        let rng = RngStream::new(a.seed);
        let mut index = BufWriter::new(File::create(a.out.join(SYNTH_INDEX))?);
        writeln!(index, "id,mode,steps,frames,stopped_by")?;
        for (u, t) in utts.iter().zip(&targets) {
            let labels = Labels::of(u, model.cfg.use_accent_labels);
            let pred = match (a.mode, t) {
                (SynthMode::Free, _) => model.decode_free_running(labels, &rng),
                (SynthMode::Forced, Some(t)) => model.decode_forced_alignment(labels, t, &rng),
                (SynthMode::Teacher, Some(t)) => model.decode_teacher_forced(labels, t, &rng),
                _ => unreachable!("targets checked above"),
            }
            .with_context(|| format!("decoding {}", u.id))?;
            write_outputs(&a.out, u, &pred, &model).with_context(|| format!("writing {}", u.id))?;
            writeln!(index, "{},{:?},{},{},{:?}", u.id, a.mode, pred.steps, pred.frames.rows(), pred.stopped_by)?;
        }
        index.flush()?;
        log::info!("{experiment}: {} utterances to {}", utts.len(), a.out.display());
        Ok(())
    };
    body().runtime()?;
    m.finish(&a.out).runtime()
}
