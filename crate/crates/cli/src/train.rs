use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::Args;
use ja_tacotron::features::PhonemeInventory;
use ja_tacotron::model::{train, RunConfig, TrainData, TrainState, METRICS_HEADER};
use ja_tacotron::numerics::Checkpoint;

use crate::data::{load_corpus, prepare, resolve_corpus, split, Split};
use crate::manifest::{create_out_dir, hash_input, prepare_out_dir, RunManifest};
use crate::{CmdResult, Failure, UsageContext};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Corpus file, or a directory holding corpus.atnc or `.lab`/`.feat` pairs.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint to continue from; its step counter and optimizer state are kept.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

/// Two configs describe the same run; an unset decoder step limit matches any.
fn same_run(a: &RunConfig, b: &RunConfig) -> bool {
    let mut a = a.clone();
    let mut b = b.clone();
    if a.model.max_decoder_steps == 0 || b.model.max_decoder_steps == 0 {
        a.model.max_decoder_steps = 0;
        b.model.max_decoder_steps = 0;
    }
    a == b
}

pub fn run(a: TrainArgs) -> CmdResult {
    let inv = PhonemeInventory::toy();
    let text = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display())).usage()?;
    let cfg = RunConfig::parse(&text).with_context(|| format!("in {}", a.config.display())).usage()?;
    let corpus_path = resolve_corpus(&a.corpus);
    let utts = load_corpus(&corpus_path, &inv).usage()?;
    let train_u = prepare(split(&utts, Split::Train), &inv, &cfg.model).usage()?;
    let val_u = prepare(split(&utts, Split::Val), &inv, &cfg.model).usage()?;
    let data = TrainData::new(&train_u, &val_u, &inv, &cfg.model).context("preparing training data").usage()?;
    prepare_out_dir(&a.out).usage()?;

    let mut state = match &a.resume {
        None => TrainState::new(cfg.clone(), a.seed).context("building model").usage()?,
        Some(p) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("loading {}", p.display())).usage()?;
            let s =
                TrainState::from_checkpoint(&ckpt).with_context(|| format!("resuming from {}", p.display())).usage()?;
            if !same_run(&s.run, &cfg) {
                return Err(Failure::Usage(anyhow!("{} was trained with a different configuration", p.display())));
            }
            if s.step > a.steps {
                return Err(Failure::Usage(anyhow!("checkpoint is at step {}, beyond --steps {}", s.step, a.steps)));
            }
            s
        }
    };

    create_out_dir(&a.out).runtime()?;
    let mut m = RunManifest::new("train", Some(a.seed));
    m.experiment = Some(cfg.model.code());
    m.config = Some(hash_input(&a.config).runtime()?);
    m.corpus = Some(hash_input(&corpus_path).runtime()?);
    if let Some(p) = &a.resume {
        m.checkpoint = Some(hash_input(p).runtime()?);
    }
    m.write(&a.out).runtime()?;

    let mut body = || -> anyhow::Result<()> {
        let mut metrics = BufWriter::new(File::create(a.out.join(METRICS_FILE))?);
        writeln!(metrics, "{METRICS_HEADER}")?;
        let start = state.step;
        let outcome = train(&mut state, &data, a.steps, a.seed, Some(&a.out), &mut metrics);
        metrics.flush()?;
        // The resolved config records the decoder step limit fixed at start.
        std::fs::write(a.out.join(CONFIG_FILE), state.run.to_text())?;
        let outcome = outcome?;
        match outcome.last_train {
            Some(l) => log::info!("steps {start}..{}: last loss {:.5} (L1 {:.5})", state.step, l.total, l.l1),
            None => log::info!("no steps run; wrote the checkpoint at step {}", state.step),
        }
        Ok(())
    };
    body().runtime()?;
    m.finish(&a.out).map_err(Failure::Runtime)
}
