use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::features::{trim_silence, PhonemeInventory, Utterance};
use crate::numerics::{
    adam_step, clip_global_norm, exp_decay_lr, AdamState, Checkpoint, Mode, RngStream, Substream, Tape,
};

use super::{Labels, LossComponents, Model, PredictionOutput, RunConfig, SaMode, Targets};

pub const METRICS_HEADER: &str = "step,lr,loss,loss_l1,loss_f0,loss_stop,val_loss";

/// Fork key of the validation stream, kept apart from per-step keys.
const RNG_VALIDATION: u64 = u64::MAX;

struct Example {
    id: String,
    phonemes: Vec<usize>,
    accents: Option<Vec<usize>>,
    targets: Targets,
}

impl Example {
    fn labels(&self) -> Labels<'_> {
        Labels { phonemes: &self.phonemes, accents: self.accents.as_deref() }
    }
}

/// Silence-trimmed training and validation examples.
pub struct TrainData {
    train: Vec<Example>,
    val: Vec<Example>,
}

impl TrainData {
    pub fn new(
        train: &[Utterance],
        val: &[Utterance],
        inv: &PhonemeInventory,
        cfg: &super::ModelConfig,
    ) -> Result<Self> {
        let prep = |us: &[Utterance]| -> Result<Vec<Example>> {
            us.iter()
                .map(|u| {
                    let u = trim_silence(u, inv)?;
                    let targets = Targets::from_utterance(&u, cfg)?;
                    let accents =
                        if cfg.use_accent_labels {
                            Some(u.accents.clone().ok_or_else(|| {
                                Error::InvalidArgument(format!("{}: model expects accent labels", u.id))
                            })?)
                        } else {
                            None
                        };
                    Ok(Example { id: u.id.clone(), phonemes: u.phonemes.clone(), accents, targets })
                })
                .collect()
        };
        let train = prep(train)?;
        if train.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        Ok(Self { train, val: prep(val)? })
    }

    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn n_val(&self) -> usize {
        self.val.len()
    }

    /// Longest training target in decoder steps.
    pub fn max_steps(&self, r: usize) -> usize {
        self.train.iter().map(|e| e.targets.steps(r)).max().unwrap_or(0)
    }
}

/// Model, optimizer state and step counter.
pub struct TrainState {
    pub run: RunConfig,
    pub model: Model,
    pub adam: AdamState,
    pub step: u64,
}

impl TrainState {
    pub fn new(run: RunConfig, seed: u64) -> Result<Self> {
        run.model.validate()?;
        let problems = run.train.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let model = Model::new(run.model.clone(), seed)?;
        let t = &run.train;
        let adam = AdamState::with_hyper(&model.params, t.adam_beta1, t.adam_beta2, t.adam_epsilon);
        Ok(Self { run, model, adam, step: 0 })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: self.run.to_text(),
            step: self.step,
            params: self.model.params.clone(),
            adam: Some(self.adam.clone()),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (model, run) = Model::from_checkpoint(ckpt)?;
        let adam = match &ckpt.adam {
            Some(a) => a.clone(),
            None => {
                return Err(Error::Format { what: "checkpoint", detail: "no optimizer state to resume from".into() })
            }
        };
        Ok(Self { run, model, adam, step: ckpt.step })
    }
}

/// Batches of one epoch: a seeded shuffle, then sorting within windows of
/// four batches by target length, then a shuffle of the batches.
pub fn batch_order(seed: u64, epoch: u64, lengths: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut rng = RngStream::new(seed).fork(epoch).fork(0xba7c).rng(Substream::Data);
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(&mut rng);
    for w in idx.chunks_mut(4 * batch_size) {
        w.sort_by_key(|&i| lengths[i]);
    }
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(&mut rng);
    batches
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Validation losses of every validated step, in order.
    pub validations: Vec<(u64, LossComponents)>,
    /// Training loss of the last executed step.
    pub last_train: Option<LossComponents>,
    pub steps_run: u64,
}

/// Mean validation loss (teacher forced, inference mode) and the
/// predictions it was computed from.
pub fn validation_loss(
    model: &Model,
    data: &TrainData,
    seed: u64,
) -> Result<Option<(LossComponents, Vec<PredictionOutput>)>> {
    if data.val.is_empty() {
        return Ok(None);
    }
    let rng = RngStream::new(seed).fork(RNG_VALIDATION);
    let mut sum = LossComponents { total: 0.0, l1: 0.0, f0: None, stop: 0.0 };
    let mut preds = Vec::with_capacity(data.val.len());
    for e in &data.val {
        let pred = model.decode_teacher_forced(e.labels(), &e.targets, &rng)?;
        let l = super::compute_loss(&pred, &e.targets, &model.cfg)?;
        sum.total += l.total;
        sum.l1 += l.l1;
        sum.stop += l.stop;
        if let Some(f) = l.f0 {
            *sum.f0.get_or_insert(0.0) += f;
        }
        preds.push(pred);
    }
    let k = 1.0 / data.val.len() as f64;
    let mean = LossComponents { total: sum.total * k, l1: sum.l1 * k, f0: sum.f0.map(|f| f * k), stop: sum.stop * k };
    Ok(Some((mean, preds)))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9e}")).unwrap_or_default()
}

fn dump_alignments(dir: &Path, step: u64, id: &str, pred: &PredictionOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for a in pred.alignments.iter().chain(&pred.encoder_self) {
        let path = dir.join(format!("step{step:06}_{id}_{}.csv", a.source_kind));
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        a.write_csv(&mut f)?;
        f.flush()?;
    }
    Ok(())
}

/// Runs optimization until `state.step == total_steps`.
///
/// Each step draws its batch from `(seed, epoch)` and its dropout and zoneout
/// masks from `(seed, step)`, so an interrupted run resumed from a checkpoint
/// continues exactly. Metrics rows go to `metrics` (no header). With
/// `out_dir`, periodic checkpoints, alignment dumps of the first validation
/// utterance and `final.ckpt` are written there.
pub fn train(
    state: &mut TrainState,
    data: &TrainData,
    total_steps: u64,
    seed: u64,
    out_dir: Option<&Path>,
    metrics: &mut dyn Write,
) -> Result<TrainOutcome> {
    let r = state.run.model.reduction_factor;
    if state.run.model.max_decoder_steps == 0 {
        state.run.model.max_decoder_steps = 4 * data.max_steps(r);
        state.model.cfg.max_decoder_steps = state.run.model.max_decoder_steps;
    }
    let tc = state.run.train.clone();
    let lengths: Vec<usize> = data.train.iter().map(|e| e.targets.len()).collect();
    let n_batches = lengths.len().div_ceil(tc.batch_size) as u64;
    let root = RngStream::new(seed);
    let mut epoch_cache: Option<(u64, Vec<Vec<usize>>)> = None;
    let mut outcome = TrainOutcome { validations: Vec::new(), last_train: None, steps_run: 0 };

    while state.step < total_steps {
        let step = state.step;
        let lr = exp_decay_lr(step, tc.learning_rate, tc.lr_decay_rate, tc.lr_decay_interval);
        let epoch = step / n_batches;
        if epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
            epoch_cache = Some((epoch, batch_order(seed, epoch, &lengths, tc.batch_size)));
        }
        let batch = &epoch_cache.as_ref().expect("cached epoch").1[(step % n_batches) as usize];
        let examples: Vec<&Example> = batch.iter().map(|&i| &data.train[i]).collect();
        let labels: Vec<Labels> = examples.iter().map(|e| e.labels()).collect();
        let targets: Vec<Targets> = examples.iter().map(|e| e.targets.clone()).collect();

        let rng = root.fork(step);
        let mut tape = Tape::new();
        let p = state.model.params.bind(&mut tape);
        let forward = (|| {
            let enc = state.model.encode(&mut tape, &p, &labels, Mode::Train, &rng)?;
            let run = state.model.decode_batch_teacher_forced(
                &mut tape,
                &p,
                &enc,
                &targets,
                Mode::Train,
                &rng,
                SaMode::Parallel,
                None,
            )?;
            run.loss(&mut tape, &state.model.cfg, &targets)
        })();
        let loss = match forward {
            Ok(l) => l,
            Err(e @ (Error::NonFinite(_) | Error::DegenerateAlignment(_))) => {
                return Err(diverged(state, out_dir, step, e.to_string()));
            }
            Err(e) => return Err(e),
        };
        let lv = loss.values(&tape);

        let val = if step % tc.val_interval == 0 || step + 1 == total_steps {
            match validation_loss(&state.model, data, seed)? {
                Some((v, preds)) => {
                    if let Some(dir) = out_dir {
                        dump_alignments(&dir.join("alignments"), step, &data.val[0].id, &preds[0])?;
                    }
                    outcome.validations.push((step, v));
                    Some(v.total)
                }
                None => None,
            }
        } else {
            None
        };
        writeln!(
            metrics,
            "{step},{lr:.9e},{:.9e},{:.9e},{},{:.9e},{}",
            lv.total,
            lv.l1,
            fmt_opt(lv.f0),
            lv.stop,
            fmt_opt(val)
        )?;

        if !lv.total.is_finite() {
            return Err(diverged(state, out_dir, step, format!("loss is {}", lv.total)));
        }
        let grads = tape.backward(loss.total)?;
        let mut g = p.gradients(&state.model.params, &grads);
        clip_global_norm(&mut g, tc.grad_clip_norm);
        if let Err(e) = adam_step(&mut state.model.params, &g, &mut state.adam, lr) {
            return Err(match e {
                Error::NonFinite(d) => diverged(state, out_dir, step, d),
                e => e,
            });
        }
        state.step += 1;
        outcome.steps_run += 1;
        outcome.last_train = Some(lv);
        if let Some(dir) = out_dir {
            if state.step % tc.checkpoint_interval == 0 {
                state.checkpoint().save(&dir.join(format!("step{:06}.ckpt", state.step)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        state.checkpoint().save(&dir.join("final.ckpt"))?;
    }
    Ok(outcome)
}

/// Saves the pre-step state as `last_good.ckpt` and builds the error.
fn diverged(state: &TrainState, out_dir: Option<&Path>, step: u64, detail: String) -> Error {
    if let Some(dir) = out_dir {
        if let Err(e) = state.checkpoint().save(&dir.join("last_good.ckpt")) {
            log::error!("could not save last good checkpoint: {e}");
        }
    }
    Error::Diverged { step, detail }
}
