use crate::attention::{AlignmentMatrix, DualMemory, ForcedWeights, IncrementalSAState, SourceKind};
use crate::error::{Error, Result};
use crate::features::group_frames;
use crate::numerics::{Bound, Mode, RngStream, Tape, Tensor, Var, Zoneout};

use super::{
    attention_submatrices, time_to_batch_major, EncoderOutputs, Heads, Labels, Model, PredictionOutput, Target,
    Targets, RNG_DECODER, RNG_DECODER_SA,
};

/// How decoder self-attention is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaMode {
    /// All steps at once under a causal mask (teacher forcing only).
    Parallel,
    /// One frame per step against cached keys and values.
    Incremental,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    StopFlag,
    MaxSteps,
    /// Step count fixed by the target (teacher forcing, forced alignment).
    Target,
}

/// Decoder self-attention nodes of a run.
#[derive(Clone, Debug)]
enum DecoderSaNodes {
    None,
    /// One `[steps, steps]` node per hop.
    Parallel(Vec<Var>),
    /// Per step, one `[1, step + 1]` node per hop.
    Incremental(Vec<Vec<Var>>),
}

/// Tape handles of a decoder run over a padded batch.
#[derive(Clone, Debug)]
pub struct DecoderRun {
    /// `[batch * steps, r * frame_dim]`, batch-major.
    pub frames: Var,
    /// `[batch * steps * r, n_classes]` (VOCODER only).
    pub f0_logits: Option<Var>,
    /// `[batch * steps, 1]`.
    pub stop_logits: Var,
    /// Decoder output after self-attention, `[batch * steps, decoder_lstm_dim]`.
    pub decoder_out: Var,
    /// Forward-attention weights per step, `[batch, n]`.
    pub alphas: Vec<Var>,
    /// Additive weights over the self-attended memory per step (SA only).
    pub sa_weights: Vec<Var>,
    pub steps: usize,
    pub batch: usize,
    sa_nodes: DecoderSaNodes,
}

struct DecState {
    ah: Var,
    ac: Var,
    layers: Vec<(Var, Var)>,
    alpha: Var,
    ctx: Var,
    sa: Option<IncrementalSAState>,
}

struct StepOut {
    /// Decoder LSTM (and, incrementally, self-attention) output `[batch, h]`.
    h: Var,
    ctx: Var,
    alpha: Var,
    sa_weights: Option<Var>,
    sa_nodes: Vec<Var>,
}

struct HeadOut {
    frames: Var,
    f0_logits: Option<Var>,
    stop: Var,
}

fn ensure_finite(tape: &Tape, v: Var, what: &str, step: usize) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} at decoder step {step}")))
    }
}

impl Model {
    fn feedback_dim(&self) -> usize {
        self.cfg.frame_dim() + if self.cfg.target == Target::Vocoder { self.cfg.f0.n_classes() } else { 0 }
    }

    fn initial_state(&self, tape: &mut Tape, enc: &EncoderOutputs, incremental: bool) -> DecState {
        let b = enc.batch();
        let c = &self.cfg;
        let zeros = |tape: &mut Tape, d: usize| tape.leaf(Tensor::zeros(&[b, d]));
        let ah = zeros(tape, c.attention_rnn_dim);
        let ac = zeros(tape, c.attention_rnn_dim);
        let layers = (0..c.decoder_lstm_layers)
            .map(|_| (zeros(tape, c.decoder_lstm_dim), zeros(tape, c.decoder_lstm_dim)))
            .collect();
        let mut a = Tensor::zeros(&[b, enc.n]);
        for i in 0..b {
            a.row_mut(i)[0] = 1.0;
        }
        let alpha = tape.leaf(a);
        let ctx = zeros(tape, self.decoder.attention.context_dim());
        let sa = match (&self.decoder.sa, incremental) {
            (Some(block), true) => Some(IncrementalSAState::new(b, block.mha.cfg.hops)),
            _ => None,
        };
        DecState { ah, ac, layers, alpha, ctx, sa }
    }

    fn prenet_feedback(&self, tape: &mut Tape, p: &Bound, fb: Var, mode: Mode, rng: &RngStream) -> Var {
        let d = &self.decoder;
        match &d.f0_prenet {
            None => d.prenet.forward(tape, p, fb, mode, &rng.fork(0)),
            Some(f0p) => {
                let k = self.cfg.frame_dim();
                let c = self.cfg.f0.n_classes();
                let mgc = tape.slice_cols(fb, 0, k);
                let f0 = tape.slice_cols(fb, k, c);
                let a = d.prenet.forward(tape, p, mgc, mode, &rng.fork(0));
                let b = f0p.forward(tape, p, f0, mode, &rng.fork(1));
                tape.concat_cols(&[a, b])
            }
        }
    }

    /// Feedback pre-nets, attention RNN, dual-source attention and decoder
    /// LSTMs for one step; with an incremental state, also decoder
    /// self-attention.
    #[allow(clippy::too_many_arguments)]
    fn core_step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        st: &mut DecState,
        fb: Var,
        mem: &DualMemory,
        lens: &[usize],
        mode: Mode,
        rng: &RngStream,
        forced: Option<&ForcedWeights>,
    ) -> Result<StepOut> {
        let d = &self.decoder;
        let x = self.prenet_feedback(tape, p, fb, mode, rng);
        let ai = tape.concat_cols(&[x, st.ctx]);
        let no_zoneout = Zoneout::new(0.0, mode)?;
        let (ah, ac) = d.att_rnn.step(tape, p, ai, st.ah, st.ac, no_zoneout, &rng.fork(2));
        let ds = d.attention.step(tape, p, ah, mem, st.alpha, lens, forced)?;
        let zo = Zoneout::new(self.cfg.zoneout_rate, mode)?;
        let mut inp = tape.concat_cols(&[ah, ds.context]);
        for (l, cell) in d.lstms.iter().enumerate() {
            let (h, c) = st.layers[l];
            let (h, c) = cell.step(tape, p, inp, h, c, zo, &rng.fork(3 + l as u64));
            st.layers[l] = (h, c);
            inp = h;
        }
        let mut sa_nodes = Vec::new();
        if let (Some(block), Some(state)) = (&d.sa, st.sa.as_mut()) {
            let (y, nodes) = block.incremental_step(tape, p, state, inp, mode, &rng.fork(1000))?;
            inp = y;
            sa_nodes = nodes;
        }
        st.ah = ah;
        st.ac = ac;
        st.alpha = ds.alpha;
        st.ctx = ds.context;
        Ok(StepOut { h: inp, ctx: ds.context, alpha: ds.alpha, sa_weights: ds.sa_weights, sa_nodes })
    }

    fn heads(&self, tape: &mut Tape, p: &Bound, x: Var) -> HeadOut {
        let r = self.cfg.reduction_factor;
        match &self.decoder.heads {
            Heads::Mel { frames, stop } => {
                HeadOut { frames: frames.forward(tape, p, x), f0_logits: None, stop: stop.forward(tape, p, x) }
            }
            Heads::Vocoder { mgc_hidden, mgc_out, f0, stop } => {
                let h = mgc_hidden.forward(tape, p, x);
                let h = tape.tanh(h);
                let frames = mgc_out.forward(tape, p, h);
                let logits = f0.forward(tape, p, x);
                let rows = tape.shape(logits).0;
                let logits = tape.reshape(logits, rows * r, self.cfg.f0.n_classes());
                HeadOut { frames, f0_logits: Some(logits), stop: stop.forward(tape, p, x) }
            }
        }
    }

    fn memory(&self, tape: &mut Tape, p: &Bound, enc: &EncoderOutputs) -> Result<DualMemory> {
        self.decoder.attention.prepare(tape, p, enc.lstm_out, enc.sa_out)
    }

    /// Teacher-forced decoding of a padded batch: the feedback at step `t` is
    /// the ground-truth last frame of group `t - 1`. Runs for the longest
    /// target's step count.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_batch_teacher_forced(
        &self,
        tape: &mut Tape,
        p: &Bound,
        enc: &EncoderOutputs,
        targets: &[Targets],
        mode: Mode,
        rng: &RngStream,
        sa_mode: SaMode,
        forced: Option<&[ForcedWeights]>,
    ) -> Result<DecoderRun> {
        let b = enc.batch();
        if targets.len() != b {
            return Err(Error::Shape(format!("{} targets for a batch of {b}", targets.len())));
        }
        let r = self.cfg.reduction_factor;
        let steps = targets.iter().map(|t| t.steps(r)).max().unwrap_or(0);
        if let Some(f) = forced {
            if f.len() != steps {
                return Err(Error::Shape(format!("{} recorded steps, decoding needs {steps}", f.len())));
            }
        }
        let fb_dim = self.feedback_dim();
        let n_classes = self.cfg.f0.n_classes();
        let mem = self.memory(tape, p, enc)?;
        let incremental = sa_mode == SaMode::Incremental;
        let mut st = self.initial_state(tape, enc, incremental);
        let drng = rng.fork(RNG_DECODER);
        let (mut hs, mut ctxs, mut alphas, mut saw, mut inc_nodes) = (vec![], vec![], vec![], vec![], vec![]);
        for t in 0..steps {
            let mut fb = vec![0.0; b * fb_dim];
            if t > 0 {
                for (i, tg) in targets.iter().enumerate() {
                    let f = t * r - 1;
                    if f < tg.len() {
                        fb[i * fb_dim..(i + 1) * fb_dim].copy_from_slice(&tg.feedback_row(f, n_classes));
                    }
                }
            }
            let fb = tape.leaf(Tensor::matrix(b, fb_dim, fb)?);
            let out = self.core_step(
                tape,
                p,
                &mut st,
                fb,
                &mem,
                &enc.lens,
                mode,
                &drng.fork(t as u64),
                forced.map(|f| &f[t]),
            )?;
            hs.push(out.h);
            ctxs.push(out.ctx);
            alphas.push(out.alpha);
            if let Some(w) = out.sa_weights {
                saw.push(w);
            }
            if incremental {
                inc_nodes.push(out.sa_nodes);
            }
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("teacher forcing needs at least one target frame".into()));
        }
        let perm = time_to_batch_major(b, steps);
        let h = tape.concat_rows(&hs);
        let h = tape.gather_rows(h, perm.clone());
        let ctx = tape.concat_rows(&ctxs);
        let ctx = tape.gather_rows(ctx, perm);
        let (decoder_out, sa_nodes) = match (&self.decoder.sa, sa_mode) {
            (None, _) => (h, DecoderSaNodes::None),
            (Some(_), SaMode::Incremental) => (h, DecoderSaNodes::Incremental(inc_nodes)),
            (Some(block), SaMode::Parallel) => {
                let (y, nodes) = block.forward(tape, p, h, b, steps, None, true, mode, &rng.fork(RNG_DECODER_SA))?;
                (y, DecoderSaNodes::Parallel(nodes))
            }
        };
        let x = tape.concat_cols(&[decoder_out, ctx]);
        let ho = self.heads(tape, p, x);
        for v in [ho.frames, ho.stop].into_iter().chain(ho.f0_logits) {
            ensure_finite(tape, v, "decoder output", steps)?;
        }
        Ok(DecoderRun {
            frames: ho.frames,
            f0_logits: ho.f0_logits,
            stop_logits: ho.stop,
            decoder_out,
            alphas,
            sa_weights: saw,
            steps,
            batch: b,
            sa_nodes,
        })
    }

    /// Attention matrices of batch item `b` over its first `steps` steps.
    pub fn run_alignments(
        &self,
        tape: &Tape,
        run: &DecoderRun,
        enc: &EncoderOutputs,
        b: usize,
        steps: usize,
    ) -> Result<Vec<AlignmentMatrix>> {
        let len = enc.lens[b];
        let rows = |vs: &[Var]| -> Result<Tensor> {
            let data = vs[..steps].iter().flat_map(|&v| tape.value(v).row(b)[..len].to_vec()).collect();
            Tensor::matrix(steps, len, data)
        };
        let mut out = vec![AlignmentMatrix::new(SourceKind::LstmMemory, vec![rows(&run.alphas)?])?];
        if !run.sa_weights.is_empty() {
            out.push(AlignmentMatrix::new(SourceKind::SelfAttendedMemory, vec![rows(&run.sa_weights)?])?);
        }
        match &run.sa_nodes {
            DecoderSaNodes::None => {}
            DecoderSaNodes::Parallel(nodes) => {
                let mut heads = Vec::new();
                for &node in nodes {
                    heads.extend(attention_submatrices(tape, node, b, steps, steps)?);
                }
                out.push(AlignmentMatrix::new(SourceKind::DecoderSelf, heads)?);
            }
            DecoderSaNodes::Incremental(per_step) => {
                let n_heads = self.cfg.decoder_sa.map_or(0, |m| m.n_heads);
                let hops = per_step.first().map_or(0, Vec::len);
                let mut heads = vec![Tensor::zeros(&[steps, steps]); hops * n_heads];
                for (t, nodes) in per_step.iter().take(steps).enumerate() {
                    for (hop, &node) in nodes.iter().enumerate() {
                        for (h, m) in attention_submatrices(tape, node, b, 1, t + 1)?.into_iter().enumerate() {
                            heads[hop * n_heads + h].row_mut(t)[..=t].copy_from_slice(m.data());
                        }
                    }
                }
                out.push(AlignmentMatrix::new(SourceKind::DecoderSelf, heads)?);
            }
        }
        Ok(out)
    }

    /// Plain predictions of batch item `b`, truncated to its own step count.
    pub fn run_prediction(
        &self,
        tape: &Tape,
        run: &DecoderRun,
        enc: &EncoderOutputs,
        b: usize,
        steps: usize,
        stopped_by: StopReason,
    ) -> Result<PredictionOutput> {
        let r = self.cfg.reduction_factor;
        let d = self.cfg.frame_dim();
        let s = run.steps;
        let frames = tape.value(run.frames).slice_rows(b * s, steps).reshape(vec![steps * r, d])?;
        let f0_logits = run.f0_logits.map(|v| tape.value(v).slice_rows(b * s * r, steps * r));
        let stop_logits: Vec<f64> = tape.value(run.stop_logits).data()[b * s..b * s + steps].to_vec();
        let stop_probs = stop_logits.iter().map(|&z| sigmoid(z)).collect();
        Ok(PredictionOutput {
            frames,
            f0_logits,
            stop_logits,
            stop_probs,
            alignments: self.run_alignments(tape, run, enc, b, steps)?,
            encoder_self: self.encoder_self_alignment(tape, enc, b)?,
            stopped_by,
            steps,
            reduction_factor: r,
        })
    }

    /// Teacher-forced prediction of one utterance in inference mode, with the
    /// decoder self-attention evaluated in parallel.
    pub fn decode_teacher_forced(
        &self,
        labels: Labels,
        targets: &Targets,
        rng: &RngStream,
    ) -> Result<PredictionOutput> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let enc = self.encode(&mut tape, &p, &[labels], Mode::Infer, rng)?;
        let run = self.decode_batch_teacher_forced(
            &mut tape,
            &p,
            &enc,
            std::slice::from_ref(targets),
            Mode::Infer,
            rng,
            SaMode::Parallel,
            None,
        )?;
        self.run_prediction(&tape, &run, &enc, 0, run.steps, StopReason::Target)
    }

    /// Autoregressive decoding of a single utterance. Stops after the first
    /// step whose stop probability exceeds the threshold, or at the step limit.
    ///
    /// With `forced`, runs exactly `forced.len()` steps using those attention
    /// weights and ignores the stop flag.
    fn free_run(&self, labels: Labels, rng: &RngStream, forced: Option<&[ForcedWeights]>) -> Result<PredictionOutput> {
        let mut tape = Tape::new();
        let tape = &mut tape;
        let p = self.params.bind(tape);
        let mode = Mode::Infer;
        let enc = self.encode(tape, &p, &[labels], mode, rng)?;
        let mem = self.memory(tape, &p, &enc)?;
        let mut st = self.initial_state(tape, &enc, true);
        let drng = rng.fork(RNG_DECODER);
        let r = self.cfg.reduction_factor;
        let d = self.cfg.frame_dim();
        let limit = match forced {
            Some(f) => f.len(),
            None if self.cfg.max_decoder_steps > 0 => self.cfg.max_decoder_steps,
            None => 10 * enc.n + 10,
        };
        let mut fb = tape.leaf(Tensor::zeros(&[1, self.feedback_dim()]));
        let (mut frames, mut f0s, mut stops, mut hs, mut alphas, mut saw, mut nodes) =
            (vec![], vec![], vec![], vec![], vec![], vec![], vec![]);
        let mut stopped_by = if forced.is_some() { StopReason::Target } else { StopReason::MaxSteps };
        for t in 0..limit {
            let out = self.core_step(
                tape,
                &p,
                &mut st,
                fb,
                &mem,
                &enc.lens,
                mode,
                &drng.fork(t as u64),
                forced.map(|f| &f[t]),
            )?;
            let x = tape.concat_cols(&[out.h, out.ctx]);
            let ho = self.heads(tape, &p, x);
            ensure_finite(tape, ho.frames, "predicted frames", t)?;
            if let Some(l) = ho.f0_logits {
                ensure_finite(tape, l, "F0 logits", t)?;
            }
            let z = tape.value(ho.stop).data()[0];
            if z.is_nan() {
                return Err(Error::NonFinite(format!("stop logit at decoder step {t}")));
            }
            let last = tape.slice_cols(ho.frames, (r - 1) * d, d);
            fb = match ho.f0_logits {
                None => last,
                Some(l) => {
                    let probs = tape.softmax_rows(l, None);
                    let lastp = tape.gather_rows(probs, vec![r - 1]);
                    tape.concat_cols(&[last, lastp])
                }
            };
            frames.push(ho.frames);
            f0s.extend(ho.f0_logits);
            stops.push(ho.stop);
            hs.push(out.h);
            alphas.push(out.alpha);
            saw.extend(out.sa_weights);
            nodes.push(out.sa_nodes);
            if forced.is_none() && sigmoid(z) > self.cfg.stop_threshold {
                stopped_by = StopReason::StopFlag;
                break;
            }
        }
        let steps = frames.len();
        let frames = tape.concat_rows(&frames);
        let f0_logits = (!f0s.is_empty()).then(|| tape.concat_rows(&f0s));
        let stop_logits = tape.concat_rows(&stops);
        let decoder_out = tape.concat_rows(&hs);
        let sa_nodes =
            if self.decoder.sa.is_some() { DecoderSaNodes::Incremental(nodes) } else { DecoderSaNodes::None };
        let run = DecoderRun {
            frames,
            f0_logits,
            stop_logits,
            decoder_out,
            alphas,
            sa_weights: saw,
            steps,
            batch: 1,
            sa_nodes,
        };
        self.run_prediction(tape, &run, &enc, 0, steps, stopped_by)
    }

    /// Free-running synthesis from labels alone.
    pub fn decode_free_running(&self, labels: Labels, rng: &RngStream) -> Result<PredictionOutput> {
        self.free_run(labels, rng, None)
    }

    /// Pass 1 records every step's attention weights under teacher forcing;
    /// pass 2 decodes from its own predictions with those weights frozen.
    pub fn decode_forced_alignment(
        &self,
        labels: Labels,
        targets: &Targets,
        rng: &RngStream,
    ) -> Result<PredictionOutput> {
        let tf = self.decode_teacher_forced(labels, targets, rng)?;
        let forced = forced_weights(&tf)?;
        self.decode_with_weights(labels, &forced, rng)
    }

    /// Free-running decoding with externally supplied attention weights.
    pub fn decode_with_weights(
        &self,
        labels: Labels,
        forced: &[ForcedWeights],
        rng: &RngStream,
    ) -> Result<PredictionOutput> {
        if forced.is_empty() {
            return Err(Error::InvalidArgument("no recorded attention steps".into()));
        }
        let n = labels.phonemes.len();
        for (t, f) in forced.iter().enumerate() {
            let bad = |w: &Tensor| w.shape() != [1, n];
            if bad(&f.forward) || f.additive.as_ref().is_some_and(bad) {
                return Err(Error::Shape(format!("recorded weights at step {t} do not cover {n} source positions")));
            }
            if f.additive.is_some() != self.decoder.attention.additive.is_some() {
                return Err(Error::InvalidArgument("recorded weights do not match the attention sources".into()));
            }
        }
        self.free_run(labels, rng, Some(forced))
    }
}

/// Per-step weights of the forward and additive sources of a prediction.
pub fn forced_weights(pred: &PredictionOutput) -> Result<Vec<ForcedWeights>> {
    let fwd = pred
        .alignment(SourceKind::LstmMemory)
        .ok_or_else(|| Error::InvalidArgument("prediction has no forward-attention alignment".into()))?;
    let add = pred.alignment(SourceKind::SelfAttendedMemory);
    let n = fwd.source_length();
    (0..fwd.steps())
        .map(|t| {
            Ok(ForcedWeights {
                forward: Tensor::matrix(1, n, fwd.weights[0].row(t).to_vec())?,
                additive: match add {
                    Some(a) => Some(Tensor::matrix(1, n, a.weights[0].row(t).to_vec())?),
                    None => None,
                },
            })
        })
        .collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Grouped targets and masks of a padded batch for `steps` decoder steps.
pub(super) struct GroupedTargets {
    /// `[batch * steps, r * d]`.
    pub frames: Tensor,
    /// Per element of `frames`: 1 for real frames, 0 for padding.
    pub frame_mask: Vec<f64>,
    pub valid_frames: usize,
    /// One-hot `[batch * steps * r, n_classes]` and per-row validity.
    pub f0: Option<(Vec<f64>, Vec<f64>)>,
    pub stop: Vec<f64>,
    pub step_mask: Vec<f64>,
    pub valid_steps: usize,
}

pub(super) fn group_targets(targets: &[Targets], r: usize, steps: usize, n_classes: usize) -> Result<GroupedTargets> {
    let b = targets.len();
    let d = targets[0].frames.cols();
    let w = r * d;
    let mut frames = vec![0.0; b * steps * w];
    let mut frame_mask = vec![0.0; b * steps * w];
    let mut stop = vec![0.0; b * steps];
    let mut step_mask = vec![0.0; b * steps];
    let with_f0 = targets[0].f0_classes.is_some();
    let mut f0 = vec![0.0; if with_f0 { b * steps * r * n_classes } else { 0 }];
    let mut f0_mask = vec![0.0; if with_f0 { b * steps * r } else { 0 }];
    let (mut valid_frames, mut valid_steps) = (0, 0);
    for (i, tg) in targets.iter().enumerate() {
        if tg.frames.cols() != d || tg.f0_classes.is_some() != with_f0 {
            return Err(Error::Shape("targets in one batch differ in layout".into()));
        }
        let s = tg.steps(r);
        if s > steps {
            return Err(Error::Shape(format!("target needs {s} steps, prediction has {steps}")));
        }
        let g = group_frames(&tg.frames, r)?;
        frames[i * steps * w..(i * steps + s) * w].copy_from_slice(g.data());
        frame_mask[i * steps * w..i * steps * w + tg.len() * d].iter_mut().for_each(|m| *m = 1.0);
        step_mask[i * steps..i * steps + s].iter_mut().for_each(|m| *m = 1.0);
        stop[i * steps + s - 1] = 1.0;
        valid_frames += tg.len();
        valid_steps += s;
        if let Some(c) = &tg.f0_classes {
            for (f, &k) in c.iter().enumerate() {
                let row = i * steps * r + f;
                f0[row * n_classes + k] = 1.0;
                f0_mask[row] = 1.0;
            }
        }
    }
    Ok(GroupedTargets {
        frames: Tensor::matrix(b * steps, w, frames)?,
        frame_mask,
        valid_frames,
        f0: with_f0.then_some((f0, f0_mask)),
        stop,
        step_mask,
        valid_steps,
    })
}
