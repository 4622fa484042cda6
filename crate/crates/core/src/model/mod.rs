//! The three architectures (JA-Tacotron, SA-Tacotron, SA-Tacotron with
//! vocoder targets), their losses, training loop and decoding modes.
//!
//! Everything is batched in the [`crate::numerics`] layout. Decoding on plain
//! inputs (`decode_free_running`, `decode_forced_alignment`,
//! `decode_teacher_forced`) handles one utterance at a time.

mod config;
mod decoder;
mod loss;
mod train;

pub use config::{ModelConfig, Preset, RunConfig, Target, TrainConfig, Variant};
pub use decoder::{forced_weights, DecoderRun, SaMode, StopReason};
pub use loss::{compute_loss, LossComponents, LossVars};
pub use train::{batch_order, train, validation_loss, TrainData, TrainOutcome, TrainState, METRICS_HEADER};

use crate::attention::{AlignmentMatrix, DualSourceAttention, SelfAttentionBlock, SourceKind};
use crate::error::{Error, Result};
use crate::features::{Utterance, ACCENT_NONE};
use crate::numerics::{
    run_lstm, Activation, Bound, Checkpoint, Conv1d, ConvBank, Highway, Linear, LstmCell, Mode, ParamId, ParamStore,
    Prenet, RngStream, Tape, Tensor, Var, Zoneout,
};

/// Phoneme and optional accent ids of one utterance.
#[derive(Clone, Copy, Debug)]
pub struct Labels<'a> {
    pub phonemes: &'a [usize],
    pub accents: Option<&'a [usize]>,
}

impl<'a> Labels<'a> {
    /// Labels as the model expects them: accents dropped when `use_accents` is false.
    pub fn of(u: &'a Utterance, use_accents: bool) -> Self {
        Self { phonemes: &u.phonemes, accents: if use_accents { u.accents.as_deref() } else { None } }
    }
}

/// Acoustic targets of one utterance on the regime's grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// `[T, frame_dim]`: mel rows or MGC rows.
    pub frames: Tensor,
    /// Quantized log-F0 class per frame (VOCODER only).
    pub f0_classes: Option<Vec<usize>>,
}

impl Targets {
    pub fn from_utterance(u: &Utterance, cfg: &ModelConfig) -> Result<Self> {
        let missing = |what: &str| Error::InvalidArgument(format!("{}: no {what} targets", u.id));
        let t = match cfg.target {
            Target::Mel => Self { frames: u.mel.clone().ok_or_else(|| missing("mel"))?, f0_classes: None },
            Target::Vocoder => {
                let mgc = u.mgc.clone().ok_or_else(|| missing("MGC"))?;
                let lf = u.logf0.as_ref().ok_or_else(|| missing("log-F0"))?;
                let v = u.voiced.as_ref().ok_or_else(|| missing("voicing"))?;
                let classes = lf.iter().zip(v).map(|(&f, &v)| cfg.f0.class_of_log(f, v)).collect();
                Self { frames: mgc, f0_classes: Some(classes) }
            }
        };
        if t.frames.cols() != cfg.frame_dim() {
            return Err(Error::Shape(format!(
                "{}: frames of width {}, model expects {}",
                u.id,
                t.frames.cols(),
                cfg.frame_dim()
            )));
        }
        if t.frames.rows() == 0 {
            return Err(Error::InvalidArgument(format!("{}: empty target", u.id)));
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    /// Decoder steps needed to cover the target.
    pub fn steps(&self, r: usize) -> usize {
        self.len().div_ceil(r)
    }

    /// Feedback vector fed after frame `f`: the frame, plus a one-hot F0 class.
    fn feedback_row(&self, f: usize, n_classes: usize) -> Vec<f64> {
        let mut v = self.frames.row(f).to_vec();
        if let Some(c) = &self.f0_classes {
            let mut oh = vec![0.0; n_classes];
            oh[c[f]] = 1.0;
            v.extend(oh);
        }
        v
    }
}

/// Encoder results for a padded batch, recorded on a tape.
#[derive(Clone, Debug)]
pub struct EncoderOutputs {
    /// `[batch * n, lstm_dim]`.
    pub lstm_out: Var,
    /// `[batch * n, lstm_dim]` (SA only).
    pub sa_out: Option<Var>,
    /// One encoder self-attention node per hop.
    pub sa_nodes: Vec<Var>,
    pub lens: Vec<usize>,
    /// Padded source length.
    pub n: usize,
}

impl EncoderOutputs {
    pub fn batch(&self) -> usize {
        self.lens.len()
    }
}

/// Predictions for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOutput {
    /// `[steps * r, frame_dim]`, ungrouped.
    pub frames: Tensor,
    /// `[steps * r, n_classes]` (VOCODER only).
    pub f0_logits: Option<Tensor>,
    pub stop_logits: Vec<f64>,
    pub stop_probs: Vec<f64>,
    /// Forward attention first, then (SA) additive and decoder self-attention.
    pub alignments: Vec<AlignmentMatrix>,
    /// Encoder self-attention heads, `[n, n]` each (SA only).
    pub encoder_self: Option<AlignmentMatrix>,
    pub stopped_by: StopReason,
    pub steps: usize,
    pub reduction_factor: usize,
}

impl PredictionOutput {
    pub fn alignment(&self, kind: SourceKind) -> Option<&AlignmentMatrix> {
        self.alignments.iter().find(|a| a.source_kind == kind)
    }

    /// Softmax of the F0 logits, `[frames, n_classes]`.
    pub fn f0_probs(&self) -> Option<Tensor> {
        self.f0_logits.as_ref().map(|l| crate::numerics::softmax(l, 1).expect("2-D logits"))
    }

    /// Decoded F0 (Hz, 0 when unvoiced) and voicing per frame.
    pub fn f0_track(&self, q: &crate::features::F0Quantizer) -> Result<Option<(Vec<f64>, Vec<bool>)>> {
        let Some(p) = self.f0_probs() else { return Ok(None) };
        let mut hz = Vec::with_capacity(p.rows());
        let mut voiced = Vec::with_capacity(p.rows());
        for i in 0..p.rows() {
            let (f, v) = q.expected_f0(p.row(i))?;
            hz.push(f);
            voiced.push(v);
        }
        Ok(Some((hz, voiced)))
    }
}

struct Encoder {
    phoneme_table: ParamId,
    accent_table: Option<ParamId>,
    phoneme_prenet: Prenet,
    accent_prenet: Option<Prenet>,
    bank: ConvBank,
    proj1: Conv1d,
    proj2: Conv1d,
    highways: Vec<Highway>,
    fwd: LstmCell,
    bwd: LstmCell,
    bi_proj: Linear,
    sa: Option<SelfAttentionBlock>,
}

enum Heads {
    Mel { frames: Linear, stop: Linear },
    Vocoder { mgc_hidden: Linear, mgc_out: Linear, f0: Linear, stop: Linear },
}

struct Decoder {
    prenet: Prenet,
    f0_prenet: Option<Prenet>,
    att_rnn: LstmCell,
    attention: DualSourceAttention,
    lstms: Vec<LstmCell>,
    sa: Option<SelfAttentionBlock>,
    heads: Heads,
}

/// A configured network and its parameters.
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

// Fork keys of the per-call random stream.
const RNG_ENCODER: u64 = 1;
const RNG_DECODER: u64 = 2;
const RNG_DECODER_SA: u64 = 3;

fn mask_rows(tape: &mut Tape, x: Var, lens: &[usize], n: usize) -> Var {
    if lens.iter().all(|&l| l == n) {
        return x;
    }
    let d = tape.shape(x).1;
    let m: Vec<f64> = lens
        .iter()
        .flat_map(|&l| (0..n).flat_map(move |j| std::iter::repeat_n(if j < l { 1.0 } else { 0.0 }, d)))
        .collect();
    tape.mul_const(x, m)
}

/// Row permutation turning a time-major stack `[t * batch + b]` into
/// batch-major `[b * steps + t]`.
fn time_to_batch_major(batch: usize, steps: usize) -> Vec<usize> {
    (0..batch * steps).map(|r| (r % steps) * batch + r / steps).collect()
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let init = RngStream::new(seed);
        let mut s = ParamStore::new();
        let c = &cfg;

        let phoneme_table = s.glorot("enc.phoneme_embedding", c.n_phonemes, c.phoneme_embed_dim, &init);
        let accent_table =
            c.use_accent_labels.then(|| s.glorot("enc.accent_embedding", c.n_accents, c.accent_embed_dim, &init));
        let mut pdims = vec![c.phoneme_embed_dim];
        pdims.extend(&c.phoneme_prenet);
        let phoneme_prenet = Prenet::new(&mut s, "enc.phoneme_prenet", &pdims, c.encoder_prenet_dropout, false, &init);
        let accent_prenet = c.use_accent_labels.then(|| {
            let mut adims = vec![c.accent_embed_dim];
            adims.extend(&c.accent_prenet);
            Prenet::new(&mut s, "enc.accent_prenet", &adims, c.encoder_prenet_dropout, false, &init)
        });
        let cin = phoneme_prenet.out_dim() + accent_prenet.as_ref().map_or(0, Prenet::out_dim);
        let bank =
            ConvBank::new(&mut s, "enc.bank", c.conv_bank_k, cin, c.conv_bank_channels, Activation::Relu, &init)?;
        let proj1 = Conv1d::new(&mut s, "enc.proj1", 3, bank.out_dim(), c.conv_bank_channels, true, &init);
        let proj2 = Conv1d::new(&mut s, "enc.proj2", 3, c.conv_bank_channels, cin, true, &init);
        let highways =
            (0..c.highway_depth).map(|i| Highway::new(&mut s, &format!("enc.highway{i}"), cin, &init)).collect();
        let fwd = LstmCell::new(&mut s, "enc.lstm_fwd", cin, c.lstm_dim, &init);
        let bwd = LstmCell::new(&mut s, "enc.lstm_bwd", cin, c.lstm_dim, &init);
        let bi_proj = Linear::new(&mut s, "enc.lstm_proj", 2 * c.lstm_dim, c.lstm_dim, true, &init);
        let enc_sa = match c.encoder_sa {
            Some(m) => Some(SelfAttentionBlock::new(&mut s, "enc.sa", c.lstm_dim, m, &init)?),
            None => None,
        };
        let encoder = Encoder {
            phoneme_table,
            accent_table,
            phoneme_prenet,
            accent_prenet,
            bank,
            proj1,
            proj2,
            highways,
            fwd,
            bwd,
            bi_proj,
            sa: enc_sa,
        };

        let n_classes = c.f0.n_classes();
        let mut ddims = vec![c.frame_dim()];
        ddims.extend(&c.decoder_prenet);
        let prenet = Prenet::new(&mut s, "dec.prenet", &ddims, c.decoder_prenet_dropout, true, &init);
        let f0_prenet = (c.target == Target::Vocoder).then(|| {
            let mut fdims = vec![n_classes];
            fdims.extend(&c.f0_prenet);
            Prenet::new(&mut s, "dec.f0_prenet", &fdims, c.decoder_prenet_dropout, true, &init)
        });
        let fb_out = prenet.out_dim() + f0_prenet.as_ref().map_or(0, Prenet::out_dim);
        let sa_mem = c.encoder_sa.map(|_| c.lstm_dim);
        let attention = DualSourceAttention::new(
            &mut s,
            "dec.attention",
            c.attention_rnn_dim,
            c.lstm_dim,
            sa_mem,
            c.attention_dim,
            c.location,
            &init,
        );
        let ctx = attention.context_dim();
        let att_rnn = LstmCell::new(&mut s, "dec.attention_rnn", fb_out + ctx, c.attention_rnn_dim, &init);
        let lstms = (0..c.decoder_lstm_layers)
            .map(|l| {
                let input = if l == 0 { c.attention_rnn_dim + ctx } else { c.decoder_lstm_dim };
                LstmCell::new(&mut s, &format!("dec.lstm{l}"), input, c.decoder_lstm_dim, &init)
            })
            .collect();
        let dec_sa = match c.decoder_sa {
            Some(m) => Some(SelfAttentionBlock::new(&mut s, "dec.sa", c.decoder_lstm_dim, m, &init)?),
            None => None,
        };
        let head_in = c.decoder_lstm_dim + ctx;
        let r = c.reduction_factor;
        let heads = match c.target {
            Target::Mel => Heads::Mel {
                frames: Linear::new(&mut s, "dec.mel_out", head_in, r * c.n_mels, true, &init),
                stop: Linear::new(&mut s, "dec.stop", head_in, 1, true, &init),
            },
            Target::Vocoder => Heads::Vocoder {
                mgc_hidden: Linear::new(&mut s, "dec.mgc_hidden", head_in, c.mgc_hidden_dim, true, &init),
                mgc_out: Linear::new(&mut s, "dec.mgc_out", c.mgc_hidden_dim, r * c.n_mgc, true, &init),
                f0: Linear::new(&mut s, "dec.f0_out", head_in, r * n_classes, true, &init),
                stop: Linear::new(&mut s, "dec.stop", head_in, 1, true, &init),
            },
        };
        let decoder = Decoder { prenet, f0_prenet, att_rnn, attention, lstms, sa: dec_sa, heads };
        Ok(Self { cfg, params: s, encoder, decoder })
    }

    /// Rebuilds a model from a checkpoint whose metadata is a config text.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, RunConfig)> {
        let run = RunConfig::parse(&ckpt.meta)?;
        let mut m = Self::new(run.model.clone(), 0)?;
        m.load_params(&ckpt.params)?;
        Ok((m, run))
    }

    /// Copies every parameter by name; names and shapes must match exactly.
    pub fn load_params(&mut self, src: &ParamStore) -> Result<()> {
        if src.len() != self.params.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("{} parameters, model has {}", src.len(), self.params.len()),
            });
        }
        for (_, name, t) in src.iter() {
            let dst = self
                .params
                .by_name_mut(name)
                .ok_or_else(|| Error::Format { what: "checkpoint", detail: format!("unexpected parameter {name}") })?;
            if dst.shape() != t.shape() {
                return Err(Error::Format {
                    what: "checkpoint",
                    detail: format!("{name} has shape {:?}, model expects {:?}", t.shape(), dst.shape()),
                });
            }
            *dst = t.clone();
        }
        Ok(())
    }

    fn check_labels(&self, labels: &[Labels]) -> Result<()> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for l in labels {
            if l.phonemes.is_empty() {
                return Err(Error::InvalidArgument("empty phoneme sequence".into()));
            }
            if let Some(&id) = l.phonemes.iter().find(|&&p| p >= self.cfg.n_phonemes) {
                return Err(Error::UnknownSymbol { id, size: self.cfg.n_phonemes });
            }
            match (l.accents, self.cfg.use_accent_labels) {
                (Some(a), true) => {
                    if a.len() != l.phonemes.len() {
                        return Err(Error::Shape(format!("{} accents for {} phonemes", a.len(), l.phonemes.len())));
                    }
                    if let Some(&id) = a.iter().find(|&&x| x >= self.cfg.n_accents) {
                        return Err(Error::UnknownSymbol { id, size: self.cfg.n_accents });
                    }
                }
                (None, false) => {}
                (Some(_), false) => {
                    return Err(Error::InvalidArgument("accent labels given to a model trained without them".into()))
                }
                (None, true) => return Err(Error::InvalidArgument("model expects accent labels".into())),
            }
        }
        Ok(())
    }

    /// Embeddings, per-stream pre-nets, CBH, bidirectional LSTM and (SA)
    /// the encoder self-attention block over a padded batch.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        labels: &[Labels],
        mode: Mode,
        rng: &RngStream,
    ) -> Result<EncoderOutputs> {
        self.check_labels(labels)?;
        let e = &self.encoder;
        let rng = rng.fork(RNG_ENCODER);
        let lens: Vec<usize> = labels.iter().map(|l| l.phonemes.len()).collect();
        let n = *lens.iter().max().expect("nonempty batch");
        let padded = |seqs: Vec<&[usize]>, pad: usize| -> Vec<usize> {
            seqs.iter().flat_map(|s| (0..n).map(move |j| s.get(j).copied().unwrap_or(pad))).collect()
        };
        let ph = tape.gather_rows(p.var(e.phoneme_table), padded(labels.iter().map(|l| l.phonemes).collect(), 0));
        let mut x = e.phoneme_prenet.forward(tape, p, ph, mode, &rng.fork(0));
        if let (Some(table), Some(prenet)) = (e.accent_table, &e.accent_prenet) {
            let seqs = labels.iter().map(|l| l.accents.unwrap_or(&[])).collect();
            let ac = tape.gather_rows(p.var(table), padded(seqs, ACCENT_NONE.min(self.cfg.n_accents - 1)));
            let a = prenet.forward(tape, p, ac, mode, &rng.fork(1));
            x = tape.concat_cols(&[x, a]);
        }
        let x = mask_rows(tape, x, &lens, n);
        let bank = e.bank.forward(tape, p, x, n)?;
        let pooled = tape.max_pool2(bank, n, &lens);
        let pooled = mask_rows(tape, pooled, &lens, n);
        let h = e.proj1.forward(tape, p, pooled, n);
        let h = tape.relu(h);
        let h = mask_rows(tape, h, &lens, n);
        let h = e.proj2.forward(tape, p, h, n);
        let mut h = tape.add(h, x);
        for hw in &e.highways {
            h = hw.forward(tape, p, h)?;
        }
        let zo = Zoneout::new(self.cfg.zoneout_rate, mode)?;
        let f = run_lstm(&e.fwd, tape, p, h, n, &lens, false, zo, &rng.fork(2));
        let b = run_lstm(&e.bwd, tape, p, h, n, &lens, true, zo, &rng.fork(3));
        let fb = tape.concat_cols(&[f, b]);
        let lstm_out = e.bi_proj.forward(tape, p, fb);
        let (sa_out, sa_nodes) = match &e.sa {
            Some(block) => {
                let (y, nodes) =
                    block.forward(tape, p, lstm_out, lens.len(), n, Some(lens.clone()), false, mode, &rng.fork(4))?;
                (Some(y), nodes)
            }
            None => (None, Vec::new()),
        };
        Ok(EncoderOutputs { lstm_out, sa_out, sa_nodes, lens, n })
    }

    /// Per-head encoder self-attention weights of batch item `b`.
    pub fn encoder_self_alignment(
        &self,
        tape: &Tape,
        enc: &EncoderOutputs,
        b: usize,
    ) -> Result<Option<AlignmentMatrix>> {
        if enc.sa_nodes.is_empty() {
            return Ok(None);
        }
        let len = enc.lens[b];
        let mut heads = Vec::new();
        for &node in &enc.sa_nodes {
            heads.extend(attention_submatrices(tape, node, b, len, len)?);
        }
        AlignmentMatrix::new(SourceKind::EncoderSelf, heads).map(Some)
    }
}

/// `[rows, cols]` top-left block of every head of batch item `b` in a fused
/// attention node.
fn attention_submatrices(tape: &Tape, node: Var, b: usize, rows: usize, cols: usize) -> Result<Vec<Tensor>> {
    let (spec, probs) =
        tape.attention_weights(node).ok_or_else(|| Error::InvalidArgument("not an attention node".into()))?;
    let (q, k) = (spec.q_len, spec.k_len);
    (0..spec.heads)
        .map(|h| {
            let base = (b * spec.heads + h) * q * k;
            let data = (0..rows).flat_map(|i| probs[base + i * k..base + i * k + cols].iter().copied()).collect();
            Tensor::matrix(rows, cols, data)
        })
        .collect()
}
