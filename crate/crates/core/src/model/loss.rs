use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

use super::decoder::{group_targets, DecoderRun};
use super::{ModelConfig, PredictionOutput, Targets};

/// Loss terms on a tape. Each term is a mean over unpadded elements.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    /// L1 over mel or MGC frames.
    pub l1: Var,
    /// Unweighted F0 cross entropy (VOCODER only).
    pub f0: Option<Var>,
    pub stop: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub l1: f64,
    pub f0: Option<f64>,
    pub stop: f64,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossComponents {
        let v = |x: Var| tape.value(x).data()[0];
        LossComponents { total: v(self.total), l1: v(self.l1), f0: self.f0.map(v), stop: v(self.stop) }
    }
}

/// `L1 + f0_loss_weight * CE_F0 + stop_loss_weight * CE_stop` with padded
/// frames and steps masked out.
pub(super) fn loss_terms(
    tape: &mut Tape,
    cfg: &ModelConfig,
    frames: Var,
    f0_logits: Option<Var>,
    stop_logits: Var,
    steps: usize,
    targets: &[Targets],
) -> Result<LossVars> {
    let r = cfg.reduction_factor;
    let g = group_targets(targets, r, steps, cfg.f0.n_classes())?;
    if tape.shape(frames) != (g.frames.rows(), g.frames.cols()) {
        return Err(Error::Shape(format!(
            "predicted frames {:?} against grouped targets {:?}",
            tape.shape(frames),
            g.frames.shape()
        )));
    }
    let d = cfg.frame_dim() as f64;
    let tgt = tape.leaf(g.frames);
    let diff = tape.sub(frames, tgt);
    let a = tape.abs(diff);
    let k = 1.0 / (g.valid_frames as f64 * d);
    let a = tape.mul_const(a, g.frame_mask.iter().map(|m| m * k).collect());
    let l1 = tape.sum(a);

    let ks = 1.0 / g.valid_steps as f64;
    let stop = tape.sigmoid_xent(stop_logits, g.stop, g.step_mask.iter().map(|m| m * ks).collect());
    let weighted_stop = tape.scale(stop, cfg.stop_loss_weight);
    let mut total = tape.add(l1, weighted_stop);

    let f0 = match (f0_logits, g.f0) {
        (Some(logits), Some((onehot, mask))) => {
            let kf = 1.0 / g.valid_frames as f64;
            let ce = tape.softmax_xent(logits, onehot, mask.iter().map(|m| m * kf).collect());
            let w = tape.scale(ce, cfg.f0_loss_weight);
            total = tape.add(total, w);
            Some(ce)
        }
        (None, None) => None,
        _ => return Err(Error::InvalidArgument("F0 predictions and targets must both be present".into())),
    };
    Ok(LossVars { total, l1, f0, stop })
}

impl DecoderRun {
    pub fn loss(&self, tape: &mut Tape, cfg: &ModelConfig, targets: &[Targets]) -> Result<LossVars> {
        loss_terms(tape, cfg, self.frames, self.f0_logits, self.stop_logits, self.steps, targets)
    }
}

/// Loss of a single prediction against its targets. The prediction must
/// cover exactly `ceil(T / r)` steps.
pub fn compute_loss(pred: &PredictionOutput, targets: &Targets, cfg: &ModelConfig) -> Result<LossComponents> {
    let r = cfg.reduction_factor;
    if pred.steps != targets.steps(r) {
        return Err(Error::Shape(format!("prediction has {} steps, target needs {}", pred.steps, targets.steps(r))));
    }
    let mut tape = Tape::new();
    let grouped = pred.frames.clone().reshape(vec![pred.steps, r * pred.frames.cols()])?;
    let frames = tape.leaf(grouped);
    let f0 = pred.f0_logits.as_ref().map(|l| tape.leaf(l.clone()));
    let stop = tape.leaf(Tensor::matrix(pred.steps, 1, pred.stop_logits.clone())?);
    let l = loss_terms(&mut tape, cfg, frames, f0, stop, pred.steps, std::slice::from_ref(targets))?;
    Ok(l.values(&tape))
}
