use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F0Metrics {
    /// Over frames voiced in both sequences.
    pub rmse_hz: f64,
    /// Pearson correlation over frames voiced in both sequences.
    pub corr: f64,
    /// Percentage of frames whose voicing decisions differ.
    pub uv_error_pct: f64,
    /// Frames voiced in both sequences.
    pub n_frames_compared: usize,
}

/// F0 error of frame-aligned sequences in Hz. With `log_corr`, the
/// correlation is taken over natural-log F0 instead of Hz.
pub fn f0_metrics(
    pred: &[f64],
    reference: &[f64],
    pred_voiced: &[bool],
    ref_voiced: &[bool],
    log_corr: bool,
) -> Result<F0Metrics> {
    let n = reference.len();
    if pred.len() != n || pred_voiced.len() != n || ref_voiced.len() != n {
        return Err(Error::Shape(format!(
            "F0 sequences of lengths {}, {n}, {}, {}",
            pred.len(),
            pred_voiced.len(),
            ref_voiced.len()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no frames to compare".into()));
    }
    let both: Vec<usize> = (0..n).filter(|&i| pred_voiced[i] && ref_voiced[i]).collect();
    if both.is_empty() {
        return Err(Error::InvalidArgument("no frame is voiced in both sequences".into()));
    }
    if both.iter().any(|&i| !(pred[i] > 0.0 && reference[i] > 0.0 && pred[i].is_finite() && reference[i].is_finite())) {
        return Err(Error::InvalidArgument("voiced frames need positive finite F0".into()));
    }
    let k = both.len() as f64;
    let mse = both.iter().map(|&i| (pred[i] - reference[i]).powi(2)).sum::<f64>() / k;

    let tr = |v: f64| if log_corr { v.ln() } else { v };
    let xs: Vec<f64> = both.iter().map(|&i| tr(pred[i])).collect();
    let ys: Vec<f64> = both.iter().map(|&i| tr(reference[i])).collect();
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("correlation undefined for constant F0".into()));
    }
    let corr = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let mismatched = (0..n).filter(|&i| pred_voiced[i] != ref_voiced[i]).count();
    Ok(F0Metrics {
        rmse_hz: mse.sqrt(),
        corr,
        uv_error_pct: 100.0 * mismatched as f64 / n as f64,
        n_frames_compared: both.len(),
    })
}
