use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Log-mel floor before compression.
pub const MEL_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameSpec {
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub fft_size: usize,
    pub sample_rate: u32,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self { frame_length_ms: 50.0, frame_shift_ms: 12.5, fft_size: 4096, sample_rate: 48_000 }
    }
}

impl FrameSpec {
    pub fn frame_length(&self) -> usize {
        (self.frame_length_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_shift(&self) -> usize {
        (self.frame_shift_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let (l, s) = (self.frame_length(), self.frame_shift());
        if s == 0 || s > l {
            return Err(Error::InvalidArgument(format!("frame shift {s} must be in 1..={l} samples")));
        }
        if l > self.fft_size {
            return Err(Error::InvalidArgument(format!("frame of {l} samples exceeds FFT size {}", self.fft_size)));
        }
        Ok(())
    }

    /// `1 + floor((samples - frame_length) / frame_shift)`.
    pub fn n_frames(&self, samples: usize) -> Option<usize> {
        let l = self.frame_length();
        (samples >= l).then(|| 1 + (samples - l) / self.frame_shift())
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters `[n_mels, fft_size / 2 + 1]` with unit peaks, centers
/// evenly spaced on the mel scale between 0 Hz and Nyquist.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: u32) -> Tensor {
    let n_bins = fft_size / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
    let mut fb = Tensor::zeros(&[n_mels, n_bins]);
    for m in 0..n_mels {
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = fb.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * sample_rate as f64 / fft_size as f64;
            *w = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
        }
    }
    fb
}

/// Center frequency of mel band `m` in Hz.
pub fn mel_band_center(m: usize, n_mels: usize, sample_rate: u32) -> f64 {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    mel_to_hz(top * (m + 1) as f64 / (n_mels + 1) as f64)
}

/// Hann-windowed magnitude STFT, triangular mel filterbank, then natural
/// log with a floor of [`MEL_FLOOR`].
pub fn extract_mel(waveform: &[f64], spec: &FrameSpec, n_mels: usize) -> Result<Tensor> {
    spec.validate()?;
    let (l, s, n) = (spec.frame_length(), spec.frame_shift(), spec.fft_size);
    let frames = spec.n_frames(waveform.len()).ok_or_else(|| {
        Error::InvalidArgument(format!("{} samples is shorter than one frame of {l}", waveform.len()))
    })?;
    let window: Vec<f64> =
        (0..l).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / l as f64).cos()).collect();
    let fb = mel_filterbank(n_mels, n, spec.sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let n_bins = n / 2 + 1;
    let mut out = Tensor::zeros(&[frames, n_mels]);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut mag = vec![0.0; n_bins];
    for t in 0..frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for i in 0..l {
            buf[i].re = waveform[t * s + i] * window[i];
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            mag[k] = buf[k].norm();
        }
        let row = out.row_mut(t);
        for (m, o) in row.iter_mut().enumerate() {
            let e: f64 = fb.row(m).iter().zip(&mag).map(|(w, a)| w * a).sum();
            *o = e.max(MEL_FLOOR).ln();
        }
    }
    Ok(out)
}
