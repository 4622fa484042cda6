use crate::error::{Error, Result};

/// Uniform bins over `[ln lo_hz, ln hi_hz]` plus one trailing unvoiced class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F0Quantizer {
    pub n_bins: usize,
    pub lo_hz: f64,
    pub hi_hz: f64,
}

impl Default for F0Quantizer {
    fn default() -> Self {
        Self { n_bins: 64, lo_hz: 60.0, hi_hz: 600.0 }
    }
}

impl F0Quantizer {
    pub fn new(n_bins: usize, lo_hz: f64, hi_hz: f64) -> Result<Self> {
        if n_bins == 0 || !(lo_hz > 0.0 && hi_hz > lo_hz) {
            return Err(Error::InvalidArgument(format!("F0 bins {n_bins} over [{lo_hz}, {hi_hz}] Hz")));
        }
        Ok(Self { n_bins, lo_hz, hi_hz })
    }

    /// Number of classes including the unvoiced one.
    pub fn n_classes(&self) -> usize {
        self.n_bins + 1
    }

    pub fn unvoiced_class(&self) -> usize {
        self.n_bins
    }

    /// Bin width in log-Hz.
    pub fn width(&self) -> f64 {
        (self.hi_hz.ln() - self.lo_hz.ln()) / self.n_bins as f64
    }

    /// Center of voiced bin `k` in log-Hz.
    pub fn center(&self, k: usize) -> f64 {
        self.lo_hz.ln() + (k as f64 + 0.5) * self.width()
    }

    /// Class index of a frame; voiced values outside the range are clamped.
    pub fn class_of_log(&self, logf0: f64, voiced: bool) -> usize {
        if !voiced {
            return self.unvoiced_class();
        }
        let (lo, hi) = (self.lo_hz.ln(), self.hi_hz.ln());
        if logf0 < lo || logf0 > hi {
            log::warn!("F0 {:.1} Hz outside [{}, {}] Hz, clamped", logf0.exp(), self.lo_hz, self.hi_hz);
        }
        let k = ((logf0 - lo) / self.width()).floor();
        (k.max(0.0) as usize).min(self.n_bins - 1)
    }

    /// One-hot target over `n_classes()`.
    pub fn quantize_logf0(&self, f0_hz: f64, voiced: bool) -> Vec<f64> {
        let mut v = vec![0.0; self.n_classes()];
        v[self.class_of_log(if voiced { f0_hz.ln() } else { 0.0 }, voiced)] = 1.0;
        v
    }

    /// Decodes class probabilities to `(f0_hz, voiced)`. Voiced iff the
    /// unvoiced probability is below 0.5; F0 is the exponential of the
    /// probability-weighted mean voiced bin center. Unvoiced frames report 0 Hz.
    pub fn expected_f0(&self, probs: &[f64]) -> Result<(f64, bool)> {
        if probs.len() != self.n_classes() {
            return Err(Error::Shape(format!("{} probabilities for {} classes", probs.len(), self.n_classes())));
        }
        let voiced = probs[self.n_bins] < 0.5;
        if !voiced {
            return Ok((0.0, false));
        }
        let mass: f64 = probs[..self.n_bins].iter().sum();
        let mean: f64 = probs[..self.n_bins].iter().enumerate().map(|(k, p)| p * self.center(k)).sum::<f64>() / mass;
        Ok((mean.exp(), true))
    }
}
