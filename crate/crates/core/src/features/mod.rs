//! Acoustic and linguistic features: utterances, phoneme inventory, the toy
//! pitch-accent corpus, mel extraction, log-F0 quantization, reduction-factor
//! frame grouping and silence trimming.

mod f0;
mod io;
mod mel;
mod toy;

pub use f0::F0Quantizer;
pub use io::{
    ingest_dir, parse_labels, read_corpus, read_feature_file, write_corpus, write_feature_file, CORPUS_MAGIC,
    CORPUS_VERSION,
};
pub use mel::{extract_mel, mel_band_center, mel_filterbank, FrameSpec, MEL_FLOOR};
pub use toy::{
    accent_contour, duration_frames, generate_toy_corpus, phoneme_template, render_utterance, split_corpus,
    ToyCorpusConfig, ACCENT_NONE, N_ACCENT_TYPES,
};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Symbol table with dedicated silence and pause ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeInventory {
    pub symbols: Vec<String>,
    pub silence: usize,
    pub pause: usize,
    pub short_pause: Option<usize>,
}

impl PhonemeInventory {
    /// 24 speech phonemes followed by `sil` and `pau`.
    pub fn toy() -> Self {
        let speech = [
            "a", "i", "u", "e", "o", "k", "s", "t", "n", "h", "m", "y", "r", "w", "g", "z", "d", "b", "p", "N", "ch",
            "sh", "ts", "f",
        ];
        let mut symbols: Vec<String> = speech.iter().map(|s| s.to_string()).collect();
        symbols.push("sil".into());
        symbols.push("pau".into());
        Self { silence: 24, pause: 25, short_pause: None, symbols }
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn n_speech(&self) -> usize {
        self.symbols.len() - 2 - usize::from(self.short_pause.is_some())
    }

    pub fn is_silence_or_pause(&self, id: usize) -> bool {
        id == self.silence || id == self.pause || Some(id) == self.short_pause
    }

    pub fn is_pause(&self, id: usize) -> bool {
        id == self.pause || Some(id) == self.short_pause
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn symbol(&self, id: usize) -> Result<&str> {
        self.symbols.get(id).map(|s| s.as_str()).ok_or(Error::UnknownSymbol { id, size: self.symbols.len() })
    }
}

/// One utterance: labels plus whichever acoustic streams are available.
///
/// `durations` counts mel-grid frames per phoneme when the segmentation is
/// known. `logf0` is natural-log Hz and is meaningless where `voiced` is false.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub phonemes: Vec<usize>,
    pub accents: Option<Vec<usize>>,
    pub durations: Option<Vec<usize>>,
    pub mel: Option<Tensor>,
    pub mgc: Option<Tensor>,
    pub logf0: Option<Vec<f64>>,
    pub voiced: Option<Vec<bool>>,
    pub mel_shift_ms: f64,
    pub vocoder_shift_ms: f64,
}

impl Utterance {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = &self.accents {
            if a.len() != self.phonemes.len() {
                return Err(Error::Shape(format!(
                    "{}: {} accents for {} phonemes",
                    self.id,
                    a.len(),
                    self.phonemes.len()
                )));
            }
        }
        if let Some(d) = &self.durations {
            if d.len() != self.phonemes.len() {
                return Err(Error::Shape(format!("{}: durations do not match phonemes", self.id)));
            }
        }
        let t = self.mgc.as_ref().map(|m| m.rows());
        for (name, n) in [("logf0", self.logf0.as_ref().map(Vec::len)), ("voiced", self.voiced.as_ref().map(Vec::len))]
        {
            if let (Some(t), Some(n)) = (t, n) {
                if t != n {
                    return Err(Error::Shape(format!("{}: {name} has {n} frames, mgc has {t}", self.id)));
                }
            }
        }
        Ok(())
    }

    pub fn mel_frames(&self) -> usize {
        self.mel.as_ref().map_or(0, Tensor::rows)
    }

    pub fn vocoder_frames(&self) -> usize {
        self.mgc.as_ref().map_or(0, Tensor::rows)
    }

    /// Total duration in milliseconds on the mel grid.
    pub fn duration_ms(&self) -> f64 {
        self.mel_frames() as f64 * self.mel_shift_ms
    }
}

/// Vocoder-grid frame index of a mel-grid frame boundary.
pub fn vocoder_boundary(mel_frame: usize, mel_shift_ms: f64, vocoder_shift_ms: f64) -> usize {
    (mel_frame as f64 * mel_shift_ms / vocoder_shift_ms).round() as usize
}

/// Concatenates each run of `r` frames; the last group is zero-padded.
pub fn group_frames(x: &Tensor, r: usize) -> Result<Tensor> {
    if r == 0 {
        return Err(Error::InvalidArgument("reduction factor must be at least 1".into()));
    }
    let (t, d) = (x.rows(), x.cols());
    let steps = t.div_ceil(r);
    let mut data = vec![0.0; steps * r * d];
    data[..t * d].copy_from_slice(&x.data()[..t * d]);
    Tensor::matrix(steps, r * d, data)
}

/// Inverse of [`group_frames`], keeping the first `len` frames.
pub fn ungroup_frames(g: &Tensor, r: usize, len: usize) -> Result<Tensor> {
    if r == 0 || g.cols() % r != 0 {
        return Err(Error::InvalidArgument(format!("cannot ungroup width {} by {r}", g.cols())));
    }
    let d = g.cols() / r;
    if len > g.rows() * r {
        return Err(Error::Shape(format!("{len} frames requested from {} groups of {r}", g.rows())));
    }
    Tensor::matrix(len, d, g.data()[..len * d].to_vec())
}

/// Removes leading and trailing silence phonemes and their frames on both
/// grids. Internal pauses are kept.
pub fn trim_silence(utt: &Utterance, inv: &PhonemeInventory) -> Result<Utterance> {
    let keep: Vec<usize> = (0..utt.phonemes.len()).filter(|&i| utt.phonemes[i] != inv.silence).collect();
    let (Some(&first), Some(&last)) = (keep.first(), keep.last()) else {
        return Err(Error::InvalidArgument(format!("{}: utterance is all silence", utt.id)));
    };
    if first == 0 && last + 1 == utt.phonemes.len() {
        return Ok(utt.clone());
    }
    let has_frames = utt.mel.is_some() || utt.mgc.is_some();
    let durations = match (&utt.durations, has_frames) {
        (Some(d), _) => Some(d),
        (None, false) => None,
        (None, true) => {
            return Err(Error::InvalidArgument(format!("{}: trimming frames needs phoneme durations", utt.id)));
        }
    };
    let mut out = utt.clone();
    out.phonemes = utt.phonemes[first..=last].to_vec();
    out.accents = utt.accents.as_ref().map(|a| a[first..=last].to_vec());
    if let Some(d) = durations {
        let start: usize = d[..first].iter().sum();
        let end: usize = d[..=last].iter().sum();
        out.durations = Some(d[first..=last].to_vec());
        if let Some(m) = &utt.mel {
            let end = end.min(m.rows());
            out.mel = Some(m.slice_rows(start, end - start));
        }
        let vs = vocoder_boundary(start, utt.mel_shift_ms, utt.vocoder_shift_ms);
        let ve = vocoder_boundary(end, utt.mel_shift_ms, utt.vocoder_shift_ms);
        if let Some(m) = &utt.mgc {
            let ve = ve.min(m.rows());
            out.mgc = Some(m.slice_rows(vs, ve - vs));
            out.logf0 = utt.logf0.as_ref().map(|f| f[vs..ve].to_vec());
            out.voiced = utt.voiced.as_ref().map(|f| f[vs..ve].to_vec());
        }
    }
    Ok(out)
}
