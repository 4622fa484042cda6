//! Synthetic pitch-accent corpus. Labels are random; acoustics follow from
//! the labels through a fixed oracle, so every target is predictable from the
//! phoneme and accent sequence.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{vocoder_boundary, F0Quantizer, PhonemeInventory, Utterance};
use crate::numerics::{RngStream, Substream, Tensor};

/// Accentual types `0..N_ACCENT_TYPES`; type 0 is flat, type `k` has its
/// nucleus on mora `k`.
pub const N_ACCENT_TYPES: usize = 4;
/// Accent id carried by silence and pause phonemes.
pub const ACCENT_NONE: usize = N_ACCENT_TYPES;

const LOW_HZ: f64 = 130.0;
const HIGH_HZ: f64 = 210.0;
const SILENCE_LEVEL: f64 = -6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpusConfig {
    pub n_mels: usize,
    pub n_mgc: usize,
    pub mel_shift_ms: f64,
    pub vocoder_shift_ms: f64,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    pub phrase_morae: (usize, usize),
    pub max_phrases: usize,
    pub quantizer: F0Quantizer,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            n_mgc: 40,
            mel_shift_ms: 12.5,
            vocoder_shift_ms: 5.0,
            min_phonemes: 8,
            max_phonemes: 40,
            phrase_morae: (4, 8),
            max_phrases: 4,
            quantizer: F0Quantizer::default(),
        }
    }
}

/// Mel-grid frames for one phoneme.
pub fn duration_frames(p: usize, inv: &PhonemeInventory) -> usize {
    if p == inv.silence {
        6
    } else if inv.is_pause(p) {
        5
    } else {
        3 + (p * 5 + 2) % 8
    }
}

/// Log-mel template of a phoneme: spectral tilt plus two Gaussian bands
/// (three for vowels). Silence and pauses are flat and quiet.
pub fn phoneme_template(p: usize, inv: &PhonemeInventory, n_mels: usize) -> Vec<f64> {
    if inv.is_silence_or_pause(p) {
        return vec![SILENCE_LEVEL; n_mels];
    }
    let n = n_mels as f64;
    let mut bands = vec![
        (0.05 + 0.3 * ((p * 7) % 24) as f64 / 24.0, 0.025 + 0.0125 * (p % 3) as f64, 2.5),
        (0.4 + 0.5 * ((p * 13) % 24) as f64 / 24.0, 0.04 + 0.0125 * ((p / 3) % 4) as f64, 1.5 + 0.3 * (p % 4) as f64),
    ];
    if p < 5 {
        bands.push((0.75 + 0.04 * p as f64, 0.03, 1.2));
    }
    (0..n_mels)
        .map(|m| {
            let x = m as f64 / n;
            let mut v = -2.0 - 2.0 * x;
            for (c, w, a) in &bands {
                v += a * (-(x - c).powi(2) / (2.0 * w * w)).exp();
            }
            v
        })
        .collect()
}

/// High/low pattern over the morae of one accentual phrase.
pub fn accent_contour(accent_type: usize, n_morae: usize) -> Vec<bool> {
    (0..n_morae)
        .map(|i| match accent_type {
            0 => i > 0,
            1 => i == 0,
            k => i > 0 && i < k,
        })
        .collect()
}

fn dct(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(m, v)| v * (std::f64::consts::PI * k as f64 * (m as f64 + 0.5) / n).cos())
                .sum();
            if k == 0 {
                s / n
            } else {
                2.0 * s / n
            }
        })
        .collect()
}

/// Deterministic acoustics for a labelled phoneme sequence.
///
/// `accents` gives each phoneme its phrase's accentual type ([`ACCENT_NONE`]
/// on silence and pauses). Phrases are the maximal runs of speech phonemes.
pub fn render_utterance(
    id: &str,
    phonemes: &[usize],
    accents: &[usize],
    inv: &PhonemeInventory,
    cfg: &ToyCorpusConfig,
) -> Result<Utterance> {
    if phonemes.len() != accents.len() || phonemes.is_empty() {
        return Err(Error::Shape(format!("{id}: {} phonemes with {} accents", phonemes.len(), accents.len())));
    }
    for &p in phonemes {
        inv.symbol(p)?;
    }
    let durations: Vec<usize> = phonemes.iter().map(|&p| duration_frames(p, inv)).collect();
    let t_mel: usize = durations.iter().sum();

    // Mel grid: template rows with a half blend on each phoneme's first frame.
    let templates: Vec<Vec<f64>> = phonemes.iter().map(|&p| phoneme_template(p, inv, cfg.n_mels)).collect();
    let mut mel = Tensor::zeros(&[t_mel, cfg.n_mels]);
    let mut owner = Vec::with_capacity(t_mel);
    let mut t = 0;
    for (i, &d) in durations.iter().enumerate() {
        for k in 0..d {
            let row = mel.row_mut(t);
            if k == 0 && i > 0 {
                for (m, v) in row.iter_mut().enumerate() {
                    *v = 0.5 * (templates[i - 1][m] + templates[i][m]);
                }
            } else {
                row.copy_from_slice(&templates[i]);
            }
            owner.push(i);
            t += 1;
        }
    }

    // Per-phoneme F0 targets from the phrase's accent pattern.
    let mut target_hz = vec![0.0; phonemes.len()];
    let mut i = 0;
    let mut phrase = 0;
    while i < phonemes.len() {
        if inv.is_silence_or_pause(phonemes[i]) {
            i += 1;
            continue;
        }
        let start = i;
        while i < phonemes.len() && !inv.is_silence_or_pause(phonemes[i]) {
            i += 1;
        }
        let n_morae = i - start;
        let pattern = accent_contour(accents[start], n_morae);
        for (k, high) in pattern.iter().enumerate() {
            let level = if *high { HIGH_HZ } else { LOW_HZ };
            target_hz[start + k] = level * 0.96f64.powi(phrase) * (1.0 - 0.06 * k as f64 / n_morae as f64);
        }
        phrase += 1;
    }

    // Vocoder grid.
    let t_voc = vocoder_boundary(t_mel, cfg.mel_shift_ms, cfg.vocoder_shift_ms);
    let bounds: Vec<usize> = std::iter::once(0)
        .chain(durations.iter().scan(0, |acc, d| {
            *acc += d;
            Some(*acc)
        }))
        .map(|b| vocoder_boundary(b, cfg.mel_shift_ms, cfg.vocoder_shift_ms))
        .collect();
    let mut voc_owner = vec![0; t_voc];
    for i in 0..phonemes.len() {
        voc_owner[bounds[i]..bounds[i + 1]].iter_mut().for_each(|o| *o = i);
    }
    let mut mgc = Tensor::zeros(&[t_voc, cfg.n_mgc]);
    let mut voiced = vec![false; t_voc];
    let mut raw = vec![0.0; t_voc];
    for j in 0..t_voc {
        let mel_t = ((j as f64 * cfg.vocoder_shift_ms / cfg.mel_shift_ms) as usize).min(t_mel - 1);
        mgc.row_mut(j).copy_from_slice(&dct(mel.row(mel_t), cfg.n_mgc));
        let p = voc_owner[j];
        voiced[j] = !inv.is_silence_or_pause(phonemes[p]);
        if voiced[j] {
            raw[j] = target_hz[p].ln();
        }
    }
    // 7-tap moving average within each voiced run.
    let mut logf0 = vec![0.0; t_voc];
    for j in 0..t_voc {
        if !voiced[j] {
            continue;
        }
        let (mut s, mut c) = (0.0, 0.0);
        for k in j.saturating_sub(3)..(j + 4).min(t_voc) {
            let contiguous = (k.min(j)..=k.max(j)).all(|q| voiced[q]);
            if contiguous {
                s += raw[k];
                c += 1.0;
            }
        }
        logf0[j] = s / c;
    }

    Ok(Utterance {
        id: id.to_string(),
        phonemes: phonemes.to_vec(),
        accents: Some(accents.to_vec()),
        durations: Some(durations),
        mel: Some(mel),
        mgc: Some(mgc),
        logf0: Some(logf0),
        voiced: Some(voiced),
        mel_shift_ms: cfg.mel_shift_ms,
        vocoder_shift_ms: cfg.vocoder_shift_ms,
    })
}

/// Random labels rendered through [`render_utterance`]. Utterance `i` draws
/// from its own stream, so the corpus is identical for a given seed.
pub fn generate_toy_corpus(
    seed: u64,
    n_utterances: usize,
    inv: &PhonemeInventory,
    accent_types: usize,
    cfg: &ToyCorpusConfig,
) -> Result<Vec<Utterance>> {
    if n_utterances == 0 {
        return Err(Error::InvalidArgument("corpus needs at least one utterance".into()));
    }
    if accent_types == 0 || accent_types > N_ACCENT_TYPES || accent_types > cfg.phrase_morae.0 {
        return Err(Error::InvalidArgument(format!("{accent_types} accent types")));
    }
    let root = RngStream::new(seed);
    (0..n_utterances)
        .map(|u| {
            let mut rng = root.fork(u as u64).rng(Substream::Data);
            loop {
                let n_phrases = rng.gen_range(1..=cfg.max_phrases);
                let mut ph = vec![inv.silence];
                let mut ac = vec![ACCENT_NONE];
                for k in 0..n_phrases {
                    if k > 0 {
                        ph.push(inv.pause);
                        ac.push(ACCENT_NONE);
                    }
                    let len = rng.gen_range(cfg.phrase_morae.0..=cfg.phrase_morae.1);
                    let ty = rng.gen_range(0..accent_types);
                    for _ in 0..len {
                        ph.push(rng.gen_range(0..inv.n_speech()));
                        ac.push(ty);
                    }
                }
                ph.push(inv.silence);
                ac.push(ACCENT_NONE);
                if (cfg.min_phonemes..=cfg.max_phonemes).contains(&ph.len()) {
                    return render_utterance(&format!("utt{u:05}"), &ph, &ac, inv, cfg);
                }
            }
        })
        .collect()
}

/// Train/validation/test sizes: validation and test take `round(frac * n)`
/// each, training keeps the rest.
pub fn split_corpus(n: usize, val_frac: f64, test_frac: f64) -> (usize, usize, usize) {
    let val = (val_frac * n as f64).round() as usize;
    let test = (test_frac * n as f64).round() as usize;
    (n.saturating_sub(val + test), val, test)
}
