use std::collections::BTreeMap;

use crate::attention::{AlignmentMatrix, SourceKind};
use crate::error::{Error, Result};
use crate::features::PhonemeInventory;

/// Minimum occurrence count for a phoneme pair to be ranked.
pub const DEFAULT_MIN_COUNT: usize = 30;
/// Length of the ranking prefix the summaries look at.
pub const DEFAULT_TOP: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScore {
    /// Phoneme of the attending (query) position.
    pub a: usize,
    /// Phoneme of the attended (key) position.
    pub b: usize,
    pub mean_score: f64,
    pub count: usize,
}

/// Ranked phoneme pairs of one encoder self-attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct PairScoreTable {
    pub head: usize,
    /// Descending by mean score; ties by `(a, b)`.
    pub rows: Vec<PairScore>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairSummary {
    pub top: usize,
    pub identical: usize,
    pub with_pause_or_silence: usize,
}

impl PairScoreTable {
    /// Identical-phoneme pairs and pairs touching a pause or silence among
    /// the first `top` rows.
    pub fn summary(&self, inv: &PhonemeInventory, top: usize) -> PairSummary {
        let head = &self.rows[..top.min(self.rows.len())];
        PairSummary {
            top: head.len(),
            identical: head.iter().filter(|r| r.a == r.b).count(),
            with_pause_or_silence: head
                .iter()
                .filter(|r| inv.is_silence_or_pause(r.a) || inv.is_silence_or_pause(r.b))
                .count(),
        }
    }
}

/// Mean attention weight per ordered phoneme pair over all position pairs of
/// all utterances, one table per head. Pairs seen fewer than `min_count`
/// times are dropped.
pub fn sa_pair_statistics(
    weights: &[AlignmentMatrix],
    phonemes: &[&[usize]],
    min_count: usize,
) -> Result<Vec<PairScoreTable>> {
    if weights.len() != phonemes.len() {
        return Err(Error::Shape(format!("{} alignments for {} phoneme sequences", weights.len(), phonemes.len())));
    }
    let Some(first) = weights.first() else { return Ok(Vec::new()) };
    let heads = first.heads();
    let mut acc: Vec<BTreeMap<(usize, usize), (f64, usize)>> = vec![BTreeMap::new(); heads];
    for (m, ph) in weights.iter().zip(phonemes) {
        if m.source_kind != SourceKind::EncoderSelf {
            return Err(Error::InvalidArgument(format!(
                "pair statistics need encoder self-attention, got {}",
                m.source_kind
            )));
        }
        if m.heads() != heads {
            return Err(Error::Shape(format!("{} heads, expected {heads}", m.heads())));
        }
        if m.steps() != ph.len() || m.source_length() != ph.len() {
            return Err(Error::Shape(format!("{}x{} weights for {} phonemes", m.steps(), m.source_length(), ph.len())));
        }
        for (h, w) in m.weights.iter().enumerate() {
            for (i, &a) in ph.iter().enumerate() {
                for (j, &b) in ph.iter().enumerate() {
                    let e = acc[h].entry((a, b)).or_insert((0.0, 0));
                    e.0 += w.get(i, j);
                    e.1 += 1;
                }
            }
        }
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(head, pairs)| {
            let mut rows: Vec<PairScore> = pairs
                .into_iter()
                .filter(|(_, (_, c))| *c >= min_count)
                .map(|((a, b), (s, c))| PairScore { a, b, mean_score: s / c as f64, count: c })
                .collect();
            rows.sort_by(|x, y| y.mean_score.total_cmp(&x.mean_score).then((x.a, x.b).cmp(&(y.a, y.b))));
            PairScoreTable { head, rows }
        })
        .collect())
}

/// Mean attention mass per decoder step on the first frame and on pause
/// frames, for one head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadMass {
    pub first_frame: f64,
    /// Mass on the pause frames visible to each step (zero before the first).
    pub pause: f64,
}

/// Per-head masses of a causal decoder self-attention matrix.
/// `pause_steps` lists decoder steps that fall on pauses.
pub fn decoder_sa_summary(m: &AlignmentMatrix, pause_steps: &[usize]) -> Result<Vec<HeadMass>> {
    if m.source_kind != SourceKind::DecoderSelf {
        return Err(Error::InvalidArgument(format!("expected decoder self-attention, got {}", m.source_kind)));
    }
    let t_len = m.steps();
    if t_len == 0 {
        return Err(Error::InvalidArgument("empty alignment matrix".into()));
    }
    let mut is_pause = vec![false; t_len];
    for &s in pause_steps {
        if s >= t_len {
            return Err(Error::InvalidArgument(format!("pause step {s} beyond {t_len} steps")));
        }
        is_pause[s] = true;
    }
    Ok(m.weights
        .iter()
        .map(|w| {
            let mut first = 0.0;
            let mut pause = 0.0;
            for t in 0..t_len {
                let row = w.row(t);
                first += row[0];
                pause += row[..=t].iter().zip(&is_pause).filter(|(_, &p)| p).map(|(v, _)| v).sum::<f64>();
            }
            HeadMass { first_frame: first / t_len as f64, pause: pause / t_len as f64 }
        })
        .collect())
}
