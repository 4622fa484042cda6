use std::collections::BTreeMap;
use std::fmt;

use crate::attention::{AlignmentMatrix, SourceKind};
use crate::error::{Error, Result};
use crate::features::PhonemeInventory;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ErrorCategory {
    Skip,
    Repetition,
    NonMonotonic,
    PrematureTermination,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 4] = [
        ErrorCategory::Skip,
        ErrorCategory::Repetition,
        ErrorCategory::NonMonotonic,
        ErrorCategory::PrematureTermination,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Skip => "skip",
            ErrorCategory::Repetition => "repetition",
            ErrorCategory::NonMonotonic => "non_monotonic",
            ErrorCategory::PrematureTermination => "premature_termination",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    Error,
}

/// Thresholds that turn an argmax path into error categories.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnosisConfig {
    /// Largest forward jump of the path, in source positions, still allowed.
    pub skip_tol: usize,
    /// Longest run of decoder steps on one non-pause position still allowed.
    pub stall_tol: usize,
    /// Fraction of the source the path must reach.
    pub end_coverage: f64,
    /// Half-width of the diagonal band, in normalized time.
    pub band: f64,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        Self { skip_tol: 3, stall_tol: 15, end_coverage: 0.9, band: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentDiagnosis {
    pub verdict: Verdict,
    /// Sorted, without duplicates; empty iff the verdict is `Ok`.
    pub categories: Vec<ErrorCategory>,
    pub argmax_path: Vec<usize>,
    /// Share of the attention mass inside the diagonal band.
    pub diagonality: f64,
}

impl AlignmentDiagnosis {
    pub fn has(&self, c: ErrorCategory) -> bool {
        self.categories.contains(&c)
    }
}

/// Diagnoses every head of `m`. `pauses[n]` marks source positions where a
/// long stay is expected (pauses and silences).
pub fn diagnose_alignment(
    m: &AlignmentMatrix,
    pauses: &[bool],
    cfg: &DiagnosisConfig,
) -> Result<Vec<AlignmentDiagnosis>> {
    if m.weights.is_empty() {
        return Err(Error::InvalidArgument("alignment without heads".into()));
    }
    m.weights.iter().map(|w| diagnose_head(w, pauses, cfg)).collect()
}

/// Diagnoses one `[steps, source_len]` weight matrix.
pub fn diagnose_head(w: &Tensor, pauses: &[bool], cfg: &DiagnosisConfig) -> Result<AlignmentDiagnosis> {
    let (t_len, n) = (w.rows(), w.cols());
    if t_len == 0 || n == 0 {
        return Err(Error::InvalidArgument("empty alignment matrix".into()));
    }
    if pauses.len() != n {
        return Err(Error::Shape(format!("{} pause flags for {n} source positions", pauses.len())));
    }
    let path: Vec<usize> = (0..t_len).map(|t| argmax(w.row(t))).collect();

    let mut cats = Vec::new();
    // The path starts from a virtual position 0 so that skipping the first
    // phonemes counts as well.
    let skip = std::iter::once(0)
        .chain(path.iter().copied())
        .collect::<Vec<_>>()
        .windows(2)
        .any(|p| p[1] > p[0] + cfg.skip_tol);
    if skip {
        cats.push(ErrorCategory::Skip);
    }
    let mut run = 1;
    let mut repetition = false;
    for t in 1..=t_len {
        if t < t_len && path[t] == path[t - 1] {
            run += 1;
            continue;
        }
        if run > cfg.stall_tol && !pauses[path[t - 1]] {
            repetition = true;
        }
        run = 1;
    }
    if repetition {
        cats.push(ErrorCategory::Repetition);
    }
    if path.windows(2).any(|p| p[1] + 1 < p[0]) {
        cats.push(ErrorCategory::NonMonotonic);
    }
    let reached = path[t_len - 1] + 1;
    if (reached as f64) < cfg.end_coverage * n as f64 {
        cats.push(ErrorCategory::PrematureTermination);
    }

    let mut inside = 0.0;
    let mut total = 0.0;
    for t in 0..t_len {
        let tt = (t as f64 + 0.5) / t_len as f64;
        for (j, &v) in w.row(t).iter().enumerate() {
            total += v;
            if (tt - (j as f64 + 0.5) / n as f64).abs() <= cfg.band {
                inside += v;
            }
        }
    }
    let diagonality = if total > 0.0 { inside / total } else { 0.0 };
    let verdict = if cats.is_empty() { Verdict::Ok } else { Verdict::Error };
    Ok(AlignmentDiagnosis { verdict, categories: cats, argmax_path: path, diagonality })
}

/// First index of the row maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorCounts {
    pub utterances: usize,
    /// Utterances with at least one category.
    pub errors: usize,
    /// Utterances showing each category; one utterance may count in several.
    pub per_category: BTreeMap<ErrorCategory, usize>,
}

impl ErrorCounts {
    pub fn error_rate(&self) -> f64 {
        if self.utterances == 0 {
            0.0
        } else {
            self.errors as f64 / self.utterances as f64
        }
    }
}

/// Aggregates one forward-attention diagnosis per utterance.
pub fn count_alignment_errors(diags: &[AlignmentDiagnosis]) -> ErrorCounts {
    let mut per_category: BTreeMap<ErrorCategory, usize> = ErrorCategory::ALL.iter().map(|&c| (c, 0)).collect();
    let mut errors = 0;
    for d in diags {
        if d.verdict == Verdict::Error {
            errors += 1;
        }
        for c in &d.categories {
            *per_category.get_mut(c).expect("all categories present") += 1;
        }
    }
    ErrorCounts { utterances: diags.len(), errors, per_category }
}

/// Decoder steps where forward attention enters a pause phoneme: the first
/// step of every run of steps whose argmax is a pause.
pub fn extract_accent_boundaries(
    forward: &AlignmentMatrix,
    phonemes: &[usize],
    inv: &PhonemeInventory,
) -> Result<Vec<usize>> {
    if forward.source_kind != SourceKind::LstmMemory {
        return Err(Error::InvalidArgument(format!(
            "boundaries come from forward attention, got {}",
            forward.source_kind
        )));
    }
    if forward.source_length() != phonemes.len() {
        return Err(Error::Shape(format!(
            "alignment over {} positions for {} phonemes",
            forward.source_length(),
            phonemes.len()
        )));
    }
    let w = forward.mean_heads();
    let mut out = Vec::new();
    let mut prev = false;
    for t in 0..w.rows() {
        let on = inv.is_pause(phonemes[argmax(w.row(t))]);
        if on && !prev {
            out.push(t);
        }
        prev = on;
    }
    Ok(out)
}
