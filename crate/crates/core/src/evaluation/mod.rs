//! Objective evaluation: alignment-error diagnosis, F0 metrics, accentual
//! phrase boundaries read off forward attention, and self-attention head
//! statistics.
//!
//! Everything here is a pure function of alignment matrices and feature
//! sequences, so it runs equally on fresh predictions and on dumped CSVs.

mod alignment;
mod f0;
mod self_attention;

pub use alignment::{
    count_alignment_errors, diagnose_alignment, diagnose_head, extract_accent_boundaries, AlignmentDiagnosis,
    DiagnosisConfig, ErrorCategory, ErrorCounts, Verdict,
};
pub use f0::{f0_metrics, F0Metrics};
pub use self_attention::{
    decoder_sa_summary, sa_pair_statistics, HeadMass, PairScore, PairScoreTable, PairSummary, DEFAULT_MIN_COUNT,
    DEFAULT_TOP,
};
