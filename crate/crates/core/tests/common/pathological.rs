//! Hand-built alignment matrices with known error categories.

#![allow(dead_code)]

use ja_tacotron::evaluation::ErrorCategory;
use ja_tacotron::numerics::Tensor;

/// `[path.len(), n]` weights with `1 - eps` on the path and `eps` spread
/// over the other positions.
pub fn path_matrix(path: &[usize], n: usize, eps: f64) -> Tensor {
    let rest = if n > 1 { eps / (n - 1) as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(path.len() * n);
    for &p in path {
        data.extend((0..n).map(|j| {
            if j == p {
                if n > 1 {
                    1.0 - eps
                } else {
                    1.0
                }
            } else {
                rest
            }
        }));
    }
    Tensor::matrix(path.len(), n, data).unwrap()
}

/// Each source position held for `per` steps.
pub fn staircase(n: usize, per: usize) -> Vec<usize> {
    (0..n).flat_map(|i| std::iter::repeat_n(i, per)).collect()
}

pub struct Case {
    pub name: String,
    pub weights: Tensor,
    pub pauses: Vec<bool>,
    pub expected: ErrorCategory,
}

fn case(name: String, path: Vec<usize>, n: usize, expected: ErrorCategory) -> Case {
    Case { name, weights: path_matrix(&path, n, 0.05), pauses: vec![false; n], expected }
}

/// Five matrices per category, each showing that category alone under the
/// default thresholds (skip 3, stall 15, coverage 0.9).
pub fn suite() -> Vec<Case> {
    let mut out = Vec::new();
    // Skips: a jump of 4..=8 positions somewhere along a staircase.
    for (k, (at, jump)) in [(2usize, 4usize), (5, 5), (8, 6), (0, 7), (10, 8)].into_iter().enumerate() {
        let n = 24;
        let mut path: Vec<usize> = (0..=at).flat_map(|i| [i, i]).collect();
        if k == 3 {
            // Starts past the first phonemes.
            path.clear();
        }
        let from = if k == 3 { jump } else { at + jump };
        path.extend((from..n).flat_map(|i| [i, i]));
        out.push(case(format!("skip{k}"), path, n, ErrorCategory::Skip));
    }
    // Repetitions: one speech position held for 16..=40 steps.
    for (k, (at, hold)) in [(3usize, 16usize), (6, 20), (0, 25), (9, 30), (11, 40)].into_iter().enumerate() {
        let n = 12;
        let mut path = Vec::new();
        for i in 0..n {
            let r = if i == at { hold } else { 2 };
            path.extend(std::iter::repeat_n(i, r));
        }
        out.push(case(format!("repetition{k}"), path, n, ErrorCategory::Repetition));
    }
    // Backward jumps of 2..=6 followed by a monotonic recovery.
    for (k, (at, back)) in [(5usize, 2usize), (8, 3), (10, 4), (14, 5), (16, 6)].into_iter().enumerate() {
        let n = 20;
        let mut path: Vec<usize> = (0..=at).flat_map(|i| [i, i]).collect();
        path.extend((at - back..n).flat_map(|i| [i, i]));
        out.push(case(format!("non_monotonic{k}"), path, n, ErrorCategory::NonMonotonic));
    }
    // Paths that stop between 40% and 85% of the source.
    for (k, frac) in [0.4, 0.5, 0.6, 0.75, 0.85].into_iter().enumerate() {
        let n = 20;
        let end = (frac * n as f64) as usize;
        let path: Vec<usize> = (0..end).flat_map(|i| [i, i]).collect();
        out.push(case(format!("premature{k}"), path, n, ErrorCategory::PrematureTermination));
    }
    out
}
