mod common;

use std::collections::BTreeMap;

use common::pathological::{path_matrix, staircase, suite};
use ja_tacotron::attention::{AlignmentMatrix, SourceKind};
use ja_tacotron::evaluation::{
    count_alignment_errors, decoder_sa_summary, diagnose_alignment, diagnose_head, extract_accent_boundaries,
    f0_metrics, sa_pair_statistics, DiagnosisConfig, ErrorCategory, Verdict,
};
use ja_tacotron::features::PhonemeInventory;
use ja_tacotron::numerics::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn cfg() -> DiagnosisConfig {
    DiagnosisConfig::default()
}

#[test]
fn staircase_is_clean_and_diagonal() {
    let w = path_matrix(&staircase(12, 2), 12, 0.04);
    let d = diagnose_head(&w, &[false; 12], &cfg()).unwrap();
    assert_eq!(d.verdict, Verdict::Ok);
    assert!(d.categories.is_empty());
    assert!(d.diagonality > 0.9, "{}", d.diagonality);
    assert_eq!(d.argmax_path, staircase(12, 2));
}

#[test]
fn jump_past_tolerance_is_a_skip() {
    let path = vec![0, 0, 5, 5, 6, 6, 7, 7];
    let d = diagnose_head(&path_matrix(&path, 8, 0.1), &[false; 8], &cfg()).unwrap();
    assert!(d.has(ErrorCategory::Skip));
    assert_eq!(d.verdict, Verdict::Error);
    let ok = vec![0, 0, 3, 3, 4, 5, 6, 7];
    let d = diagnose_head(&path_matrix(&ok, 8, 0.1), &[false; 8], &cfg()).unwrap();
    assert_eq!(d.verdict, Verdict::Ok, "{:?}", d.categories);
}

#[test]
fn pathological_suite_is_classified() {
    let cases = suite();
    assert_eq!(cases.len(), 20);
    let mut per: BTreeMap<ErrorCategory, usize> = BTreeMap::new();
    for c in &cases {
        let d = diagnose_head(&c.weights, &c.pauses, &cfg()).unwrap();
        assert_eq!(d.categories, vec![c.expected], "{}", c.name);
        *per.entry(c.expected).or_default() += 1;
    }
    assert!(per.values().all(|&k| k == 5));
}

#[test]
fn long_stays_on_pauses_are_allowed() {
    let n = 10;
    let mut path = Vec::new();
    for i in 0..n {
        path.extend(std::iter::repeat_n(i, if i == 4 { 30 } else { 2 }));
    }
    let mut pauses = vec![false; n];
    pauses[4] = true;
    let w = path_matrix(&path, n, 0.05);
    assert_eq!(diagnose_head(&w, &pauses, &cfg()).unwrap().verdict, Verdict::Ok);
    assert!(diagnose_head(&w, &[false; 10], &cfg()).unwrap().has(ErrorCategory::Repetition));
}

#[test]
fn thresholds_are_configurable() {
    let path = vec![0, 0, 5, 5, 6, 6, 7, 7];
    let loose = DiagnosisConfig { skip_tol: 5, ..cfg() };
    let d = diagnose_head(&path_matrix(&path, 8, 0.1), &[false; 8], &loose).unwrap();
    assert_eq!(d.verdict, Verdict::Ok);
    let p = staircase(10, 2);
    let w = path_matrix(&p[..16], 10, 0.1);
    assert!(diagnose_head(&w, &[false; 10], &cfg()).unwrap().has(ErrorCategory::PrematureTermination));
    let lax = DiagnosisConfig { end_coverage: 0.8, ..cfg() };
    assert_eq!(diagnose_head(&w, &[false; 10], &lax).unwrap().verdict, Verdict::Ok);
}

#[test]
fn diagnosis_errors_and_heads() {
    let empty = Tensor::zeros(&[0, 4]);
    assert!(diagnose_head(&empty, &[false; 4], &cfg()).is_err());
    let w = path_matrix(&staircase(4, 2), 4, 0.1);
    assert!(diagnose_head(&w, &[false; 3], &cfg()).is_err());
    let bad = path_matrix(&[0, 0, 3, 3, 1, 1, 3, 3], 4, 0.1);
    let m = AlignmentMatrix::new(SourceKind::LstmMemory, vec![w, bad]).unwrap();
    let d = diagnose_alignment(&m, &[false; 4], &cfg()).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d[0].verdict, Verdict::Ok);
    assert!(d[1].has(ErrorCategory::NonMonotonic));
}

#[test]
fn error_counts() {
    let ok = diagnose_head(&path_matrix(&staircase(8, 2), 8, 0.1), &[false; 8], &cfg()).unwrap();
    let c = count_alignment_errors(&vec![ok.clone(); 7]);
    assert_eq!((c.utterances, c.errors, c.error_rate()), (7, 0, 0.0));
    let cases = suite();
    let mut diags: Vec<_> = cases.iter().map(|c| diagnose_head(&c.weights, &c.pauses, &cfg()).unwrap()).collect();
    diags.push(ok);
    let c = count_alignment_errors(&diags);
    assert_eq!(c.errors, 20);
    assert!((c.error_rate() - 20.0 / 21.0).abs() < 1e-15);
    for cat in ErrorCategory::ALL {
        assert_eq!(c.per_category[&cat], 5);
    }
}

fn normalize(rows: &[Vec<f64>]) -> Tensor {
    let n = rows[0].len();
    let data = rows
        .iter()
        .flat_map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(move |v| v / s)
        })
        .collect();
    Tensor::matrix(rows.len(), n, data).unwrap()
}

proptest! {
    #[test]
    fn verdict_ignores_positive_scaling(
        rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 6), 1..30),
        scales in prop::collection::vec(0.001f64..1000.0, 30),
    ) {
        let scaled: Vec<Vec<f64>> = rows.iter().zip(&scales).map(|(r, s)| r.iter().map(|v| v * s).collect()).collect();
        let a = diagnose_head(&normalize(&rows), &[false; 6], &cfg()).unwrap();
        let b = diagnose_head(&normalize(&scaled), &[false; 6], &cfg()).unwrap();
        prop_assert_eq!(&a.argmax_path, &b.argmax_path);
        prop_assert_eq!(&a.categories, &b.categories);
        prop_assert_eq!(a.verdict == Verdict::Error, !a.categories.is_empty());
        prop_assert!((0.0..=1.0).contains(&a.diagonality));
    }

    #[test]
    fn errors_sum_to_utterances_with_categories(picks in prop::collection::vec(0usize..21, 0..40)) {
        let cases = suite();
        let ok = diagnose_head(&path_matrix(&staircase(8, 2), 8, 0.1), &[false; 8], &cfg()).unwrap();
        let diags: Vec<_> = picks
            .iter()
            .map(|&i| if i == 20 { ok.clone() } else { diagnose_head(&cases[i].weights, &cases[i].pauses, &cfg()).unwrap() })
            .collect();
        let c = count_alignment_errors(&diags);
        prop_assert_eq!(c.errors, diags.iter().filter(|d| !d.categories.is_empty()).count());
        prop_assert_eq!(c.per_category.values().sum::<usize>(), diags.iter().map(|d| d.categories.len()).sum::<usize>());
    }

    #[test]
    fn f0_metrics_are_symmetric(
        frames in prop::collection::vec((80.0f64..400.0, 80.0f64..400.0, any::<bool>(), any::<bool>()), 3..60),
        log in any::<bool>(),
    ) {
        let p: Vec<f64> = frames.iter().map(|f| f.0).collect();
        let r: Vec<f64> = frames.iter().map(|f| f.1).collect();
        let pv: Vec<bool> = frames.iter().map(|f| f.2).collect();
        let rv: Vec<bool> = frames.iter().map(|f| f.3).collect();
        match (f0_metrics(&p, &r, &pv, &rv, log), f0_metrics(&r, &p, &rv, &pv, log)) {
            (Ok(a), Ok(b)) => {
                prop_assert!((a.rmse_hz - b.rmse_hz).abs() < 1e-9);
                prop_assert!((a.corr - b.corr).abs() < 1e-12);
                prop_assert_eq!(a.uv_error_pct, b.uv_error_pct);
                prop_assert!((-1.0..=1.0).contains(&a.corr));
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "asymmetric failure"),
        }
    }
}

#[test]
fn f0_closed_forms() {
    let mut rng = common::seeded(4);
    let r: Vec<f64> = (0..50).map(|_| rng.gen_range(90.0..300.0)).collect();
    let v: Vec<bool> = (0..50).map(|i| i % 7 != 0).collect();
    let m = f0_metrics(&r, &r, &v, &v, false).unwrap();
    assert_eq!((m.rmse_hz, m.corr, m.uv_error_pct), (0.0, 1.0, 0.0));
    assert_eq!(m.n_frames_compared, v.iter().filter(|&&x| x).count());
    let shifted: Vec<f64> = r.iter().map(|x| x + 10.0).collect();
    let m = f0_metrics(&shifted, &r, &v, &v, false).unwrap();
    assert!((m.rmse_hz - 10.0).abs() < 1e-12);
    assert!((m.corr - 1.0).abs() < 1e-12);
    // A multiplicative shift is exact only in the log domain.
    let scaled: Vec<f64> = r.iter().map(|x| x * 1.5).collect();
    assert!((f0_metrics(&scaled, &r, &v, &v, true).unwrap().corr - 1.0).abs() < 1e-12);
    let mut flipped = v.clone();
    flipped[1] = !flipped[1];
    flipped[2] = !flipped[2];
    assert!((f0_metrics(&r, &r, &flipped, &v, false).unwrap().uv_error_pct - 4.0).abs() < 1e-12);
}

#[test]
fn f0_metric_errors() {
    let r = [100.0, 120.0, 140.0];
    assert!(f0_metrics(&r, &r, &[false; 3], &[true; 3], false).is_err());
    assert!(f0_metrics(&r, &r[..2], &[true; 3], &[true; 3], false).is_err());
    assert!(f0_metrics(&[100.0; 3], &r, &[true; 3], &[true; 3], false).is_err());
}

fn forward(path: &[usize], n: usize) -> AlignmentMatrix {
    AlignmentMatrix::new(SourceKind::LstmMemory, vec![path_matrix(path, n, 0.1)]).unwrap()
}

#[test]
fn boundaries_from_forward_attention() {
    let inv = PhonemeInventory::toy();
    let ph = [0usize, 5, 1, 6, 2, inv.pause, 3, 7, 4];
    let mut path = staircase(5, 2);
    path.extend([5, 5, 5]);
    path.extend([6, 6, 7, 7, 8, 8]);
    let b = extract_accent_boundaries(&forward(&path, 9), &ph, &inv).unwrap();
    assert_eq!(b, vec![10]);
    let plain = [0usize, 5, 1, 6, 2, 8, 3, 7, 4];
    assert!(extract_accent_boundaries(&forward(&path, 9), &plain, &inv).unwrap().is_empty());
    // Leaving and re-entering a pause opens a new boundary.
    let mut back = path.clone();
    back.insert(13, 4);
    back.insert(14, 5);
    assert_eq!(extract_accent_boundaries(&forward(&back, 9), &ph, &inv).unwrap(), vec![10, 14]);
    let wrong = AlignmentMatrix::new(SourceKind::SelfAttendedMemory, vec![path_matrix(&path, 9, 0.1)]).unwrap();
    assert!(extract_accent_boundaries(&wrong, &ph, &inv).is_err());
    assert!(extract_accent_boundaries(&forward(&path, 9), &ph[..8], &inv).is_err());
}

fn random_self_attention(rng: &mut rand_chacha::ChaCha8Rng, n: usize, heads: usize) -> AlignmentMatrix {
    let ws = (0..heads)
        .map(|_| {
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(0.01..1.0)).collect()).collect();
            normalize(&rows)
        })
        .collect();
    AlignmentMatrix::new(SourceKind::EncoderSelf, ws).unwrap()
}

#[test]
fn pair_statistics_match_brute_force() {
    let mut rng = common::seeded(11);
    let seqs: Vec<Vec<usize>> = vec![vec![0, 1, 2, 1, 0, 3], vec![2, 2, 1, 3], vec![3, 0, 1, 1, 2, 0, 0]];
    let ws: Vec<AlignmentMatrix> = seqs.iter().map(|s| random_self_attention(&mut rng, s.len(), 2)).collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    for min_count in [1, 3, 6] {
        let tables = sa_pair_statistics(&ws, &refs, min_count).unwrap();
        assert_eq!(tables.len(), 2);
        for (h, table) in tables.iter().enumerate() {
            let mut expected = Vec::new();
            for a in 0..4 {
                for b in 0..4 {
                    let mut count = 0;
                    let mut sum = 0.0;
                    for (s, w) in seqs.iter().zip(&ws) {
                        for i in 0..s.len() {
                            for j in 0..s.len() {
                                if s[i] == a && s[j] == b {
                                    count += 1;
                                    sum += w.weights[h].get(i, j);
                                }
                            }
                        }
                    }
                    if count >= min_count {
                        expected.push((a, b, sum / count as f64, count));
                    }
                }
            }
            assert_eq!(table.rows.len(), expected.len());
            for row in &table.rows {
                let e = expected.iter().find(|e| (e.0, e.1) == (row.a, row.b)).unwrap();
                assert_eq!(row.count, e.3);
                assert!((row.mean_score - e.2).abs() < 1e-15);
                assert!(row.count >= min_count);
            }
            assert!(table.rows.windows(2).all(|p| p[0].mean_score >= p[1].mean_score));
        }
    }
}

#[test]
fn uniform_weights_give_equal_pair_means() {
    let s = [3usize, 1, 3, 25, 24, 1];
    let w = Tensor::full(&[6, 6], 1.0 / 6.0);
    let m = AlignmentMatrix::new(SourceKind::EncoderSelf, vec![w]).unwrap();
    let t = sa_pair_statistics(&[m], &[&s], 1).unwrap();
    assert!(t[0].rows.iter().all(|r| (r.mean_score - 1.0 / 6.0).abs() < 1e-15));
    let inv = PhonemeInventory::toy();
    let sum = t[0].summary(&inv, 100);
    // Pairs over {1, 3, 24, 25}: 16 in all, 4 identical, 12 touching sil or pau.
    assert_eq!((sum.top, sum.identical, sum.with_pause_or_silence), (16, 4, 12));
    assert_eq!(t[0].summary(&inv, 5).top, 5);
}

fn uniform_causal(t: usize) -> Tensor {
    let mut w = Tensor::zeros(&[t, t]);
    for i in 0..t {
        w.row_mut(i)[..=i].fill(1.0 / (i + 1) as f64);
    }
    w
}

#[test]
fn decoder_self_attention_masses() {
    let m = AlignmentMatrix::new(SourceKind::DecoderSelf, vec![uniform_causal(4), uniform_causal(4)]).unwrap();
    let s = decoder_sa_summary(&m, &[]).unwrap();
    assert_eq!(s.len(), 2);
    let want = (1.0 + 1.0 / 2.0 + 1.0 / 3.0 + 1.0 / 4.0) / 4.0;
    assert!((s[0].first_frame - want).abs() < 1e-15);
    assert_eq!(s[0].pause, 0.0);
    let s = decoder_sa_summary(&m, &[1]).unwrap();
    assert!((s[1].pause - (1.0 / 2.0 + 1.0 / 3.0 + 1.0 / 4.0) / 4.0).abs() < 1e-15);
    assert!(decoder_sa_summary(&m, &[4]).is_err());
}

proptest! {
    #[test]
    fn decoder_masses_are_bounded(t in 1usize..12, seed in any::<u64>(), pauses in prop::collection::vec(0usize..12, 0..6)) {
        let mut rng = common::seeded(seed);
        let mut w = Tensor::zeros(&[t, t]);
        for i in 0..t {
            let raw: Vec<f64> = (0..=i).map(|_| rng.gen_range(0.0..1.0) + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            w.row_mut(i)[..=i].iter_mut().zip(&raw).for_each(|(o, v)| *o = v / s);
        }
        let m = AlignmentMatrix::new(SourceKind::DecoderSelf, vec![w]).unwrap();
        let ps: Vec<usize> = pauses.into_iter().filter(|&p| p < t).collect();
        let s = decoder_sa_summary(&m, &ps).unwrap();
        prop_assert!(s[0].first_frame <= 1.0 + 1e-12 && s[0].first_frame > 0.0);
        prop_assert!(s[0].pause <= 1.0 + 1e-12 && s[0].pause >= 0.0);
    }
}
