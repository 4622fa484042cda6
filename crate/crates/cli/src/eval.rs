use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;
use ja_tacotron::attention::{AlignmentMatrix, SourceKind};
use ja_tacotron::evaluation::{
    count_alignment_errors, decoder_sa_summary, diagnose_alignment, extract_accent_boundaries, f0_metrics,
    sa_pair_statistics, AlignmentDiagnosis, DiagnosisConfig, ErrorCategory, DEFAULT_MIN_COUNT, DEFAULT_TOP,
};
use ja_tacotron::features::{read_feature_file, trim_silence, PhonemeInventory, Utterance};

use crate::data::{load_corpus, resolve_corpus};
use crate::manifest::{create_out_dir, hash_input, prepare_out_dir, RunManifest};
use crate::synth::SYNTH_INDEX;
use crate::{CmdResult, Failure, UsageContext};

pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Args)]
pub struct EvalArgs {
    /// Output directory of a synth run.
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub ref_corpus: PathBuf,
    /// Report directory.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub skip_tol: usize,
    #[arg(long, default_value_t = 15)]
    pub stall_tol: usize,
    #[arg(long, default_value_t = 0.9)]
    pub end_coverage: f64,
    /// Take the F0 correlation over log F0 instead of Hz.
    #[arg(long)]
    pub log_f0_corr: bool,
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
    pub min_count: usize,
}

/// Dumps of one synthesized utterance.
struct Dumps {
    forward: AlignmentMatrix,
    encoder_self: Option<AlignmentMatrix>,
    decoder_self: Option<AlignmentMatrix>,
    feats: Utterance,
}

fn read_alignment(path: &Path) -> anyhow::Result<AlignmentMatrix> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    AlignmentMatrix::read_csv(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn load_dumps(dir: &Path, r: &Utterance) -> anyhow::Result<Dumps> {
    let al = |k: SourceKind| dir.join(format!("{}_{k}.csv", r.id));
    let opt = |k: SourceKind| -> anyhow::Result<Option<AlignmentMatrix>> {
        let p = al(k);
        if p.exists() {
            read_alignment(&p).map(Some)
        } else {
            Ok(None)
        }
    };
    let forward = read_alignment(&al(SourceKind::LstmMemory))?;
    let mut feats = r.clone();
    feats.mel = None;
    feats.mgc = None;
    feats.logf0 = None;
    feats.voiced = None;
    let fp = dir.join(format!("{}.feat", r.id));
    let mut f = BufReader::new(File::open(&fp).with_context(|| format!("opening {}", fp.display()))?);
    read_feature_file(&mut f, &mut feats)?;
    Ok(Dumps {
        forward,
        encoder_self: opt(SourceKind::EncoderSelf)?,
        decoder_self: opt(SourceKind::DecoderSelf)?,
        feats,
    })
}

/// Synthesized ids listed by the synth run, in order.
fn synth_ids(dir: &Path) -> anyhow::Result<Vec<String>> {
    let p = dir.join(SYNTH_INDEX);
    let text = std::fs::read_to_string(&p)
        .with_context(|| format!("{} is not a synth output (no {SYNTH_INDEX})", dir.display()))?;
    let ids: Vec<String> = text.lines().skip(1).filter_map(|l| l.split(',').next()).map(str::to_string).collect();
    if ids.is_empty() {
        return Err(anyhow!("{} lists no utterances", p.display()));
    }
    Ok(ids)
}

fn cats(d: &AlignmentDiagnosis) -> String {
    d.categories.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(";")
}

pub fn run(a: EvalArgs) -> CmdResult {
    let inv = PhonemeInventory::toy();
    if !a.pred_dir.is_dir() {
        return Err(Failure::Usage(anyhow!("{} is not a directory", a.pred_dir.display())));
    }
    let ids = synth_ids(&a.pred_dir).usage()?;
    let ref_path = resolve_corpus(&a.ref_corpus);
    let refs = load_corpus(&ref_path, &inv).usage()?;
    let by_id: BTreeMap<&str, &Utterance> = refs.iter().map(|u| (u.id.as_str(), u)).collect();
    let missing_refs: Vec<&String> = ids.iter().filter(|i| !by_id.contains_key(i.as_str())).collect();
    if !missing_refs.is_empty() {
        return Err(Failure::Usage(anyhow!(
            "{} synthesized ids are not in the reference corpus, e.g. {}",
            missing_refs.len(),
            missing_refs[0]
        )));
    }
    let dcfg = DiagnosisConfig {
        skip_tol: a.skip_tol,
        stall_tol: a.stall_tol,
        end_coverage: a.end_coverage,
        ..DiagnosisConfig::default()
    };
    if !(0.0..=1.0).contains(&dcfg.end_coverage) {
        return Err(Failure::Usage(anyhow!("--end-coverage must lie in [0, 1]")));
    }
    prepare_out_dir(&a.report).usage()?;

    create_out_dir(&a.report).runtime()?;
    let mut m = RunManifest::new("eval", None);
    m.corpus = Some(hash_input(&ref_path).runtime()?);
    m.write(&a.report).runtime()?;
    let report = build_report(&a, &inv, &ids, &by_id, &dcfg).runtime()?;
    for (name, text) in &report {
        std::fs::write(a.report.join(name), text).with_context(|| format!("writing {name}")).runtime()?;
    }
    print!("{}", report.iter().find(|(n, _)| n == SUMMARY_FILE).map_or("", |(_, t)| t.as_str()));
    m.finish(&a.report).runtime()
}

/// Report files by name. Deterministic in its inputs.
fn build_report(
    a: &EvalArgs,
    inv: &PhonemeInventory,
    ids: &[String],
    by_id: &BTreeMap<&str, &Utterance>,
    dcfg: &DiagnosisConfig,
) -> anyhow::Result<Vec<(String, String)>> {
    let mut missing = Vec::new();
    let mut diag_rows = String::from("id,verdict,categories,diagonality,steps,source_length\n");
    let mut diags = Vec::new();
    let mut f0_rows = String::from("id,rmse_hz,corr,uv_error_pct,frames_compared\n");
    let (mut pf, mut rf, mut pv, mut rv) = (vec![], vec![], vec![], vec![]);
    let mut f0_skipped = 0;
    let mut boundary_rows = String::new();
    let (mut boundary_match, mut boundary_n) = (0, 0);
    let mut enc_sa = Vec::new();
    let mut enc_ph = Vec::new();
    let mut dec_rows = String::from("id,head,first_frame_mass,pause_mass\n");
    let mut dec_sum: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();

    for id in ids {
        let r = trim_silence(by_id[id.as_str()], inv)?;
        let d = match load_dumps(&a.pred_dir, &r) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("{id}: {e:#}; excluded");
                missing.push(id.clone());
                continue;
            }
        };
        let pauses: Vec<bool> = r.phonemes.iter().map(|&p| inv.is_silence_or_pause(p)).collect();
        let diag = diagnose_alignment(&d.forward, &pauses, dcfg)?.swap_remove(0);
        let _ = writeln!(
            diag_rows,
            "{id},{},{},{:.6},{},{}",
            if diag.categories.is_empty() { "ok" } else { "error" },
            cats(&diag),
            diag.diagonality,
            d.forward.steps(),
            d.forward.source_length()
        );

        let bounds = extract_accent_boundaries(&d.forward, &r.phonemes, inv)?;
        let phrases = 1 + r.phonemes.iter().filter(|&&p| inv.is_pause(p)).count();
        boundary_n += 1;
        if bounds.len() + 1 == phrases {
            boundary_match += 1;
        }
        let list: Vec<String> = bounds.iter().map(usize::to_string).collect();
        let _ = writeln!(
            boundary_rows,
            "{{\"id\": \"{id}\", \"boundaries\": [{}], \"extracted_phrases\": {}, \"reference_phrases\": {phrases}}}",
            list.join(", "),
            bounds.len() + 1
        );

        if let (Some(plf), Some(pvv), Some(rlf), Some(rvv)) = (&d.feats.logf0, &d.feats.voiced, &r.logf0, &r.voiced) {
            let n = rlf.len();
            if plf.len() >= n {
                let hz = |lf: &[f64], v: &[bool]| -> Vec<f64> {
                    lf.iter().zip(v).map(|(&x, &v)| if v { x.exp() } else { 0.0 }).collect()
                };
                let (p, q) = (hz(&plf[..n], &pvv[..n]), hz(rlf, rvv));
                match f0_metrics(&p, &q, &pvv[..n], rvv, a.log_f0_corr) {
                    Ok(fm) => {
                        let _ = writeln!(
                            f0_rows,
                            "{id},{:.6},{:.6},{:.6},{}",
                            fm.rmse_hz, fm.corr, fm.uv_error_pct, fm.n_frames_compared
                        );
                    }
                    Err(e) => {
                        let _ = writeln!(f0_rows, "{id},,,,0");
                        log::warn!("{id}: F0 metrics undefined ({e})");
                    }
                }
                pf.extend(p);
                rf.extend(q);
                pv.extend_from_slice(&pvv[..n]);
                rv.extend_from_slice(rvv);
            } else {
                log::warn!(
                    "{id}: {} predicted F0 frames for {n} reference frames; use forced mode for F0 metrics",
                    plf.len()
                );
                f0_skipped += 1;
            }
        }

        if let Some(es) = d.encoder_self {
            enc_sa.push(es);
            enc_ph.push(r.phonemes.clone());
        }
        if let Some(ds) = &d.decoder_self {
            let fw = d.forward.mean_heads();
            let pause_steps: Vec<usize> = (0..fw.rows())
                .filter(|&t| {
                    let row = fw.row(t);
                    let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                    inv.is_silence_or_pause(r.phonemes[best])
                })
                .filter(|&t| t < ds.steps())
                .collect();
            for (h, hm) in decoder_sa_summary(ds, &pause_steps)?.into_iter().enumerate() {
                let _ = writeln!(dec_rows, "{id},{h},{:.6},{:.6}", hm.first_frame, hm.pause);
                let e = dec_sum.entry(h).or_default();
                e.0 += hm.first_frame;
                e.1 += hm.pause;
                e.2 += 1;
            }
        }
        diags.push(diag);
    }
    if diags.is_empty() {
        return Err(anyhow!("no utterance in {} has complete dumps", a.pred_dir.display()));
    }

    let mut files = Vec::new();
    let mut s = String::new();
    let counts = count_alignment_errors(&diags);
    let _ = writeln!(s, "[alignment]");
    let _ = writeln!(s, "utterances {}", counts.utterances);
    let _ = writeln!(s, "missing {}", missing.len());
    let _ = writeln!(s, "errors {} ({:.2}%)", counts.errors, 100.0 * counts.error_rate());
    for c in ErrorCategory::ALL {
        let _ = writeln!(s, "{} {}", c, counts.per_category[&c]);
    }
    let mean_diag = diags.iter().map(|d| d.diagonality).sum::<f64>() / diags.len() as f64;
    let _ = writeln!(s, "mean_diagonality {mean_diag:.6}");

    let _ = writeln!(s, "\n[f0]");
    if pf.is_empty() {
        let _ = writeln!(s, "not applicable (no F0 predictions)");
    } else {
        match f0_metrics(&pf, &rf, &pv, &rv, a.log_f0_corr) {
            Ok(fm) => {
                let _ = writeln!(
                    s,
                    "rmse_hz {:.6}\ncorr {:.6}\nuv_error_pct {:.6}\nframes_compared {}",
                    fm.rmse_hz, fm.corr, fm.uv_error_pct, fm.n_frames_compared
                );
            }
            Err(e) => {
                let _ = writeln!(s, "undefined: {e}");
            }
        }
        let _ = writeln!(s, "correlation_domain {}", if a.log_f0_corr { "log" } else { "hz" });
    }
    let _ = writeln!(s, "length_mismatch_skipped {f0_skipped}");

    let _ = writeln!(s, "\n[boundaries]");
    let _ = writeln!(s, "phrase_count_matches {boundary_match}/{boundary_n}");

    let _ = writeln!(s, "\n[self_attention]");
    if enc_sa.is_empty() {
        let _ = writeln!(s, "no encoder self-attention dumps");
    } else {
        let refs: Vec<&[usize]> = enc_ph.iter().map(Vec::as_slice).collect();
        let tables = sa_pair_statistics(&enc_sa, &refs, a.min_count)?;
        for t in &tables {
            let sum = t.summary(inv, DEFAULT_TOP);
            let _ = writeln!(
                s,
                "encoder head {}: {} ranked pairs; top {}: {} identical, {} with pause or silence",
                t.head,
                t.rows.len(),
                sum.top,
                sum.identical,
                sum.with_pause_or_silence
            );
            let mut csv = String::from("rank,phoneme_a,phoneme_b,mean_score,count\n");
            for (i, row) in t.rows.iter().enumerate() {
                let _ = writeln!(
                    csv,
                    "{},{},{},{:.6},{}",
                    i + 1,
                    inv.symbols[row.a],
                    inv.symbols[row.b],
                    row.mean_score,
                    row.count
                );
            }
            files.push((format!("sa_pairs_head{}.csv", t.head), csv));
        }
    }
    for (h, (first, pause, n)) in &dec_sum {
        let k = *n as f64;
        let _ = writeln!(s, "decoder head {h}: first_frame_mass {:.6}, pause_mass {:.6}", first / k, pause / k);
    }

    files.push(("alignment_errors.csv".into(), diag_rows));
    files.push(("f0_metrics.csv".into(), f0_rows));
    files.push(("boundaries.txt".into(), boundary_rows));
    if !dec_sum.is_empty() {
        files.push(("decoder_self_attention.csv".into(), dec_rows));
    }
    files.push((SUMMARY_FILE.into(), s));
    Ok(files)
}
