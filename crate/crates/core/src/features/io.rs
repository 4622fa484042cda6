//! Corpus files and the ingestion path for user-supplied features.
//!
//! Corpus file: `"ATNC" | u32 version | u32 count` then per utterance
//! `str id | f64 mel shift | f64 vocoder shift | u32 n | n tensor records`.
//! Feature file: `"ATNF" | u32 n | n tensor records`. Record names are
//! `phonemes`, `accents`, `durations`, `mel`, `mgc`, `logf0`, `voiced`; ids
//! and flags are stored as `f64`.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{PhonemeInventory, Utterance};
use crate::numerics::codec::{
    read_record, read_str, read_u32, read_u64, write_record, write_str, write_u32, write_u64,
};
use crate::numerics::Tensor;

pub const CORPUS_MAGIC: &[u8; 4] = b"ATNC";
pub const CORPUS_VERSION: u32 = 1;
const FEATURE_MAGIC: &[u8; 4] = b"ATNF";

fn ids_tensor(v: &[usize]) -> Tensor {
    Tensor::vector(v.iter().map(|&x| x as f64).collect())
}

fn tensor_ids(t: &Tensor, what: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(Error::Format { what: "corpus", detail: format!("{what} holds non-integer {x}") })
            }
        })
        .collect()
}

fn stream_records(u: &Utterance, with_labels: bool) -> Vec<(&'static str, Tensor)> {
    let mut out = Vec::new();
    if with_labels {
        out.push(("phonemes", ids_tensor(&u.phonemes)));
        if let Some(a) = &u.accents {
            out.push(("accents", ids_tensor(a)));
        }
    }
    if let Some(d) = &u.durations {
        out.push(("durations", ids_tensor(d)));
    }
    if let Some(m) = &u.mel {
        out.push(("mel", m.clone()));
    }
    if let Some(m) = &u.mgc {
        out.push(("mgc", m.clone()));
    }
    if let Some(f) = &u.logf0 {
        out.push(("logf0", Tensor::vector(f.clone())));
    }
    if let Some(v) = &u.voiced {
        out.push(("voiced", Tensor::vector(v.iter().map(|&b| f64::from(u8::from(b))).collect())));
    }
    out
}

fn apply_record(u: &mut Utterance, name: &str, t: Tensor) -> Result<()> {
    match name {
        "phonemes" => u.phonemes = tensor_ids(&t, name)?,
        "accents" => u.accents = Some(tensor_ids(&t, name)?),
        "durations" => u.durations = Some(tensor_ids(&t, name)?),
        "mel" => u.mel = Some(t),
        "mgc" => u.mgc = Some(t),
        "logf0" => u.logf0 = Some(t.into_data()),
        "voiced" => u.voiced = Some(t.data().iter().map(|&x| x != 0.0).collect()),
        other => return Err(Error::Format { what: "corpus", detail: format!("unknown record {other:?}") }),
    }
    Ok(())
}

pub fn write_corpus(w: &mut impl Write, utts: &[Utterance]) -> Result<()> {
    w.write_all(CORPUS_MAGIC)?;
    write_u32(w, CORPUS_VERSION)?;
    write_u32(w, utts.len() as u32)?;
    for u in utts {
        write_str(w, &u.id)?;
        write_u64(w, u.mel_shift_ms.to_bits())?;
        write_u64(w, u.vocoder_shift_ms.to_bits())?;
        let recs = stream_records(u, true);
        write_u32(w, recs.len() as u32)?;
        for (name, t) in &recs {
            write_record(w, name, t)?;
        }
    }
    Ok(())
}

pub fn read_corpus(r: &mut impl Read) -> Result<Vec<Utterance>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CORPUS_MAGIC {
        return Err(Error::Format { what: "corpus", detail: "bad magic".into() });
    }
    let version = read_u32(r)?;
    if version != CORPUS_VERSION {
        return Err(Error::Format { what: "corpus", detail: format!("unsupported version {version}") });
    }
    let n = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = Utterance {
            id: read_str(r)?,
            phonemes: Vec::new(),
            accents: None,
            durations: None,
            mel: None,
            mgc: None,
            logf0: None,
            voiced: None,
            mel_shift_ms: f64::from_bits(read_u64(r)?),
            vocoder_shift_ms: f64::from_bits(read_u64(r)?),
        };
        let k = read_u32(r)?;
        for _ in 0..k {
            let (name, t) = read_record(r)?;
            apply_record(&mut u, &name, t)?;
        }
        u.validate()?;
        out.push(u);
    }
    Ok(out)
}

impl Utterance {
    pub fn save_corpus(path: &Path, utts: &[Utterance]) -> Result<()> {
        let mut f = BufWriter::new(std::fs::File::create(path)?);
        write_corpus(&mut f, utts)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_corpus(path: &Path) -> Result<Vec<Utterance>> {
        read_corpus(&mut BufReader::new(std::fs::File::open(path)?))
    }
}

/// Writes the acoustic streams (and durations) of `u`.
pub fn write_feature_file(w: &mut impl Write, u: &Utterance) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    let recs = stream_records(u, false);
    write_u32(w, recs.len() as u32)?;
    for (name, t) in &recs {
        write_record(w, name, t)?;
    }
    Ok(())
}

/// Reads a feature file into the acoustic fields of `u`.
pub fn read_feature_file(r: &mut impl Read, u: &mut Utterance) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format { what: "feature file", detail: "bad magic".into() });
    }
    let n = read_u32(r)?;
    for _ in 0..n {
        let (name, t) = read_record(r)?;
        if name == "phonemes" || name == "accents" {
            return Err(Error::Format {
                what: "feature file",
                detail: format!("labels belong in the .lab file, found {name}"),
            });
        }
        apply_record(u, &name, t)?;
    }
    Ok(())
}

/// Parses a label file: one phoneme per line as `symbol` or `symbol accent`.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_labels(text: &str, inv: &PhonemeInventory) -> Result<(Vec<usize>, Option<Vec<usize>>)> {
    let mut ph = Vec::new();
    let mut ac = Vec::new();
    let mut with_accents = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |d: String| Error::Format { what: "label file", detail: format!("line {}: {d}", lineno + 1) };
        let has = match fields.len() {
            1 => false,
            2 => true,
            _ => return Err(bad(format!("expected `symbol [accent]`, got {line:?}"))),
        };
        if *with_accents.get_or_insert(has) != has {
            return Err(bad("accent column present on some lines only".into()));
        }
        ph.push(inv.id(fields[0]).ok_or_else(|| bad(format!("unknown phoneme {:?}", fields[0])))?);
        if has {
            ac.push(fields[1].parse::<usize>().map_err(|e| bad(format!("accent {:?}: {e}", fields[1])))?);
        }
    }
    if ph.is_empty() {
        return Err(Error::Format { what: "label file", detail: "no phonemes".into() });
    }
    Ok((ph, with_accents.unwrap_or(false).then_some(ac)))
}

/// Loads every `<name>.lab` in `dir` together with its `<name>.feat`.
pub fn ingest_dir(
    dir: &Path,
    inv: &PhonemeInventory,
    mel_shift_ms: f64,
    vocoder_shift_ms: f64,
) -> Result<Vec<Utterance>> {
    let mut labs: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lab"))
        .collect();
    labs.sort();
    let mut out = Vec::with_capacity(labs.len());
    for lab in labs {
        let id = lab.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let (phonemes, accents) = parse_labels(&std::fs::read_to_string(&lab)?, inv)?;
        let mut u = Utterance {
            id,
            phonemes,
            accents,
            durations: None,
            mel: None,
            mgc: None,
            logf0: None,
            voiced: None,
            mel_shift_ms,
            vocoder_shift_ms,
        };
        let feat = lab.with_extension("feat");
        let mut f = BufReader::new(
            std::fs::File::open(&feat)
                .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", feat.display()))))?,
        );
        read_feature_file(&mut f, &mut u)?;
        u.validate()?;
        out.push(u);
    }
    Ok(out)
}
