use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Row-sum tolerance for a valid alignment.
pub const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SourceKind {
    LstmMemory,
    SelfAttendedMemory,
    DecoderSelf,
    /// Encoder self-attention; rows are source positions.
    EncoderSelf,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::LstmMemory => "lstm_memory",
            SourceKind::SelfAttendedMemory => "self_attended_memory",
            SourceKind::DecoderSelf => "decoder_self",
            SourceKind::EncoderSelf => "encoder_self",
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm_memory" => Ok(SourceKind::LstmMemory),
            "self_attended_memory" => Ok(SourceKind::SelfAttendedMemory),
            "decoder_self" => Ok(SourceKind::DecoderSelf),
            "encoder_self" => Ok(SourceKind::EncoderSelf),
            _ => Err(Error::Format { what: "alignment", detail: format!("unknown source kind {s:?}") }),
        }
    }
}

/// Attention weights of one utterance from one source, one
/// `[steps, source_length]` matrix per head.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix {
    pub source_kind: SourceKind,
    pub weights: Vec<Tensor>,
}

impl AlignmentMatrix {
    /// Builds and validates row sums, nonnegativity and (for decoder
    /// self-attention) causality.
    pub fn new(source_kind: SourceKind, weights: Vec<Tensor>) -> Result<Self> {
        let m = Self { source_kind, weights };
        m.validate()?;
        Ok(m)
    }

    pub fn heads(&self) -> usize {
        self.weights.len()
    }

    pub fn steps(&self) -> usize {
        self.weights.first().map_or(0, |w| w.rows())
    }

    pub fn source_length(&self) -> usize {
        self.weights.first().map_or(0, |w| w.cols())
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Shape("alignment without heads".into()));
        }
        let (t, n) = (self.steps(), self.source_length());
        for (h, w) in self.weights.iter().enumerate() {
            if w.shape() != [t, n] {
                return Err(Error::Shape(format!("head {h} has shape {:?}, expected [{t}, {n}]", w.shape())));
            }
            for i in 0..t {
                let row = w.row(i);
                if row.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::InvalidArgument(format!("negative or NaN weight in head {h} step {i}")));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidArgument(format!("head {h} step {i} sums to {s}")));
                }
                if self.source_kind == SourceKind::DecoderSelf && row.iter().skip(i + 1).any(|v| *v != 0.0) {
                    return Err(Error::InvalidArgument(format!("head {h} step {i} attends to future frames")));
                }
            }
        }
        Ok(())
    }

    /// Head-averaged `[steps, source_length]` weights.
    pub fn mean_heads(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.steps(), self.source_length()]);
        let k = 1.0 / self.heads() as f64;
        for w in &self.weights {
            out.data_mut().iter_mut().zip(w.data()).for_each(|(o, v)| *o += k * v);
        }
        out
    }

    /// First line `source_kind,heads,steps,source_length`, then one CSV row of
    /// weights per head and step, head-major.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{},{},{},{}", self.source_kind, self.heads(), self.steps(), self.source_length())?;
        for m in &self.weights {
            for i in 0..m.rows() {
                let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let bad = |d: String| Error::Format { what: "alignment", detail: d };
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))??;
        let f: Vec<&str> = header.trim().split(',').collect();
        if f.len() != 4 {
            return Err(bad(format!("header {header:?}")));
        }
        let kind: SourceKind = f[0].parse()?;
        let dims: Vec<usize> = f[1..]
            .iter()
            .map(|s| s.parse::<usize>().map_err(|e| bad(format!("header field {s:?}: {e}"))))
            .collect::<Result<_>>()?;
        let (heads, steps, n) = (dims[0], dims[1], dims[2]);
        let mut weights = Vec::with_capacity(heads);
        for _ in 0..heads {
            let mut data = Vec::with_capacity(steps * n);
            for _ in 0..steps {
                let line = lines.next().ok_or_else(|| bad("truncated".into()))??;
                let row: Vec<f64> = line
                    .trim()
                    .split(',')
                    .map(|s| s.parse::<f64>().map_err(|e| bad(format!("value {s:?}: {e}"))))
                    .collect::<Result<_>>()?;
                if row.len() != n {
                    return Err(bad(format!("row of {} values, expected {n}", row.len())));
                }
                data.extend(row);
            }
            weights.push(Tensor::matrix(steps, n, data)?);
        }
        Self::new(kind, weights)
    }
}
