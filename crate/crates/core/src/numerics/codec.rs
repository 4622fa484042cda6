//! Length-prefixed binary records shared by checkpoints and corpus files.
//!
//! Layout of one tensor record: `u32` name length, UTF-8 name, `u32` rank,
//! `rank` × `u32` dimensions, then the values as little-endian `f64`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::layers::ParamStore;
use crate::numerics::optim::AdamState;
use crate::numerics::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ATNM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format { what: "record name", detail: e.to_string() })
}

pub fn write_record(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    write_str(w, name)?;
    write_u32(w, t.shape().len() as u32)?;
    for d in t.shape() {
        write_u32(w, *d as u32)?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_record(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name = read_str(r)?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format { what: "record", detail: format!("rank {rank} for {name}") });
    }
    let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((name, Tensor::new(shape, data)?))
}

/// Serialized training state: parameters, optimizer moments and step.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form UTF-8 metadata (the model configuration text).
    pub meta: String,
    pub step: u64,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    /// `magic | u32 version | str meta | u64 step | u32 count | records`.
    /// Adam moments follow the parameters as `adam.m/<name>` and `adam.v/<name>`,
    /// with `adam.state = [step, beta1, beta2, epsilon]`.
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(w, CHECKPOINT_VERSION)?;
        write_str(w, &self.meta)?;
        write_u64(w, self.step)?;
        let extra = self.adam.as_ref().map_or(0, |_| 2 * self.params.len() + 1);
        write_u32(w, (self.params.len() + extra) as u32)?;
        for (_, name, t) in self.params.iter() {
            write_record(w, name, t)?;
        }
        if let Some(a) = &self.adam {
            for (i, (_, name, _)) in self.params.iter().enumerate() {
                write_record(w, &format!("adam.m/{name}"), &a.m[i])?;
                write_record(w, &format!("adam.v/{name}"), &a.v[i])?;
            }
            let st = Tensor::vector(vec![a.step as f64, a.beta1, a.beta2, a.epsilon]);
            write_record(w, "adam.state", &st)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format { what: "checkpoint", detail: "bad magic".into() });
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format { what: "checkpoint", detail: format!("unsupported version {version}") });
        }
        let meta = read_str(r)?;
        let step = read_u64(r)?;
        let count = read_u32(r)? as usize;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut state = None;
        for _ in 0..count {
            let (name, t) = read_record(r)?;
            if let Some(n) = name.strip_prefix("adam.m/") {
                m.push((n.to_string(), t));
            } else if let Some(n) = name.strip_prefix("adam.v/") {
                v.push((n.to_string(), t));
            } else if name == "adam.state" {
                state = Some(t);
            } else {
                params.insert(&name, t);
            }
        }
        let adam = match state {
            None => None,
            Some(st) => {
                if m.len() != params.len() || v.len() != params.len() || st.len() != 4 {
                    return Err(Error::Format { what: "checkpoint", detail: "incomplete optimizer state".into() });
                }
                let order = |xs: Vec<(String, Tensor)>| -> Result<Vec<Tensor>> {
                    let mut out = vec![None; params.len()];
                    for (n, t) in xs {
                        let id = params.id(&n).ok_or_else(|| Error::Format {
                            what: "checkpoint",
                            detail: format!("moment for unknown parameter {n}"),
                        })?;
                        out[id.index()] = Some(t);
                    }
                    Ok(out.into_iter().map(Option::unwrap).collect())
                };
                let s = st.data();
                Some(AdamState {
                    m: order(m)?,
                    v: order(v)?,
                    step: s[0] as u64,
                    beta1: s[1],
                    beta2: s[2],
                    epsilon: s[3],
                })
            }
        };
        Ok(Self { meta, step, params, adam })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        buf
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut f)
    }
}
