//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SOHO" | version u32 | tensor count u32 | tensors
//! optimizer: adam step u64 | sgd step u64 | tensor count u32 | tensors
//! rng: seed u64 | next epoch u64 | global step u64
//! config: byte length u32 | UTF-8 text
//! vocabulary: byte length u32 | UTF-8 text, one token per line
//! ```
//!
//! A tensor is `name length u32 | UTF-8 name | rank u32 | dims u32… |
//! dtype u8 | payload`, where dtype 1 is f64 and 2 is u64.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SOHO";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 1;
const DTYPE_U64: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Tensor),
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub payload: Payload,
}

impl NamedTensor {
    pub fn f64(name: impl Into<String>, t: Tensor) -> Self {
        NamedTensor {
            name: name.into(),
            payload: Payload::F64(t),
        }
    }

    pub fn u64(name: impl Into<String>, data: Vec<u64>) -> Self {
        NamedTensor {
            name: name.into(),
            payload: Payload::U64 {
                shape: vec![data.len()],
                data,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub adam_step: u64,
    pub sgd_step: u64,
    pub optimizer: Vec<NamedTensor>,
    pub seed: u64,
    pub next_epoch: u64,
    pub global_step: u64,
    pub config: String,
    pub vocab: String,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().chain(&self.optimizer).find_map(|t| match &t.payload {
            Payload::F64(x) if t.name == name => Some(x),
            _ => None,
        })
    }

    pub fn counts(&self, name: &str) -> Option<&[u64]> {
        self.tensors.iter().find_map(|t| match &t.payload {
            Payload::U64 { data, .. } if t.name == name => Some(&data[..]),
            _ => None,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        write_tensors(&mut out, &self.tensors);
        put_u64(&mut out, self.adam_step);
        put_u64(&mut out, self.sgd_step);
        write_tensors(&mut out, &self.optimizer);
        put_u64(&mut out, self.seed);
        put_u64(&mut out, self.next_epoch);
        put_u64(&mut out, self.global_step);
        put_str(&mut out, &self.config);
        put_str(&mut out, &self.vocab);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, 0, "bad magic, not a checkpoint"));
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err_at(at, format!("unsupported version {version}")));
        }
        let tensors = r.tensors()?;
        let adam_step = r.u64()?;
        let sgd_step = r.u64()?;
        let optimizer = r.tensors()?;
        let seed = r.u64()?;
        let next_epoch = r.u64()?;
        let global_step = r.u64()?;
        let config = r.string()?;
        let vocab = r.string()?;
        if r.pos != bytes.len() {
            return Err(r.err_at(r.pos, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            tensors,
            adam_step,
            sgd_step,
            optimizer,
            seed,
            next_epoch,
            global_step,
            config,
            vocab,
        })
    }

    /// Writes atomically through a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn write_tensors(out: &mut Vec<u8>, tensors: &[NamedTensor]) {
    put_u32(out, tensors.len() as u32);
    for t in tensors {
        put_str(out, &t.name);
        let shape = match &t.payload {
            Payload::F64(x) => x.shape().to_vec(),
            Payload::U64 { shape, .. } => shape.clone(),
        };
        put_u32(out, shape.len() as u32);
        for d in shape {
            put_u32(out, d as u32);
        }
        match &t.payload {
            Payload::F64(x) => {
                out.push(DTYPE_F64);
                for v in x.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::U64 { data, .. } => {
                out.push(DTYPE_U64);
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl Reader<'_> {
    fn err_at(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::format(&self.path, offset as u64, msg)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err_at(self.pos, format!("truncated: needed {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(n)?.to_vec();
        String::from_utf8(raw).map_err(|e| self.err_at(at + e.utf8_error().valid_up_to(), "invalid UTF-8"))
    }

    fn tensors(&mut self) -> Result<Vec<NamedTensor>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = self.string()?;
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| self.err_at(self.pos, "tensor size overflows"))?;
            let at = self.pos;
            let dtype = self.u8()?;
            let payload = match dtype {
                DTYPE_F64 => {
                    let raw = self.take(count.checked_mul(8).ok_or_else(|| self.err_at(at, "tensor too large"))?)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Payload::F64(Tensor::new(&shape, data).map_err(|e| self.err_at(at, e.to_string()))?)
                }
                DTYPE_U64 => {
                    let raw = self.take(count.checked_mul(8).ok_or_else(|| self.err_at(at, "tensor too large"))?)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Payload::U64 { shape, data }
                }
                other => return Err(self.err_at(at, format!("unknown dtype code {other}"))),
            };
            out.push(NamedTensor { name, payload });
        }
        Ok(out)
    }
}
