//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "MSWP"
//! version u32      currently 1
//! role    u32 len + UTF-8   ("train", "embedder", ...)
//! step    u64
//! rng     u32 len + bytes   (48-byte generator state)
//! config  u32 len + UTF-8   (key = value snapshot)
//! count   u32
//! record* name: u32 len + UTF-8
//!         ndim: u32, dims: u64 each
//!         dtype: u8 (1 = f32, 2 = f64)
//!         data: u64 byte length + raw little-endian scalars
//! ```
//!
//! Serialization is canonical: saving a loaded checkpoint reproduces the
//! file byte for byte.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::rng::RNG_STATE_LEN;
use crate::tensor::{DType, Element};
use std::io::Write;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"MSWP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub role: String,
    pub step: u64,
    pub rng_state: [u8; RNG_STATE_LEN],
    pub config_text: String,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(role: &str, step: u64, rng_state: [u8; RNG_STATE_LEN], config_text: String) -> Self {
        Checkpoint {
            version: VERSION,
            role: role.to_string(),
            step,
            rng_state,
            config_text,
            tensors: Vec::new(),
        }
    }

    /// Appends every parameter of a set under `prefix.`.
    pub fn push_params<E: Element>(&mut self, prefix: &str, params: &ParamSet<E>) {
        for (name, shape, data) in params.export() {
            let mut bytes = Vec::with_capacity(data.len() * 8);
            E::write_le(&data, &mut bytes);
            self.tensors.push(TensorRecord {
                name: format!("{prefix}.{name}"),
                shape,
                dtype: E::DTYPE,
                data: bytes,
            });
        }
    }

    /// Appends raw vectors (optimizer moments) under `prefix.`.
    pub fn push_vectors<E: Element>(&mut self, prefix: &str, names: &[String], vecs: &[Vec<E>]) {
        for (name, v) in names.iter().zip(vecs) {
            let mut bytes = Vec::with_capacity(v.len() * 8);
            E::write_le(v, &mut bytes);
            self.tensors.push(TensorRecord {
                name: format!("{prefix}.{name}"),
                shape: vec![v.len()],
                dtype: E::DTYPE,
                data: bytes,
            });
        }
    }

    pub fn find(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|r| r.name == name)
    }

    /// Extracts the records under `prefix.` into a ParamSet-compatible
    /// snapshot, in file order.
    pub fn take_params<E: Element>(
        &self,
        prefix: &str,
    ) -> Result<crate::nn::ParamSnapshot<E>> {
        let want = format!("{prefix}.");
        let mut out = Vec::new();
        for rec in self.tensors.iter().filter(|r| r.name.starts_with(&want)) {
            if rec.dtype != E::DTYPE {
                return Err(Error::Checkpoint {
                    what: format!(
                        "record `{}` is {}, run precision is {}",
                        rec.name,
                        rec.dtype,
                        E::DTYPE
                    ),
                });
            }
            out.push((
                rec.name[want.len()..].to_string(),
                rec.shape.clone(),
                E::read_le(&rec.data)?,
            ));
        }
        if out.is_empty() {
            return Err(Error::Checkpoint {
                what: format!("no records under `{prefix}.`"),
            });
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        write_str(&mut out, &self.role);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.rng_state.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.rng_state);
        write_str(&mut out, &self.config_text);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for rec in &self.tensors {
            write_str(&mut out, &rec.name);
            out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
            for d in &rec.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.push(rec.dtype.tag());
            out.extend_from_slice(&(rec.data.len() as u64).to_le_bytes());
            out.extend_from_slice(&rec.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint {
                what: "bad magic bytes".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint {
                what: format!("unsupported version {version}"),
            });
        }
        let role = r.string()?;
        let step = r.u64()?;
        let rng_len = r.u32()? as usize;
        if rng_len != RNG_STATE_LEN {
            return Err(Error::Checkpoint {
                what: format!("rng state length {rng_len}, expected {RNG_STATE_LEN}"),
            });
        }
        let mut rng_state = [0u8; RNG_STATE_LEN];
        rng_state.copy_from_slice(r.take(RNG_STATE_LEN)?);
        let config_text = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let dtype = DType::from_tag(r.u8()?)?;
            let len = r.u64()? as usize;
            let data = r.take(len)?.to_vec();
            let expect = shape.iter().product::<usize>()
                * match dtype {
                    DType::F32 => 4,
                    DType::F64 => 8,
                };
            if expect != data.len() {
                return Err(Error::Checkpoint {
                    what: format!(
                        "record `{name}`: {} bytes, shape wants {expect}",
                        data.len()
                    ),
                });
            }
            tensors.push(TensorRecord {
                name,
                shape,
                dtype,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint {
                what: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint {
            version,
            role,
            step,
            rng_state,
            config_text,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                what: "truncated file".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint {
            what: "invalid UTF-8 string".into(),
        })
    }
}
