//! Versioned little-endian checkpoint container.
//!
//! ```text
//! "SAILCKPT"            8 bytes
//! version               u32
//! config_len            u32, then config_len bytes of JSON (ModelConfig)
//! seed                  u64
//! step                  u64
//! flags                 u32  (bit 0: optimizer moments present)
//! optimizer_step        u64
//! tensor_count          u32
//! tensor_count entries:
//!   name_len u32, name bytes (UTF-8)
//!   dtype u8 (0 = f32, 1 = f64)
//!   rank u32, rank x u64 dims
//!   offset u64, byte_len u64    (relative to the start of the data section)
//! data section          raw little-endian elements
//! ```
//!
//! Parameters come first in canonical order, followed by `adam.m.<name>` and
//! `adam.v.<name>` when optimizer moments are stored.

use std::path::Path;

use super::{param_specs, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"SAILCKPT";
pub const VERSION: u32 = 1;

const FLAG_OPTIMIZER: u32 = 1;

/// First and second Adam moments, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub seed: u64,
    pub step: u64,
}

struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

impl<T: Scalar> Checkpoint<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let specs = param_specs(&self.config);
        let mut out: Vec<(String, &Tensor<T>)> = specs
            .iter()
            .zip(&self.params.tensors)
            .map(|(s, t)| (s.name.clone(), t))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (s, t) in specs.iter().zip(&opt.m) {
                out.push((format!("adam.m.{}", s.name), t));
            }
            for (s, t) in specs.iter().zip(&opt.v) {
                out.push((format!("adam.v.{}", s.name), t));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::CheckpointFormat(format!("config encoding: {e}")))?;
        let tensors = self.named_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let (flags, opt_step) = match &self.optimizer {
            Some(o) => (FLAG_OPTIMIZER, o.step),
            None => (0, 0),
        };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&opt_step.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let width = T::DTYPE.size() as u64;
        let mut offset = 0u64;
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.code());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let len = t.len() as u64 * width;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
            offset += len;
        }
        for (_, t) in &tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Decode a checkpoint. With `expected`, every tensor is checked against
    /// that config's architecture instead of the stored one.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::CheckpointMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let config_len = r.u32("config length")? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(config_len, "config")?)
            .map_err(|e| Error::CheckpointFormat(format!("config: {e}")))?;
        let seed = r.u64("seed")?;
        let step = r.u64("step")?;
        let flags = r.u32("flags")?;
        let opt_step = r.u64("optimizer step")?;
        let count = r.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::CheckpointFormat("tensor name is not UTF-8".into()))?
                .to_string();
            let code = r.take(1, "dtype")?[0];
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::CheckpointFormat(format!("unknown dtype code {code}")))?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let offset = r.u64("offset")?;
            let byte_len = r.u64("byte length")?;
            entries.push(Entry {
                name,
                dtype,
                shape,
                offset,
                byte_len,
            });
        }
        let data = &bytes[r.pos..];
        let mut end = 0u64;
        for e in &entries {
            let n: usize = e.shape.iter().product();
            if e.byte_len != (n * e.dtype.size()) as u64 {
                return Err(Error::CheckpointFormat(format!(
                    "tensor {} byte length disagrees with its shape",
                    e.name
                )));
            }
            end = end.max(e.offset + e.byte_len);
        }
        if (data.len() as u64) < end {
            return Err(Error::CheckpointTruncated(format!(
                "data section has {} bytes, table needs {end}",
                data.len()
            )));
        }
        if (data.len() as u64) > end {
            return Err(Error::CheckpointFormat("trailing bytes after data section".into()));
        }

        let arch = expected.unwrap_or(&config);
        arch.validate()?;
        let specs = param_specs(arch);
        let has_opt = flags & FLAG_OPTIMIZER != 0;
        let mut wanted: Vec<(String, Vec<usize>)> =
            specs.iter().map(|s| (s.name.clone(), s.shape.clone())).collect();
        if has_opt {
            for prefix in ["adam.m.", "adam.v."] {
                wanted.extend(specs.iter().map(|s| (format!("{prefix}{}", s.name), s.shape.clone())));
            }
        }
        let mut tensors = Vec::with_capacity(wanted.len());
        for (k, (name, shape)) in wanted.iter().enumerate() {
            let e = match entries.get(k) {
                Some(e) if &e.name == name => e,
                _ => match entries.iter().find(|e| &e.name == name) {
                    Some(e) => e,
                    None => {
                        return Err(Error::CheckpointFormat(format!("missing tensor {name}")));
                    }
                },
            };
            if &e.shape != shape {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: e.shape.clone(),
                });
            }
            let raw = &data[e.offset as usize..(e.offset + e.byte_len) as usize];
            let w = e.dtype.size();
            let values = raw
                .chunks_exact(w)
                .map(|c| match e.dtype {
                    DType::F32 if T::DTYPE == DType::F32 => T::read_le(c),
                    DType::F64 if T::DTYPE == DType::F64 => T::read_le(c),
                    DType::F32 => T::of(f32::read_le(c) as f64),
                    DType::F64 => T::of(f64::read_le(c)),
                })
                .collect();
            tensors.push(Tensor::new(shape.clone(), values)?);
        }
        if entries.len() != wanted.len() {
            return Err(Error::CheckpointFormat(format!(
                "{} tensors stored, {} expected",
                entries.len(),
                wanted.len()
            )));
        }
        let n = specs.len();
        let optimizer = if has_opt {
            let v = tensors.split_off(2 * n);
            let m = tensors.split_off(n);
            Some(OptimizerState {
                step: opt_step,
                m,
                v,
            })
        } else {
            None
        };
        Ok(Self {
            config: arch.clone(),
            params: Params { tensors },
            optimizer,
            seed,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, expected)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CheckpointTruncated(format!("while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt() -> Checkpoint<f32> {
        let mut cfg = ModelConfig::tiny();
        cfg.n_layers = 1;
        let params = Params::init(&cfg, 4).unwrap();
        Checkpoint {
            config: cfg,
            params,
            optimizer: None,
            seed: 4,
            step: 10,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = ckpt();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes, None).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruptions_have_distinct_errors() {
        let bytes = ckpt().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(cut, None),
            Err(Error::CheckpointTruncated(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad, None), Err(Error::CheckpointMagic)));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bad, None),
            Err(Error::CheckpointVersion { found: 9, .. })
        ));
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes[..5], None),
            Err(Error::CheckpointTruncated(_))
        ));
    }

    #[test]
    fn mismatched_preset_names_first_tensor() {
        let bytes = ckpt().to_bytes().unwrap();
        let mut small = ModelConfig::small();
        small.n_layers = 1;
        match Checkpoint::<f32>::from_bytes(&bytes, Some(&small)) {
            Err(Error::CheckpointShape { name, .. }) => assert_eq!(name, "tok_emb"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
