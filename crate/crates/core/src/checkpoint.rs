//! Binary checkpoint format.
//!
//! ```text
//! "RCDG"            4 bytes
//! version           u16 LE
//! manifest length   u32 LE
//! manifest          UTF-8 lines: variant=…, hyper.<k>=…, meta.<k>=…,
//!                   tensor=<name> <d0>x<d1>…   (one per tensor, in order)
//! payload           f64 LE, tensors concatenated in manifest order
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Hyper, ModelParams, Variant};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RCDG";
pub const VERSION: u16 = 1;

/// Parameters plus free-form string metadata (e.g. the best validation MSE).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub params: ModelParams<S>,
    pub meta: Vec<(String, String)>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = format!("variant={}\n", self.params.variant);
        for (k, v) in self.params.hyper.to_kv() {
            manifest.push_str(&format!("hyper.{k}={v}\n"));
        }
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta.{k}={v}\n"));
        }
        let flat = self.params.flat();
        for (name, t) in &flat {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor={name} {}\n", dims.join("x")));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for (_, t) in &flat {
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 10 {
            return Err(bad("file truncated before header end"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let manifest = bytes.get(10..10 + len).ok_or_else(|| bad("file truncated inside manifest"))?;
        let manifest = std::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;
        let mut variant = None;
        let mut hyper = Vec::new();
        let mut meta = Vec::new();
        let mut tensors = Vec::new();
        for line in manifest.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("manifest line {line:?}")))?;
            if k == "variant" {
                variant = Some(Variant::parse(v).ok_or_else(|| Error::Checkpoint(format!("unknown variant {v}")))?);
            } else if let Some(h) = k.strip_prefix("hyper.") {
                hyper.push((h.to_string(), v.to_string()));
            } else if let Some(m) = k.strip_prefix("meta.") {
                meta.push((m.to_string(), v.to_string()));
            } else if k == "tensor" {
                let (name, dims) = v
                    .split_once(' ')
                    .ok_or_else(|| Error::Checkpoint(format!("tensor line {v:?}")))?;
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Checkpoint(format!("tensor shape {dims:?}")))?;
                tensors.push((name.to_string(), shape));
            } else {
                return Err(Error::Checkpoint(format!("unknown manifest key {k}")));
            }
        }
        let variant = variant.ok_or_else(|| bad("manifest has no variant"))?;
        let hyper = Hyper::from_kv(&hyper)?;
        let mut params = ModelParams::<S>::init(variant, hyper, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let expected = params.flat();
        if expected.len() != tensors.len() {
            return Err(bad("tensor list does not match the model layout"));
        }
        for ((en, et), (n, shape)) in expected.iter().zip(&tensors) {
            if en != n || et.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("tensor {n} {shape:?} where {en} {:?} expected", et.shape())));
            }
        }
        let mut at = 10 + len;
        let total: usize = tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if bytes.len() < at + 8 * total {
            return Err(bad("file truncated inside tensor payload"));
        }
        if bytes.len() > at + 8 * total {
            return Err(bad("trailing bytes after tensor payload"));
        }
        params.for_each_mut(|_, t: &mut Tensor<S>| {
            for v in t.data_mut() {
                *v = S::lit(f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")));
                at += 8;
            }
        });
        Ok(Self { params, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
