//! Checkpoint file format.
//!
//! ```text
//! ADSGNN1\n
//! <name>\t<d0,d1,...>\n      one line per tensor, in payload order
//! \n
//! <little-endian f32 payloads, concatenated>
//! ```
//!
//! Metadata entries are zero-length tensors named `meta/<key>=<value>` with
//! dims `0`, so they occupy manifest lines but no payload bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;

pub const MAGIC: &[u8] = b"ADSGNN1\n";
const META_PREFIX: &str = "meta/";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self { meta: BTreeMap::new(), params }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Checkpoint(format!("missing metadata {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| Error::Checkpoint(format!("bad metadata {key}={raw:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        let check = |s: &str| {
            if s.contains(['\t', '\n']) || s.is_empty() {
                Err(Error::Checkpoint(format!("unencodable name {s:?}")))
            } else {
                Ok(())
            }
        };
        for (k, v) in &self.meta {
            let name = format!("{META_PREFIX}{k}={v}");
            check(&name)?;
            out.extend_from_slice(format!("{name}\t0\n").as_bytes());
        }
        for (name, t) in self.params.iter() {
            check(name)?;
            if name.starts_with(META_PREFIX) {
                return Err(Error::Checkpoint(format!("reserved name {name:?}")));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            out.extend_from_slice(format!("{name}\t{}\n", dims.join(",")).as_bytes());
        }
        out.push(b'\n');
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("missing magic"))?;
        let mut pos = 0;
        let mut manifest = Vec::new();
        loop {
            let nl = rest[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("unterminated manifest"))?;
            let line = std::str::from_utf8(&rest[pos..pos + nl]).map_err(|_| bad("manifest is not UTF-8"))?;
            pos += nl + 1;
            if line.is_empty() {
                break;
            }
            let (name, dims) = line.split_once('\t').ok_or_else(|| bad("manifest line without tab"))?;
            let shape =
                dims.split(',').map(|d| d.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|_| bad("bad dims"))?;
            manifest.push((name.to_string(), shape));
        }
        let mut payload = &rest[pos..];
        let mut ckpt = Checkpoint::default();
        for (name, shape) in manifest {
            if let Some(kv) = name.strip_prefix(META_PREFIX) {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad("metadata without '='"))?;
                if shape != [0] {
                    return Err(bad("metadata entries must have dims 0"));
                }
                ckpt.meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let n: usize = shape.iter().product();
            if payload.len() < 4 * n {
                return Err(bad("truncated payload"));
            }
            let data = payload[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            payload = &payload[4 * n..];
            ckpt.params.insert(name, Tensor::new(shape, data)?);
        }
        if !payload.is_empty() {
            return Err(bad("trailing payload bytes"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Parameters after a round trip through single precision.
    pub fn quantized(&self) -> Result<Self> {
        Self::from_bytes(&self.to_bytes()?)
    }
}
