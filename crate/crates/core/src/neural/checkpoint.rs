//! Binary checkpoint: magic, format version, a JSON header, then
//! little-endian `f64` tensors in declaration order (parameters, then the
//! optimizer's first and second moments when present).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ModelParams};
use super::optim::{AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::tensor::Mat;

const MAGIC: &[u8; 8] = b"PERMFILL";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    tensors: Vec<(String, usize, usize)>,
    optimizer: Option<OptimHeader>,
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<AdamW>,
    /// Free-form run information (vocabulary, oracle settings, progress).
    pub meta: serde_json::Value,
}

fn put_tensor(out: &mut Vec<u8>, t: &Mat) {
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn fill(&mut self, t: &mut Mat) -> Result<()> {
        let bytes = self.take(t.len() * 8)?;
        for (v, chunk) in t.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.params.named_tensors();
        let header = Header {
            model: self.params.config,
            tensors: named
                .iter()
                .map(|(n, t)| (n.clone(), t.rows, t.cols))
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimHeader {
                config: o.config,
                step: o.step,
            }),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &named {
            put_tensor(&mut out, t);
        }
        if let Some(o) = &self.optimizer {
            for t in o.m.iter().chain(&o.v) {
                put_tensor(&mut out, t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut params = ModelParams::new(header.model, 0)?;
        let shapes: Vec<(String, usize, usize)> = params
            .named_tensors()
            .iter()
            .map(|(n, t)| (n.clone(), t.rows, t.cols))
            .collect();
        if shapes != header.tensors {
            return Err(Error::Checkpoint(
                "tensor layout does not match the model configuration".into(),
            ));
        }
        for t in params.tensors_mut() {
            r.fill(t)?;
        }
        let optimizer = match header.optimizer {
            Some(h) => {
                let mut o = AdamW::new(h.config, &params);
                o.step = h.step;
                for t in o.m.iter_mut().chain(o.v.iter_mut()) {
                    r.fill(t)?;
                }
                Some(o)
            }
            None => None,
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            params,
            optimizer,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Human-readable dump of the configuration, metadata and every tensor.
    pub fn to_json(&self) -> serde_json::Value {
        let tensors: serde_json::Map<String, serde_json::Value> = self
            .params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| {
                (
                    n,
                    serde_json::json!({ "shape": [t.rows, t.cols], "data": t.data }),
                )
            })
            .collect();
        serde_json::json!({
            "format_version": VERSION,
            "model": self.params.config,
            "optimizer_step": self.optimizer.as_ref().map(|o| o.step),
            "meta": self.meta,
            "tensors": tensors,
        })
    }
}
