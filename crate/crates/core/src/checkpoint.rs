//! Binary checkpoint container.
//!
//! Layout (all integers little-endian u64):
//!
//! ```text
//! "PANCKPT1"
//! metadata length, metadata bytes (canonical JSON text)
//! repeated until end of file:
//!     name length, name bytes (UTF-8)
//!     rank, dims[rank]
//!     data as f64, product(dims) values
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{format_err, PanError, Result};
use crate::nn::{Architecture, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PANCKPT1";
const MAX_RANK: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    metadata: String,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new<M: Serialize>(metadata: &M) -> Result<Self> {
        let metadata = serde_json::to_string(metadata).map_err(|e| PanError::Config(format!("metadata: {e}")))?;
        Ok(Self { metadata, tensors: Vec::new() })
    }

    pub fn metadata_json(&self) -> &str {
        &self.metadata
    }

    pub fn metadata<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_str(&self.metadata).map_err(|e| format_err(format!("checkpoint metadata: {e}")))
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let mut tensor = tensor;
        tensor.clear_grad();
        self.tensors.push((name.into(), tensor));
    }

    pub fn extend(&mut self, tensors: impl IntoIterator<Item = (String, Tensor)>) {
        for (n, t) in tensors {
            self.push(n, t);
        }
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| format_err(format!("checkpoint is missing tensor '{name}'")))
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|rest| (rest.to_string(), t.clone())))
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u64(&mut out, self.metadata.len() as u64);
        out.extend_from_slice(self.metadata.as_bytes());
        for (name, t) in &self.tensors {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, t.rank() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(format_err("not a PANCKPT1 checkpoint (bad magic)"));
        }
        let meta_len = r.len_u64("metadata length")?;
        let meta = r.take(meta_len)?;
        let metadata = std::str::from_utf8(meta).map_err(|_| format_err("checkpoint metadata is not UTF-8"))?.to_string();
        serde_json::from_str::<serde_json::Value>(&metadata).map_err(|e| format_err(format!("checkpoint metadata: {e}")))?;

        let mut tensors = Vec::new();
        while !r.done() {
            let idx = tensors.len();
            let name_len = r.len_u64("tensor name length")?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| format_err(format!("tensor {idx}: name is not UTF-8")))?
                .to_string();
            let rank = r.u64()?;
            if rank == 0 || rank > MAX_RANK {
                return Err(format_err(format!("tensor '{name}': unsupported rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                let d = r.u64()?;
                shape.push(usize::try_from(d).map_err(|_| format_err(format!("tensor '{name}': dimension {d} too large")))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| format_err(format!("tensor '{name}': data for shape {shape:?} exceeds the file")))?;
            let raw = r.take(numel * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| format_err(format!("tensor '{name}': {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct ModelMeta {
    kind: String,
    architecture: Architecture,
}

/// A downstream model with its training-time BN statistics.
pub fn model_checkpoint(model: &Model) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new(&ModelMeta { kind: "model".into(), architecture: model.arch().clone() })?;
    ckpt.extend(model.named_tensors());
    Ok(ckpt)
}

pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    let meta: ModelMeta = ckpt.metadata()?;
    if meta.kind != "model" {
        return Err(format_err(format!("expected a model checkpoint, found '{}'", meta.kind)));
    }
    Model::from_named_tensors(meta.architecture, ckpt.tensors()).map_err(|e| match e {
        PanError::Io(e) => PanError::Io(e),
        other => format_err(format!("model checkpoint: {other}")),
    })
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(format_err(format!(
                "checkpoint truncated at byte {}: need {n} more bytes, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.remaining())
            .ok_or_else(|| format_err(format!("{what} {v} exceeds the remaining {} bytes", self.remaining())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(&serde_json::json!({"kind": "test", "k": 3})).unwrap();
        c.push("a", Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        c.push("b.c", Tensor::new(vec![1], vec![std::f64::consts::PI]).unwrap());
        c
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        for ((_, a), (_, b)) in c.tensors().iter().zip(back.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn layout_is_as_documented() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..8], b"PANCKPT1");
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + meta_len], br#"{"k":3,"kind":"test"}"#);
        let p = 16 + meta_len;
        assert_eq!(u64::from_le_bytes(bytes[p..p + 8].try_into().unwrap()), 1);
        assert_eq!(bytes[p + 8], b'a');
    }

    #[test]
    fn truncation_is_an_error() {
        let bytes = sample().encode();
        for cut in [0, 7, 12, 30, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(PanError::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut bytes = Checkpoint::new(&serde_json::json!({})).unwrap().encode();
        put_u64(&mut bytes, 1);
        bytes.push(b'x');
        put_u64(&mut bytes, 2);
        put_u64(&mut bytes, u64::MAX / 2);
        put_u64(&mut bytes, 4);
        assert!(Checkpoint::decode(&bytes).is_err());
    }

    #[test]
    fn missing_tensor() {
        assert!(sample().get("zzz").is_err());
    }
}
