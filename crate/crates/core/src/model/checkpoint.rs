//! Binary checkpoint container.
//!
//! ```text
//! magic[8] | version u32 | config (u64 len + text) | vocab (u64 len + text, 0 = none)
//! count u32 | count × (name u32 len + bytes, tag u8, ndim u32, dims u64…, offset u64)
//! n_values u64 | n_values × f32
//! ```
//! All integers and floats are little-endian.

use std::io::{self, Read};
use std::path::{Path, PathBuf};

use super::{component_of, Component, Model, ModelConfig, ModelError};
use crate::numcore::{ParamStore, Tensor};
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 8] = b"BLKLMCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Option<Vocabulary>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

pub fn checkpoint_bytes(model: &Model, vocab: Option<&Vocabulary>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.params().numel() * 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_text(&mut out, &model.config().to_text());
    put_text(&mut out, &vocab.map(Vocabulary::to_file_string).unwrap_or_default());
    put_u32(&mut out, model.params().len() as u32);
    let mut offset = 0u64;
    for (_, name, t) in model.params().iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(component_of(name).expect("layout names carry a component").tag());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        put_u64(&mut out, offset);
        offset += t.numel() as u64;
    }
    put_u64(&mut out, offset);
    for (_, _, t) in model.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes through a temporary sibling file so a failed save never leaves a
/// half-written checkpoint at `path`.
pub fn save_checkpoint(model: &Model, vocab: Option<&Vocabulary>, path: &Path) -> Result<(), ModelError> {
    let io_err = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, checkpoint_bytes(model, vocab)).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_checkpoint(&bytes).map_err(|e| match e {
        ModelError::Io { source, .. } => ModelError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

struct Reader<'b>(&'b [u8]);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> io::Result<&[u8]> {
        if self.0.len() < n {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "checkpoint is truncated"));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> io::Result<[u8; N]> {
        let mut a = [0u8; N];
        self.0.read_exact(&mut a).map_err(|_| {
            io::Error::new(io::ErrorKind::UnexpectedEof, "checkpoint is truncated")
        })?;
        Ok(a)
    }

    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> io::Result<usize> {
        let n = self.u64()?;
        if n > self.0.len() as u64 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "checkpoint is truncated"));
        }
        Ok(n as usize)
    }

    fn text(&mut self, n: usize) -> io::Result<String> {
        String::from_utf8(self.bytes(n)?.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "text section is not UTF-8"))
    }
}

fn invalid(msg: impl Into<String>) -> ModelError {
    ModelError::Io {
        path: PathBuf::new(),
        source: io::Error::new(io::ErrorKind::InvalidData, msg.into()),
    }
}

/// Decodes a complete checkpoint. Nothing is returned unless every section
/// parses and the manifest matches the layout its config implies.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    let io = |source| ModelError::Io {
        path: PathBuf::new(),
        source,
    };
    let mut r = Reader(bytes);
    if r.bytes(MAGIC.len()).map_err(io)? != MAGIC {
        return Err(invalid("not a checkpoint file"));
    }
    let version = r.u32().map_err(io)?;
    if version != FORMAT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let n = r.len().map_err(io)?;
    let config = ModelConfig::from_text(&r.text(n).map_err(io)?)?;
    let n = r.len().map_err(io)?;
    let vocab = match r.text(n).map_err(io)? {
        t if t.is_empty() => None,
        t => Some(Vocabulary::from_file_string(&t).map_err(|e| invalid(e.to_string()))?),
    };

    let count = r.u32().map_err(io)? as usize;
    let mut manifest = Vec::with_capacity(count.min(4096));
    let mut expected_offset = 0u64;
    for _ in 0..count {
        let n = r.u32().map_err(io)? as usize;
        let name = r.text(n).map_err(io)?;
        let tag = r.array::<1>().map_err(io)?[0];
        let mismatch = |message: String| ModelError::ManifestMismatch {
            name: name.clone(),
            message,
        };
        let component = Component::from_tag(tag).ok_or_else(|| mismatch(format!("unknown component tag {tag}")))?;
        if component_of(&name) != Some(component) {
            return Err(mismatch(format!("tagged {component}, name implies another component")));
        }
        let ndim = r.u32().map_err(io)? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(mismatch(format!("{ndim} dimensions")));
        }
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()
            .map_err(io)?;
        let offset = r.u64().map_err(io)?;
        if offset != expected_offset {
            return Err(mismatch(format!("payload offset {offset}, expected {expected_offset}")));
        }
        let numel = shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        expected_offset = numel
            .and_then(|k| expected_offset.checked_add(k))
            .ok_or_else(|| mismatch(format!("shape {shape:?} overflows")))?;
        manifest.push((name, component, shape));
    }
    let total = r.u64().map_err(io)?;
    if total != expected_offset {
        return Err(invalid(format!("payload holds {total} values, manifest needs {expected_offset}")));
    }
    if (r.0.len() as u64) < total.saturating_mul(4) {
        return Err(io(io::Error::new(io::ErrorKind::UnexpectedEof, "checkpoint is truncated")));
    }

    let mut params = ParamStore::new();
    let mut components = Vec::new();
    for (name, component, shape) in manifest {
        let numel: usize = shape.iter().product();
        let raw = r.bytes(numel * 4).map_err(io)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| ModelError::ManifestMismatch {
            name: name.clone(),
            message: e.to_string(),
        })?;
        if params.id(&name).is_some() {
            return Err(ModelError::ManifestMismatch {
                name,
                message: "listed twice".into(),
            });
        }
        params.insert(name, tensor);
        components.push(component);
    }
    if !r.0.is_empty() {
        return Err(invalid(format!("{} trailing bytes", r.0.len())));
    }
    let model = Model::from_parts(config, params, &components)?;
    Ok(Checkpoint { model, vocab })
}
