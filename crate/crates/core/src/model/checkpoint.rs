//! Binary checkpoint format: magic, version, JSON config, named tensors.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelError, Result, Seq2Seq};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"DKGM";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(ModelError::Checkpoint(format!("truncated while reading {what}")));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| ModelError::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

pub(crate) fn to_bytes(model: &Seq2Seq) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    put_u32(&mut out, model.params().len() as u32);
    for (name, p) in model.params().iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        put_u32(&mut out, shape.len() as u32);
        for &s in shape {
            put_u64(&mut out, s as u64);
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<Seq2Seq> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(ModelError::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let n = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(n, "config")?)
        .map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
    config.validate()?;
    let expected = Seq2Seq::expected_shapes(&config);
    let count = r.u32("tensor count")? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let ndim = r.u32(&format!("rank of `{name}`"))? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64(&format!("shape of `{name}`"))? as usize);
        }
        let want = expected
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ModelError::Checkpoint(format!("unexpected tensor `{name}`")))?;
        if want.1 != shape {
            return Err(ModelError::Checkpoint(format!(
                "tensor `{name}` has shape {shape:?}, expected {:?}",
                want.1
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, &format!("data of `{name}`"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.at != bytes.len() {
        return Err(ModelError::Checkpoint("trailing bytes after last tensor".into()));
    }
    Seq2Seq::from_parts(config, params)
}

pub fn save_checkpoint(model: &Seq2Seq, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Seq2Seq> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}
