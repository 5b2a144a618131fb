// Checkpoint layout, all integers little-endian:
//
//   magic    8 bytes  "COSSEGCK"
//   version  u32
//   count    u32      number of tensors
//   per tensor, in SegmenterParams::tensors() order:
//     rank   u32
//     dims   rank x u32
//     data   product(dims) x f64
//
// `arch.json` next to it records the architecture and the name and shape of
// every tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SegmenterConfig, SegmenterParams};
use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "model.ckpt";
const MAGIC: &[u8; 8] = b"COSSEGCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchFile {
    pub version: u32,
    pub config: SegmenterConfig,
    pub tensors: Vec<TensorEntry>,
}

fn encode(params: &SegmenterParams) -> Vec<u8> {
    let tensors = params.tensors();
    let mut out = Vec::with_capacity(16 + params.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Writes `model.ckpt` and `arch.json` into `dir`.
pub fn save_checkpoint(dir: &Path, params: &SegmenterParams) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CHECKPOINT_FILE), encode(params))?;
    let arch = ArchFile {
        version: CHECKPOINT_VERSION,
        config: params.config,
        tensors: params
            .tensor_names()
            .into_iter()
            .zip(params.tensors())
            .map(|(name, t)| TensorEntry { name, shape: t.shape().to_vec() })
            .collect(),
    };
    fs::write(dir.join("arch.json"), serde_json::to_string_pretty(&arch)?)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => e.into(),
    })
}

/// Loads a checkpoint written by [`save_checkpoint`]. Every tensor shape must
/// match the architecture recorded in `arch.json`.
pub fn load_checkpoint(dir: &Path) -> Result<SegmenterParams> {
    let arch_bytes = read_file(&dir.join("arch.json"))?;
    let arch: ArchFile = serde_json::from_slice(&arch_bytes).map_err(|e| Error::Format(format!("arch.json: {e}")))?;
    arch.config.validate().map_err(|e| Error::Format(format!("arch.json: {e}")))?;
    // the values are overwritten below; any seed gives the right shapes
    let mut params = SegmenterParams::init(arch.config, &mut rng::seeded(0))?;

    let bytes = read_file(&dir.join(CHECKPOINT_FILE))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = params.tensors_mut();
    if count != tensors.len() {
        return Err(Error::Format(format!("checkpoint has {count} tensors, architecture needs {}", tensors.len())));
    }
    for (i, t) in tensors.iter_mut().enumerate() {
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != t.shape() {
            return Err(Error::Format(format!("tensor {i}: shape {shape:?}, expected {:?}", t.shape())));
        }
        for v in t.data_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SegmenterConfig { rows: 16, cols: 16, ..SegmenterConfig::default() };
        let p = SegmenterParams::init(cfg, &mut rng::seeded(3)).unwrap();
        save_checkpoint(dir.path(), &p).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap(), p);

        let path = dir.path().join(CHECKPOINT_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()).unwrap_err(), Error::Format(_)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(dir.path()).unwrap_err(), Error::Format(_)));
        assert!(matches!(load_checkpoint(&dir.path().join("none")).unwrap_err(), Error::NotFound(_)));
    }
}
