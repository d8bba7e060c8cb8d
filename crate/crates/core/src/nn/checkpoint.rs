//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CSCKPT\0\0" | u32 version
//! u32 metadata length | metadata (UTF-8 `key=value` lines)
//! u32 tensor count
//! per tensor: u16 name length | name | u8 rank | u32 dims[rank] | f32 data
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CSCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub metadata: BTreeMap<String, String>,
    pub tensors: ParamSet,
}

pub fn write_checkpoint(path: &Path, file: &CheckpointFile) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let mut meta = String::new();
    for (k, v) in &file.metadata {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Input(format!("metadata entry {k:?} is not a single key=value line")));
        }
        meta.push_str(&format!("{k}={v}\n"));
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(file.tensors.len() as u32).to_le_bytes());
    for (name, t) in file.tensors.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|e| Error::format(path, e.to_string()))?;
    let metadata = meta
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let count = r.u32()?;
    let mut tensors = ParamSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::format(path, e.to_string()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = r
            .take(4 * len)?
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        tensors.insert(name, Tensor::from_vec(shape, data));
    }
    Ok(CheckpointFile { metadata, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_f32() {
        let mut p = ParamSet::new();
        p.insert("raw.conv.w", Tensor::from_vec(vec![2, 1, 1, 1], vec![0.1, -3.25]));
        p.insert("ema.conv.b", Tensor::from_vec(vec![2], vec![1e-3, 7.0]));
        let mut metadata = BTreeMap::new();
        metadata.insert("epoch".to_string(), "3".to_string());
        metadata.insert("fid".to_string(), "1.5".to_string());
        let file = CheckpointFile { metadata, tensors: p.clone() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        write_checkpoint(&path, &file).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.metadata, file.metadata);
        assert_eq!(back.tensors, p.rounded_f32());
        std::fs::write(&path, b"garbage").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
