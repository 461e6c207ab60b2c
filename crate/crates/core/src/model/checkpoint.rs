//! Binary model checkpoints. Layout: magic "M3H1", a length-prefixed
//! JSON header (config, schemas, tasks), then an ordered tensor table
//! of (name, rows, cols, row-major f64 little-endian). Save/load round
//! trips are bit-exact.

use crate::data::dataset::{ModalitySchema, TaskSpec};
use crate::error::{Error, Result};
use crate::ioutil::atomic_write;
use crate::model::config::ModelConfig;
use crate::model::net::Model;
use crate::numerics::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"M3H1";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    schemas: Vec<ModalitySchema>,
    tasks: Vec<TaskSpec>,
}

pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        format_version: 1,
        config: model.config().clone(),
        schemas: model.schemas().to_vec(),
        tasks: model.tasks().to_vec(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encode: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32::try_from(header_json.len()).unwrap().to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&u32::try_from(model.params().len()).unwrap().to_le_bytes());
    for (name, m) in model.params() {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&u32::try_from(name_bytes.len()).unwrap().to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&u32::try_from(m.rows()).unwrap().to_le_bytes());
        out.extend_from_slice(&u32::try_from(m.cols()).unwrap().to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(model)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {}, needed {n} more",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let header_len = c.u32()? as usize;
    let header: Header = serde_json::from_slice(c.take(header_len)?)
        .map_err(|e| Error::Format(format!("header decode: {e}")))?;
    if header.format_version != 1 {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let n_tensors = c.u32()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|e| Error::Format(format!("tensor name not utf-8: {e}")))?;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let raw = c.take(rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        let m = Matrix::from_vec(rows, cols, data)
            .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        if params.insert(name.clone(), m).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor table",
            bytes.len() - c.pos
        )));
    }
    Model::from_parts(header.config, header.schemas, header.tasks, params)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}
