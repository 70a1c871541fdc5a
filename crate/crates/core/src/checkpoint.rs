//! Versioned binary parameter container.
//!
//! Layout: magic `TAGC`, u32 version, JSON header (config echo, vocab hash,
//! step), then named entries. Parameter entries carry shape and little-endian
//! f32 data; shared parameters are stored once, with alias entries recording
//! every additional name that resolves to them (the tied prediction softmax
//! aliases the token embedding). Serialization is fully deterministic, so
//! identical models produce byte-identical files.

use crate::error::{CoreError, Result};
use crate::model::{Model, ModelConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TAGC";
const FORMAT_VERSION: u32 = 1;

/// Extra names stored as aliases of real parameters.
const ALIASES: &[(&str, &str)] = &[("heads.tied_softmax_w", "shared.token_embedding")];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub step: u64,
}

fn ck_err(msg: impl Into<String>) -> CoreError {
    CoreError::Checkpoint(msg.into())
}

pub fn save_model(path: &Path, model: &Model<f32>, vocab_hash: u64, step: u64) -> Result<()> {
    let file =
        std::fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| CoreError::io(path.display().to_string(), e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: model.config,
        vocab_hash: format!("{vocab_hash:016x}"),
        step,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| ck_err(format!("header encode: {e}")))?;
    w.write_all(&(header_json.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&header_json).map_err(io_err)?;

    let params = model.named_parameters();
    let count = (params.len() + ALIASES.len()) as u32;
    w.write_all(&count.to_le_bytes()).map_err(io_err)?;
    for (name, p) in &params {
        w.write_all(&[0u8]).map_err(io_err)?;
        write_name(&mut w, name, path)?;
        let shape = p.shape();
        w.write_all(&[shape.len() as u8]).map_err(io_err)?;
        for &dim in shape {
            w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
        }
        for &v in p.data().iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    for (alias, target) in ALIASES {
        w.write_all(&[1u8]).map_err(io_err)?;
        write_name(&mut w, alias, path)?;
        write_name(&mut w, target, path)?;
    }
    w.flush().map_err(io_err)
}

fn write_name(w: &mut impl Write, name: &str, path: &Path) -> Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u16).to_le_bytes())
        .and_then(|_| w.write_all(bytes))
        .map_err(|e| CoreError::io(path.display().to_string(), e))
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| ck_err(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.bytes(len)?).map_err(|e| ck_err(format!("bad name: {e}")))
    }
}

pub struct LoadedCheckpoint {
    pub header: CheckpointHeader,
    pub model: Model<f32>,
    pub aliases: BTreeMap<String, String>,
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let file =
        std::fs::File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut c = Cursor {
        inner: BufReader::new(file),
    };
    if c.bytes(4)? != MAGIC {
        return Err(ck_err("bad magic"));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(ck_err(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let hlen = c.u32()? as usize;
    serde_json::from_slice(&c.bytes(hlen)?).map_err(|e| ck_err(format!("bad header: {e}")))
}

/// Load a checkpoint into a freshly constructed model. Every model parameter
/// must be present with the right shape; aliases must resolve to stored
/// entries.
pub fn load_model(path: &Path) -> Result<LoadedCheckpoint> {
    let file =
        std::fs::File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut c = Cursor {
        inner: BufReader::new(file),
    };
    if c.bytes(4)? != MAGIC {
        return Err(ck_err("bad magic"));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(ck_err(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let hlen = c.u32()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(&c.bytes(hlen)?).map_err(|e| ck_err(format!("bad header: {e}")))?;

    let count = c.u32()?;
    let mut entries: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    let mut aliases = BTreeMap::new();
    for i in 0..count {
        let kind = c.u8()?;
        let name = c.name()?;
        match kind {
            0 => {
                let ndim = c.u8()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(c.u32()? as usize);
                }
                let numel: usize = shape.iter().product();
                let raw = c.bytes(numel * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                entries.insert(name, (shape, data));
            }
            1 => {
                let target = c.name()?;
                aliases.insert(name, target);
            }
            k => return Err(ck_err(format!("entry {i}: unknown kind {k}"))),
        }
    }
    for (alias, target) in &aliases {
        if !entries.contains_key(target) {
            return Err(ck_err(format!(
                "alias `{alias}` points at missing entry `{target}`"
            )));
        }
    }

    let model = Model::<f32>::init(header.config, 0)?;
    for (name, p) in model.named_parameters() {
        let (shape, data) = entries
            .remove(&name)
            .ok_or_else(|| ck_err(format!("missing parameter `{name}`")))?;
        if shape != p.shape() {
            return Err(ck_err(format!(
                "parameter `{name}`: stored shape {shape:?}, model expects {:?}",
                p.shape()
            )));
        }
        p.replace_data(data);
    }
    if let Some((name, _)) = entries.into_iter().next() {
        return Err(ck_err(format!("unknown parameter `{name}` in checkpoint")));
    }
    Ok(LoadedCheckpoint {
        header,
        model,
        aliases,
    })
}

/// Convenience equality check used by determinism tests.
pub fn params_equal(a: &Model<f32>, b: &Model<f32>) -> bool {
    let pa = a.named_parameters();
    let pb = b.named_parameters();
    pa.len() == pb.len()
        && pa
            .iter()
            .zip(&pb)
            .all(|((na, ta), (nb, tb))| na == nb && ta.to_vec() == tb.to_vec())
}
