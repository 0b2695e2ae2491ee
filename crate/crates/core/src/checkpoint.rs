//! Binary checkpoints.
//!
//! Layout: magic `MLMF`, `u32` format version, `u32` header length, a JSON
//! header, then every tensor of the parameter inventory in order as a `u64`
//! element count followed by little-endian `f32` values. When the header
//! says `has_optimizer`, the Adam first moments follow in the same order,
//! then the second moments. All integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{ModelConfig, Parameters};
use crate::nn::{ParamSet, Tensor};
use crate::optim::AdamState;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MLMF";
pub const FORMAT_VERSION: u32 = 1;

/// Position of the data stream when the checkpoint was taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataCursor {
    pub epoch: u64,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub step: u64,
    #[serde(default)]
    pub has_optimizer: bool,
    #[serde(default)]
    pub cursor: Option<DataCursor>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Parameters,
    pub optimizer: Option<AdamState>,
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(t.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &x in &t.data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_tensor<R: Read>(r: &mut R, shape: &[usize], name: &str) -> Result<Tensor> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    let len = u64::from_le_bytes(len) as usize;
    let expect: usize = shape.iter().product();
    if len != expect {
        return Err(Error::Checkpoint(format!("{name}: {len} values stored, {expect} expected")));
    }
    let mut buf = vec![0u8; len * 4];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok(Tensor { shape: shape.to_vec(), data })
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = self.header.clone();
        header.has_optimizer = self.optimizer.is_some();
        let json = serde_json::to_vec(&header)?;
        let io = |e| Error::Checkpoint(format!("write: {e}"));
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for (_, t) in self.params.tensors() {
            write_tensor(w, t).map_err(io)?;
        }
        if let Some(opt) = &self.optimizer {
            for t in opt.m.iter().chain(&opt.v) {
                write_tensor(w, t).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::Checkpoint(format!("magic: {e}")))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|e| Error::Checkpoint(format!("version: {e}")))?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        r.read_exact(&mut word).map_err(|e| Error::Checkpoint(format!("header length: {e}")))?;
        let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        header.config.validate()?;
        let inventory = Parameters::inventory(&header.config);
        let mut tensors = Vec::with_capacity(inventory.len());
        for (name, shape) in &inventory {
            tensors.push(read_tensor(r, shape, name)?);
        }
        let mut params = Parameters::init(&header.config, 0)?;
        for ((_, slot), t) in params.tensors_mut().into_iter().zip(tensors) {
            *slot = t;
        }
        let optimizer = if header.has_optimizer {
            let mut read_all = || -> Result<Vec<Tensor>> {
                inventory.iter().map(|(n, s)| read_tensor(r, s, n)).collect()
            };
            let m = read_all()?;
            let v = read_all()?;
            Some(AdamState { step: header.step, m, v })
        } else {
            None
        };
        Ok(Self { header, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(f);
            self.write_to(&mut w)?;
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
