//! Binary checkpoint: a JSON header followed by little-endian `f64`
//! parameter tensors in canonical order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, UNet3d};
use crate::error::{Error, Result};
use crate::sampler::ChannelStats;

const MAGIC: &[u8; 8] = b"TSEGCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    stats: ChannelStats,
    tensors: Vec<(String, usize)>,
}

/// A trained network together with the input statistics it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: UNet3d,
    pub stats: ChannelStats,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::util::ensure_parent(path)?;
        let io = |e| Error::io(path, e);
        let header = Header {
            config: self.model.config.clone(),
            stats: self.stats.clone(),
            tensors: self
                .model
                .tensor_names()
                .into_iter()
                .zip(self.model.tensors().iter().map(|t| t.len()))
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for t in self.model.tensors() {
            for v in t {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let bad = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io)?;
        if u32::from_le_bytes(word) != VERSION {
            return Err(bad("unsupported checkpoint version"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(io)?;
        let header: Header = serde_json::from_slice(&json)?;
        // Parameter values are overwritten below; the seed is irrelevant.
        let mut model = UNet3d::build(&header.config, 0)?;
        let names = model.tensor_names();
        if names.len() != header.tensors.len() {
            return Err(bad("tensor count does not match the configuration"));
        }
        let mut buf = [0u8; 8];
        for ((t, name), (hname, hlen)) in model.tensors_mut().into_iter().zip(&names).zip(&header.tensors) {
            if name != hname || t.len() != *hlen {
                return Err(bad(&format!("tensor {hname} ({hlen}) does not match {name} ({})", t.len())));
            }
            for v in t.iter_mut() {
                r.read_exact(&mut buf).map_err(io)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        Ok(Self {
            model,
            stats: header.stats,
        })
    }
}
