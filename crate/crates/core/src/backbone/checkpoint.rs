//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes        | content                                             |
//! |--------------|-----------------------------------------------------|
//! | 8            | magic `EMINCKPT`                                    |
//! | 4            | format version (u32, currently 1)                   |
//! | 8            | header length `h` (u64)                             |
//! | h            | UTF-8 JSON header: `config`, `seed`, `em_iteration`, `adam_step`, `vocabulary` |
//! | 8 · P        | flat parameter vector (f64)                         |
//! | 8 · P        | Adam first moments (f64)                            |
//! | 8 · P        | Adam second moments (f64)                           |
//!
//! `P` is the parameter count implied by `config`. Floats are stored as raw
//! bit patterns, so a save/load round trip is exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::{ModelConfig, Parameters};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EMINCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub optimizer: AdamState,
    pub seed: u64,
    pub em_iteration: u64,
    pub vocabulary: Option<Vocabulary>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    em_iteration: u64,
    adam_step: u64,
    vocabulary: Option<Vocabulary>,
}

impl Checkpoint {
    pub fn new(params: Parameters, optimizer: AdamState, seed: u64, em_iteration: u64) -> Self {
        Checkpoint {
            params,
            optimizer,
            seed,
            em_iteration,
            vocabulary: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.params.config.clone(),
            seed: self.seed,
            em_iteration: self.em_iteration,
            adam_step: self.optimizer.step,
            vocabulary: self.vocabulary.clone(),
        })?;
        let n = self.params.len();
        if self.optimizer.m.len() != n || self.optimizer.v.len() != n {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        let mut out = Vec::with_capacity(20 + header.len() + 24 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for block in [self.params.as_slice(), &self.optimizer.m, &self.optimizer.v] {
            for x in block {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        read_exact(&mut r, &mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        read_exact(&mut r, &mut b8)?;
        let h = u64::from_le_bytes(b8) as usize;
        if h > r.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..h])?;
        r = &r[h..];
        header.config.validate()?;
        let n = super::Layout::new(&header.config).len;
        if r.len() != 24 * n {
            return Err(Error::Checkpoint(format!(
                "expected {} bytes of arrays, found {}",
                24 * n,
                r.len()
            )));
        }
        let mut arrays = r.chunks_exact(8 * n).map(|block| {
            block
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect::<Vec<f64>>()
        });
        let values = arrays.next().unwrap_or_default();
        let m = arrays.next().unwrap_or_default();
        let v = arrays.next().unwrap_or_default();
        Ok(Checkpoint {
            params: Parameters::from_flat(&header.config, values)?,
            optimizer: AdamState {
                m,
                v,
                step: header.adam_step,
            },
            seed: header.seed,
            em_iteration: header.em_iteration,
            vocabulary: header.vocabulary,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated file".into()))
}
