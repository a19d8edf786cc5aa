//! Embedding dumps: batches of obfuscated (or clean) sequences.
//!
//! ```text
//! magic "SGTE", version u32, d u32, T u32, count u32,
//! count*T*d f32 payload (sequence-major, then position, then coordinate),
//! optional trailer: magic "IDS\0" + count*T u32 token ids
//! ```
//!
//! All integers and floats are little-endian. The id trailer carries ground
//! truth for attacks and is optional.

use std::path::Path;

use sgt_core::RealArray;

use crate::error::CliError;

pub const MAGIC: [u8; 4] = *b"SGTE";
pub const IDS_MAGIC: [u8; 4] = *b"IDS\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub seq_len: usize,
    /// `count·T × d`, one row per position.
    pub embeddings: RealArray<f32>,
    pub ids: Option<Vec<usize>>,
}

impl EmbeddingDump {
    pub fn new(embeddings: RealArray<f32>, seq_len: usize, ids: Option<Vec<usize>>) -> Result<Self, CliError> {
        if embeddings.shape().len() != 2 || seq_len == 0 || embeddings.rows() % seq_len != 0 {
            return Err(CliError::Usage(format!(
                "dump rows {:?} are not a whole number of length-{seq_len} sequences",
                embeddings.shape()
            )));
        }
        if ids.as_ref().is_some_and(|i| i.len() != embeddings.rows()) {
            return Err(CliError::Usage("dump ids do not match the number of rows".into()));
        }
        Ok(Self { seq_len, embeddings, ids })
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn count(&self) -> usize {
        self.embeddings.rows() / self.seq_len
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.embeddings.len());
        out.extend_from_slice(&MAGIC);
        for v in [VERSION, self.dim() as u32, self.seq_len as u32, self.count() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for x in self.embeddings.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(ids) = &self.ids {
            out.extend_from_slice(&IDS_MAGIC);
            for &i in ids {
                out.extend_from_slice(&(i as u32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self, CliError> {
        let err = |r: String| CliError::format(path, r);
        if bytes.len() < 20 {
            return Err(err("truncated dump header".into()));
        }
        if bytes[..4] != MAGIC {
            return Err(err("bad magic, expected SGTE".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (version, d, t, count) = (word(0), word(1), word(2), word(3));
        if version != VERSION as usize {
            return Err(err(format!("unsupported dump version {version}")));
        }
        if d == 0 || t == 0 {
            return Err(err("zero extent in dump header".into()));
        }
        let n = count
            .checked_mul(t)
            .and_then(|r| r.checked_mul(d))
            .ok_or_else(|| err("dump extents overflow".into()))?;
        let end = 20 + 4 * n;
        if bytes.len() < end {
            return Err(err("truncated dump payload".into()));
        }
        let data = bytes[20..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let embeddings = RealArray::new(vec![count * t, d], data)?;
        embeddings.check_finite("dump payload")?;
        let rest = &bytes[end..];
        let ids = if rest.is_empty() {
            None
        } else {
            if rest.len() != 4 + 4 * count * t || rest[..4] != IDS_MAGIC {
                return Err(err("malformed id trailer".into()));
            }
            Some(
                rest[4..]
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                    .collect(),
            )
        };
        Self::new(embeddings, t, ids)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes, path)
    }
}
