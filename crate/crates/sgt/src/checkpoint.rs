//! Binary checkpoints for the target model (`SGTC`) and the estimator
//! (`SGTS`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      [u8; 4]
//! version    u32
//! config     u32 length + UTF-8 "key = value" lines
//! tokenizer  u32 length + UTF-8 tokenizer file
//! tensors    u32 count, then per tensor:
//!              u16 name length, name, u8 rank, u32 extents, f32 data
//! checksum   SHA-256 of everything above
//! ```
//!
//! An estimator checkpoint also carries the target's token embedding table
//! (so text can be obfuscated without the target) and a checksum of the
//! field it produces on a fixed probe input, verified on load.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use sgt_core::corpus::Tokenizer;
use sgt_core::lm::{EmbeddingTable, LmConfig, TargetModel};
use sgt_core::nn::ParamSet;
use sgt_core::sgt::{SgtConfig, SgtEstimator};
use sgt_core::RealArray;

use crate::corpus_io::{tokenizer_from_text, tokenizer_to_text};
use crate::error::CliError;

pub const TARGET_MAGIC: [u8; 4] = *b"SGTC";
pub const SGT_MAGIC: [u8; 4] = *b"SGTS";
pub const VERSION: u32 = 1;

const EMBEDDING_TENSOR: &str = "target.tok_emb";

/// The decoded contents of either checkpoint kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub config: BTreeMap<String, String>,
    pub tokenizer: String,
    pub tensors: Vec<(String, RealArray<f32>)>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut cfg = String::new();
        for (k, v) in &self.config {
            cfg.push_str(&format!("{k} = {v}\n"));
        }
        put_bytes(&mut out, cfg.as_bytes());
        put_bytes(&mut out, self.tokenizer.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8], magic: [u8; 4], path: &Path) -> Result<Self, CliError> {
        let err = |r: &str| CliError::format(path, r.to_string());
        if bytes.len() < 8 + 32 {
            return Err(err("truncated checkpoint"));
        }
        if bytes[..4] != magic {
            return Err(err(&format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(&magic)
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: 4, path };
        let version = r.u32()?;
        if version != VERSION {
            return Err(err(&format!("unsupported checkpoint version {version}")));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(err("checksum mismatch (corrupt or truncated checkpoint)"));
        }
        let cfg_text = r.string()?;
        let mut config = BTreeMap::new();
        for line in cfg_text.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| err(&format!("bad config line {line:?}")))?;
            config.insert(k.to_string(), v.to_string());
        }
        let tokenizer = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| err("tensor name is not UTF-8"))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(4).ok_or_else(|| err("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, RealArray::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(err("trailing bytes after tensors"));
        }
        Ok(Container {
            magic,
            config,
            tokenizer,
            tensors,
        })
    }

    fn get<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T, CliError> {
        self.config
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::format(path, format!("missing or malformed config key {key:?}")))
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CliError::format(self.path, "truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CliError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CliError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CliError::format(self.path, "text block is not UTF-8"))
    }
}

/// SHA-256 over parameter names, shapes and little-endian values.
pub fn params_hash(params: &ParamSet<f32>) -> String {
    let mut h = Sha256::new();
    for (name, v) in params.iter() {
        h.update(name.as_bytes());
        for &e in v.shape() {
            h.update((e as u64).to_le_bytes());
        }
        for x in v.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn into_params(tensors: Vec<(String, RealArray<f32>)>) -> ParamSet<f32> {
    let mut p = ParamSet::new();
    for (n, v) in tensors {
        p.push(&n, v);
    }
    p
}

#[derive(Debug, Clone)]
pub struct TargetCheckpoint {
    pub model: TargetModel<f32>,
    pub tokenizer: Tokenizer,
}

impl TargetCheckpoint {
    pub fn to_container(&self) -> Container {
        let c = self.model.config();
        let config = [
            ("vocab_size", c.vocab_size),
            ("d_model", c.d_model),
            ("layers", c.layers),
            ("heads", c.heads),
            ("context", c.context),
            ("ff_mult", c.ff_mult),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Container {
            magic: TARGET_MAGIC,
            config,
            tokenizer: tokenizer_to_text(&self.tokenizer),
            tensors: self.model.params().iter().map(|(n, v)| (n.to_string(), v.clone())).collect(),
        }
    }

    pub fn from_container(c: Container, path: &Path) -> Result<Self, CliError> {
        let config = LmConfig {
            vocab_size: c.get("vocab_size", path)?,
            d_model: c.get("d_model", path)?,
            layers: c.get("layers", path)?,
            heads: c.get("heads", path)?,
            context: c.get("context", path)?,
            ff_mult: c.get("ff_mult", path)?,
        };
        let tokenizer = tokenizer_from_text(&c.tokenizer, path)?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(CliError::format(path, "tokenizer and model vocabulary sizes differ"));
        }
        let mut model = TargetModel::from_params(config, into_params(c.tensors))?;
        model.freeze();
        Ok(Self { model, tokenizer })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        write_file(path, &self.to_container().encode())
    }

    /// Loads a target; the returned model is frozen.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let c = Container::decode(&read_file(path)?, TARGET_MAGIC, path)?;
        Self::from_container(c, path)
    }
}

#[derive(Debug, Clone)]
pub struct SgtCheckpoint {
    pub estimator: SgtEstimator<f32>,
    pub embeddings: EmbeddingTable<f32>,
    pub tokenizer: Tokenizer,
    /// [`params_hash`] of the target the estimator was trained against.
    pub target_hash: String,
}

/// SHA-256 of the field the estimator emits on its probe input.
pub fn field_checksum(est: &SgtEstimator<f32>) -> Result<String, CliError> {
    let x = est.probe_input();
    let t = x.rows();
    let f = est.estimate_field(&x, t)?;
    let mut h = Sha256::new();
    for v in f.mu.data().iter().chain(f.sigma.data()) {
        h.update(v.to_le_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

impl SgtCheckpoint {
    pub fn to_container(&self) -> Result<Container, CliError> {
        let c = self.estimator.config();
        let mut config: BTreeMap<String, String> = [
            ("d_model", c.d_model.to_string()),
            ("width", c.width.to_string()),
            ("layers", c.layers.to_string()),
            ("heads", c.heads.to_string()),
            ("ff_mult", c.ff_mult.to_string()),
            ("context", c.context.to_string()),
            ("causal", c.causal.to_string()),
            ("scale", float_text(c.scale)),
            ("sigma_min_rel", float_text(c.sigma_min_rel)),
            ("sigma_max_rel", float_text(c.sigma_max_rel)),
            ("sigma_init_rel", float_text(c.sigma_init_rel)),
            ("mean_init_std", float_text(c.mean_init_std)),
            ("target_hash", self.target_hash.clone()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        config.insert("field_checksum".into(), field_checksum(&self.estimator)?);
        let mut tensors: Vec<(String, RealArray<f32>)> = self
            .estimator
            .params()
            .iter()
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect();
        tensors.push((EMBEDDING_TENSOR.to_string(), self.embeddings.vectors().clone()));
        Ok(Container {
            magic: SGT_MAGIC,
            config,
            tokenizer: tokenizer_to_text(&self.tokenizer),
            tensors,
        })
    }

    pub fn from_container(mut c: Container, path: &Path) -> Result<Self, CliError> {
        let config = SgtConfig {
            d_model: c.get("d_model", path)?,
            width: c.get("width", path)?,
            layers: c.get("layers", path)?,
            heads: c.get("heads", path)?,
            ff_mult: c.get("ff_mult", path)?,
            context: c.get("context", path)?,
            causal: c.get("causal", path)?,
            scale: c.get("scale", path)?,
            sigma_min_rel: c.get("sigma_min_rel", path)?,
            sigma_max_rel: c.get("sigma_max_rel", path)?,
            sigma_init_rel: c.get("sigma_init_rel", path)?,
            mean_init_std: c.get("mean_init_std", path)?,
        };
        let target_hash: String = c.get("target_hash", path)?;
        let expected: String = c.get("field_checksum", path)?;
        let pos = c
            .tensors
            .iter()
            .position(|(n, _)| n == EMBEDDING_TENSOR)
            .ok_or_else(|| CliError::format(path, "missing embedding table"))?;
        let (_, table) = c.tensors.remove(pos);
        let embeddings = EmbeddingTable::new(table)?;
        let tokenizer = tokenizer_from_text(&c.tokenizer, path)?;
        if tokenizer.vocab_size() != embeddings.vocab_size() {
            return Err(CliError::format(path, "tokenizer and embedding vocabulary sizes differ"));
        }
        let estimator = SgtEstimator::from_params(config, into_params(c.tensors))?;
        let found = field_checksum(&estimator)?;
        if found != expected {
            return Err(CliError::HashMismatch {
                path: path.display().to_string(),
                expected,
                found,
            });
        }
        Ok(Self {
            estimator,
            embeddings,
            tokenizer,
            target_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        write_file(path, &self.to_container()?.encode())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let c = Container::decode(&read_file(path)?, SGT_MAGIC, path)?;
        Self::from_container(c, path)
    }
}

/// Shortest text that parses back to the same f64.
fn float_text(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use sgt_core::RngStream;

    fn tiny_target() -> TargetCheckpoint {
        let cfg = LmConfig {
            vocab_size: 256,
            d_model: 8,
            layers: 1,
            heads: 2,
            context: 4,
            ff_mult: 2,
        };
        let mut model = TargetModel::new(cfg, &mut RngStream::new(1, 0)).unwrap();
        model.freeze();
        TargetCheckpoint {
            model,
            tokenizer: Tokenizer::byte_level(),
        }
    }

    fn tiny_sgt(t: &TargetCheckpoint) -> SgtCheckpoint {
        let table = t.model.embedding_table().unwrap();
        let cfg = SgtConfig::for_embeddings(8, table.median_norm(), 4);
        SgtCheckpoint {
            estimator: SgtEstimator::new(cfg, &mut RngStream::new(2, 0)).unwrap(),
            embeddings: table,
            tokenizer: t.tokenizer.clone(),
            target_hash: params_hash(t.model.params()),
        }
    }

    #[test]
    fn target_round_trip_is_bit_exact() {
        let t = tiny_target();
        let bytes = t.to_container().encode();
        let back = TargetCheckpoint::from_container(Container::decode(&bytes, TARGET_MAGIC, Path::new("t")).unwrap(), Path::new("t")).unwrap();
        assert_eq!(params_hash(back.model.params()), params_hash(t.model.params()));
        assert_eq!(back.model.config(), t.model.config());
        assert!(back.model.is_frozen());
        assert_eq!(back.to_container().encode(), bytes);
    }

    #[test]
    fn sgt_round_trip_verifies_field() {
        let t = tiny_target();
        let s = tiny_sgt(&t);
        let bytes = s.to_container().unwrap().encode();
        let c = Container::decode(&bytes, SGT_MAGIC, Path::new("s")).unwrap();
        let back = SgtCheckpoint::from_container(c.clone(), Path::new("s")).unwrap();
        assert_eq!(back.estimator.config(), s.estimator.config());
        assert_eq!(back.target_hash, s.target_hash);
        assert_eq!(back.to_container().unwrap().encode(), bytes);

        let mut tampered = c;
        let i = tampered.tensors.iter().position(|(n, _)| n == "mean.bias").unwrap();
        tampered.tensors[i].1.data_mut()[0] += 1.0;
        assert!(matches!(
            SgtCheckpoint::from_container(tampered, Path::new("s")),
            Err(CliError::HashMismatch { .. })
        ));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = tiny_target().to_container().encode();
        let p = Path::new("c");
        assert!(Container::decode(&bytes, SGT_MAGIC, p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::decode(&bad, TARGET_MAGIC, p).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        let e = Container::decode(&bad, TARGET_MAGIC, p).unwrap_err().to_string();
        assert!(e.contains("version"), "{e}");
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(Container::decode(&bytes[..cut], TARGET_MAGIC, p).is_err());
        }
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 1;
        assert!(Container::decode(&flipped, TARGET_MAGIC, p).is_err());
    }
}
