//! Versioned binary container for base, adapter and embedding weights.
//!
//! Layout (little endian): `ACTC`, `u32` version, `u8` kind, `u32` config
//! length and JSON config, `u32` array count, then per array a `u32` name
//! length, the name, `u32` rank, `u64` dims and `f64` data; finally the
//! SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fae::FrequencyEmbedding;
use crate::mmdit::{MmDit, ModelConfig};
use crate::params::ParamSet;
use crate::refadapter::AdapterWeights;

pub const MAGIC: &[u8; 4] = b"ACTC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Base,
    Adapter,
    FreqEmb,
}

impl CheckpointKind {
    fn code(self) -> u8 {
        match self {
            CheckpointKind::Base => 0,
            CheckpointKind::Adapter => 1,
            CheckpointKind::FreqEmb => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(CheckpointKind::Base),
            1 => Ok(CheckpointKind::Adapter),
            2 => Ok(CheckpointKind::FreqEmb),
            other => Err(Error::Checkpoint(format!("unknown checkpoint kind code {other}"))),
        }
    }
}

impl fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckpointKind::Base => "base",
            CheckpointKind::Adapter => "adapter",
            CheckpointKind::FreqEmb => "freq_emb",
        })
    }
}

impl FromStr for CheckpointKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(CheckpointKind::Base),
            "adapter" => Ok(CheckpointKind::Adapter),
            "freq_emb" => Ok(CheckpointKind::FreqEmb),
            other => Err(Error::Config(format!("unknown checkpoint kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: CheckpointKind,
    pub config: serde_json::Value,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
    let out = &bytes[*pos..end];
    *pos = end;
    Ok(out)
}

fn take_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().expect("4 bytes")))
}

fn take_u64(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, pos, 8)?.try_into().expect("8 bytes")))
}

impl Checkpoint {
    pub fn from_params<P: ParamSet>(kind: CheckpointKind, config: serde_json::Value, params: &P) -> Self {
        let arrays = params.tensors().into_iter().map(|(n, t)| (n, t.to_owned())).collect();
        Self {
            version: VERSION,
            kind,
            config,
            arrays,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.kind.code());
        let cfg = serde_json::to_vec(&self.config).expect("json value serialises");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let hash = Sha256::digest(&out);
        out.extend_from_slice(&hash);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, stored) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != stored {
            return Err(Error::Checkpoint("content hash mismatch".into()));
        }
        let mut pos = 4;
        let version = take_u32(body, &mut pos)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let kind = CheckpointKind::from_code(take(body, &mut pos, 1)?[0])?;
        let cfg_len = take_u32(body, &mut pos)? as usize;
        let config = serde_json::from_slice(take(body, &mut pos, cfg_len)?)?;
        let count = take_u32(body, &mut pos)?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = take_u32(body, &mut pos)? as usize;
            let name = String::from_utf8(take(body, &mut pos, name_len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let ndim = take_u32(body, &mut pos)? as usize;
            let shape = (0..ndim).map(|_| take_u64(body, &mut pos).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = take(body, &mut pos, n.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let a = ArrayD::from_shape_vec(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            arrays.push((name, a));
        }
        if pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after arrays".into()));
        }
        Ok(Self { version, kind, config, arrays })
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and rejects any kind other than `kind`.
    pub fn load_kind(path: &Path, kind: CheckpointKind) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.expect_kind(kind)?;
        Ok(ck)
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    fn field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self.config.get(key).ok_or_else(|| Error::Checkpoint(format!("checkpoint config lacks {key:?}")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("bad {key:?}: {e}")))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.field("model")
    }

    /// Copies the stored arrays into `params`, requiring a one-to-one name match.
    pub fn assign_to<P: ParamSet>(&self, params: &mut P) -> Result<()> {
        let mut stored: BTreeMap<&str, &ArrayD<f64>> = self.arrays.iter().map(|(n, a)| (n.as_str(), a)).collect();
        let mut missing = Vec::new();
        for (name, mut t) in params.tensors_mut() {
            match stored.remove(name.as_str()) {
                Some(a) if a.shape() == t.shape() => t.assign(a),
                Some(a) => {
                    return Err(Error::Checkpoint(format!("array {name} has shape {:?}, expected {:?}", a.shape(), t.shape())))
                }
                None => missing.push(name),
            }
        }
        if !missing.is_empty() || !stored.is_empty() {
            let unmatched: Vec<&str> = stored.into_keys().collect();
            return Err(Error::Checkpoint(format!("array names differ: missing {missing:?}, unmatched {unmatched:?}")));
        }
        Ok(())
    }
}

pub fn base_checkpoint(model: &MmDit) -> Checkpoint {
    Checkpoint::from_params(CheckpointKind::Base, serde_json::json!({ "model": model.config }), model)
}

pub fn base_from_checkpoint(ck: &Checkpoint) -> Result<MmDit> {
    ck.expect_kind(CheckpointKind::Base)?;
    let mut m = MmDit::new(ck.model_config()?, 0)?;
    ck.assign_to(&mut m)?;
    Ok(m)
}

pub fn adapter_checkpoint(adapter: &AdapterWeights, model: &ModelConfig) -> Checkpoint {
    Checkpoint::from_params(
        CheckpointKind::Adapter,
        serde_json::json!({ "model": model, "rank": adapter.rank, "scale": adapter.scale }),
        adapter,
    )
}

pub fn adapter_from_checkpoint(ck: &Checkpoint) -> Result<AdapterWeights> {
    ck.expect_kind(CheckpointKind::Adapter)?;
    let mut a = AdapterWeights::new(&ck.model_config()?, ck.field("rank")?, ck.field("scale")?, 0)?;
    ck.assign_to(&mut a)?;
    Ok(a)
}

pub fn freq_checkpoint(emb: &FrequencyEmbedding, model: &ModelConfig) -> Checkpoint {
    Checkpoint::from_params(
        CheckpointKind::FreqEmb,
        serde_json::json!({ "model": model, "reference_id": emb.reference_id, "n_tokens": emb.n_tokens() }),
        emb,
    )
}

pub fn freq_from_checkpoint(ck: &Checkpoint) -> Result<FrequencyEmbedding> {
    ck.expect_kind(CheckpointKind::FreqEmb)?;
    let reference_id: String = ck.field("reference_id")?;
    let mut e = FrequencyEmbedding::new(&ck.model_config()?, ck.field("n_tokens")?, 0.0, reference_id, 0)?;
    ck.assign_to(&mut e)?;
    Ok(e)
}
