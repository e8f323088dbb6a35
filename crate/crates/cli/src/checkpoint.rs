//! Binary model checkpoints.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic    b"ADGC"
//! version  u32                     (currently 1)
//! config   u64 length + UTF-8 TOML (n_nodes, history, horizon, [model])
//! count    u64
//! count × tensor:
//!   name   u64 length + UTF-8
//!   rank   u32
//!   dims   rank × u64
//!   data   product(dims) × f64
//! ```
//!
//! Tensors appear in parameter registration order, so saving the same
//! parameters twice gives identical bytes.

use std::fs;
use std::path::Path;

use adgcrnn_core::seq2seq::ModelConfig;
use adgcrnn_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelSection;
use crate::error::{CliError, Result};

const MAGIC: &[u8; 4] = b"ADGC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct StoredConfig {
    n_nodes: usize,
    history: usize,
    horizon: usize,
    model: ModelSection,
}

pub fn encode(config: &ModelConfig, params: &ParamStore) -> Vec<u8> {
    let stored = StoredConfig {
        n_nodes: config.n_nodes,
        history: config.history,
        horizon: config.horizon,
        model: ModelSection::from_core(config),
    };
    let text = toml::to_string(&stored).expect("model config always serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_bytes(&mut out, text.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params.iter() {
        put_bytes(&mut out, p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let slice = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(slice)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn text(&mut self) -> Option<&'a str> {
        let n = usize::try_from(self.u64()?).ok()?;
        std::str::from_utf8(self.take(n)?).ok()
    }
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<(ModelConfig, ParamStore)> {
    let bad = |message: String| CliError::Format {
        path: origin.into(),
        message,
    };
    let truncated = || bad("truncated checkpoint".into());
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4) != Some(MAGIC) {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = c.u32().ok_or_else(truncated)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let stored: StoredConfig =
        toml::from_str(c.text().ok_or_else(truncated)?).map_err(|e| bad(format!("config: {e}")))?;
    let config = stored.model.to_core(stored.n_nodes, stored.history, stored.horizon);
    let count = c.u64().ok_or_else(truncated)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = c.text().ok_or_else(truncated)?.to_string();
        let rank = c.u32().ok_or_else(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().and_then(|d| usize::try_from(d).ok()).ok_or_else(truncated))
            .collect::<Result<Vec<usize>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(truncated)?;
        let raw = c
            .take(numel.checked_mul(8).ok_or_else(truncated)?)
            .ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.add(name, Tensor::new(shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(bad("trailing bytes after the last tensor".into()));
    }
    Ok((config, params))
}

pub fn save(path: &Path, config: &ModelConfig, params: &ParamStore) -> Result<()> {
    fs::write(path, encode(config, params)).map_err(CliError::write(path))
}

pub fn load(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    let bytes = fs::read(path).map_err(CliError::read(path))?;
    decode(&bytes, path)
}

/// Names the first field where the checkpoint and the expected shape differ.
pub fn check_compatible(stored: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    let fields = [
        ("n_nodes", stored.n_nodes, expected.n_nodes),
        ("history", stored.history, expected.history),
        ("horizon", stored.horizon, expected.horizon),
        ("c_out", stored.c_out, expected.c_out),
        ("hidden", stored.hidden, expected.hidden),
        ("head_dim", stored.head_dim, expected.head_dim),
        ("heads", stored.heads, expected.heads),
        ("diffusion_steps", stored.diffusion_steps, expected.diffusion_steps),
    ];
    for (name, a, b) in fields {
        if a != b {
            return Err(CliError::Invalid(format!(
                "checkpoint/config mismatch in {name}: checkpoint has {a}, expected {b}"
            )));
        }
    }
    if stored.variant != expected.variant {
        return Err(CliError::Invalid(format!(
            "checkpoint/config mismatch in variant: checkpoint has {}, expected {}",
            stored.variant, expected.variant
        )));
    }
    Ok(())
}
