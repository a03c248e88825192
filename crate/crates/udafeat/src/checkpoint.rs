//! Parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `UDAF` |
//! | 4     | format version, `u32` |
//! | 8     | parameter count `n`, `u64` |
//! | 8n    | parameters as `f64`, in [`SegNetConfig::param_shapes`] order, each tensor row-major |
//! | 8     | config length `m`, `u64` |
//! | m     | the `SegNetConfig` as UTF-8 JSON |

use std::fs;
use std::path::Path;

use udafeat_core::{SegNetConfig, SegNetParams};

use crate::error::{format_err, io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"UDAF";
pub const VERSION: u32 = 1;

pub fn encode(cfg: &SegNetConfig, params: &SegNetParams) -> Vec<u8> {
    let flat = params.flat();
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let mut out = Vec::with_capacity(32 + 8 * flat.len() + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for x in flat {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint; the parameter count must match the embedded config.
pub fn decode(bytes: &[u8]) -> std::result::Result<(SegNetConfig, SegNetParams), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let n = usize::try_from(r.u64()?).map_err(|_| "parameter count overflows")?;
    let raw = r.take(n.checked_mul(8).ok_or("parameter count overflows")?)?;
    let flat: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let m = usize::try_from(r.u64()?).map_err(|_| "config length overflows")?;
    let json = std::str::from_utf8(r.take(m)?).map_err(|e| e.to_string())?;
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    let cfg: SegNetConfig = serde_json::from_str(json).map_err(|e| e.to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    let params = SegNetParams::from_flat(&cfg, &flat).map_err(|e| e.to_string())?;
    Ok((cfg, params))
}

pub fn save(path: &Path, cfg: &SegNetConfig, params: &SegNetParams) -> Result<()> {
    fs::write(path, encode(cfg, params)).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<(SegNetConfig, SegNetParams)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes).map_err(|r| format_err(path, r))
}

/// Loads a checkpoint and requires its network config to equal `expected`.
pub fn load_matching(path: &Path, expected: &SegNetConfig) -> Result<SegNetParams> {
    let (cfg, params) = load(path)?;
    if &cfg != expected {
        return Err(Error::Mismatch(format!("{} was trained with a different network config", path.display())));
    }
    Ok(params)
}
