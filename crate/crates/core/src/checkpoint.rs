//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `CALRCKPT`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then every parameter as a little-endian `f64` in
//! [`Mlp::params`] order (per layer: row-major weights, then bias).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::{CaliNetParams, Mlp, ScorerParams};

const MAGIC: &[u8; 8] = b"CALRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Scorer,
    CaliNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: CheckpointKind,
    /// Snapshot version id.
    pub version: u64,
    /// Training step at which the parameters were captured.
    pub step: u64,
    pub widths: Vec<usize>,
    pub query_dim: usize,
    pub item_dim: usize,
}

pub fn encode(net: &Mlp, header: &CheckpointHeader) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(12 + json.len() + net.num_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Mlp)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Format("checkpoint: bad magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(Error::Format("checkpoint: truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("checkpoint: unsupported format version {}", header.format_version)));
    }
    let mut net = Mlp::zeros(&header.widths)?;
    let params = &body[len..];
    if params.len() != net.num_params() * 8 {
        return Err(Error::Format("checkpoint: parameter block has the wrong size".into()));
    }
    for (p, chunk) in net.params_mut().zip(params.chunks_exact(8)) {
        *p = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok((header, net))
}

pub fn encode_scorer(params: &ScorerParams, version: u64, step: u64) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Scorer,
        version,
        step,
        widths: params.network().widths(),
        query_dim: params.query_dim(),
        item_dim: params.item_dim(),
    };
    encode(params.network(), &header)
}

pub fn encode_cali(params: &CaliNetParams, version: u64, step: u64) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::CaliNet,
        version,
        step,
        widths: params.network().widths(),
        query_dim: params.network().input_dim(),
        item_dim: 0,
    };
    encode(params.network(), &header)
}

pub fn decode_scorer(bytes: &[u8]) -> Result<(CheckpointHeader, ScorerParams)> {
    let (header, net) = decode(bytes)?;
    if header.kind != CheckpointKind::Scorer {
        return Err(Error::Format("checkpoint does not hold a scorer".into()));
    }
    let scorer = ScorerParams::from_network(net, header.query_dim, header.item_dim)?;
    Ok((header, scorer))
}

pub fn decode_cali(bytes: &[u8]) -> Result<(CheckpointHeader, CaliNetParams)> {
    let (header, net) = decode(bytes)?;
    if header.kind != CheckpointKind::CaliNet {
        return Err(Error::Format("checkpoint does not hold a calibration net".into()));
    }
    Ok((header, CaliNetParams::from_network(net)?))
}

pub fn write_scorer(path: &Path, params: &ScorerParams, version: u64, step: u64) -> Result<()> {
    std::fs::write(path, encode_scorer(params, version, step)?)?;
    Ok(())
}

pub fn read_scorer(path: &Path) -> Result<(CheckpointHeader, ScorerParams)> {
    decode_scorer(&std::fs::read(path)?)
}

pub fn write_cali(path: &Path, params: &CaliNetParams, version: u64, step: u64) -> Result<()> {
    std::fs::write(path, encode_cali(params, version, step)?)?;
    Ok(())
}

pub fn read_cali(path: &Path) -> Result<(CheckpointHeader, CaliNetParams)> {
    decode_cali(&std::fs::read(path)?)
}
