//! Model checkpoints.
//!
//! Layout: a little-endian `u32` header length, a JSON header
//! (`version`, `layer_specs`, `seed`, `epoch`), then every parameter as a
//! little-endian `f32`, layer by layer, weights before biases.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::network::{validate_architecture, LayerSpec, ModelParams};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub layer_specs: Vec<LayerSpec>,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
}

/// Serialises parameters. Values are stored as `f32`.
pub fn encode_checkpoint(params: &ModelParams, seed: u64, epoch: usize) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        layer_specs: params.specs(),
        seed,
        epoch,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::InvalidState(e.to_string()))?;
    let flat = params.flatten();
    let mut out = Vec::with_capacity(4 + json.len() + 4 * flat.len());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in flat {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, ModelParams)> {
    let bad = |m: String| Error::format(path, m);
    if bytes.len() < 4 {
        return Err(bad("truncated checkpoint".into()));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let body = bytes.get(4..4 + hlen).ok_or_else(|| bad("truncated checkpoint header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| bad(format!("bad checkpoint header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {}", header.version)));
    }
    validate_architecture(&header.layer_specs).map_err(|e| bad(e.to_string()))?;
    let mut params = ModelParams::zeros(&header.layer_specs)?;
    let payload = &bytes[4 + hlen..];
    if payload.len() != 4 * params.num_params() {
        return Err(bad(format!(
            "payload holds {} bytes, architecture needs {}",
            payload.len(),
            4 * params.num_params()
        )));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(bad("checkpoint contains non-finite parameters".into()));
    }
    params.assign_flat(&flat)?;
    Ok((header, params))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, seed: u64, epoch: usize) -> Result<()> {
    let bytes = encode_checkpoint(params, seed, epoch)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{architecture, he_uniform};

    #[test]
    fn round_trip_is_exact() {
        let params = he_uniform(&architecture(3, 4, 5, 3), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &params, 9, 3).unwrap();
        let (h, back) = load_checkpoint(&p).unwrap();
        assert_eq!((h.seed, h.epoch), (9, 3));
        assert_eq!(back, params);
        assert_eq!(encode_checkpoint(&back, 9, 3).unwrap(), fs::read(&p).unwrap());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let params = he_uniform(&architecture(2, 2, 3, 3), 1).unwrap();
        let mut bytes = encode_checkpoint(&params, 1, 0).unwrap();
        bytes.pop();
        let err = decode_checkpoint(&bytes, Path::new("x.ckpt")).unwrap_err();
        assert!(err.to_string().contains("x.ckpt"));
        assert!(decode_checkpoint(&[1, 0], Path::new("y")).is_err());
    }
}
