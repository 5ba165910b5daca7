//! Checkpoints: raw little-endian f32 parameters plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::network::{Network, ParamsSnapshot};
use super::spec::ConvNetSpec;
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub spec: ConvNetSpec,
    pub seed: u64,
    pub step: u64,
    /// Content hash of the stored (f32) parameters.
    pub hash: String,
    pub spec_hash: String,
    pub num_params: usize,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("params"), base.with_extension("json"))
}

/// Write `<base>.params` and `<base>.json`. Parameters are stored as f32.
pub fn save_checkpoint<F: Real>(
    base: &Path,
    net: &Network<F>,
    seed: u64,
    step: u64,
) -> Result<CheckpointManifest> {
    let (params_path, manifest_path) = paths(base);
    let snap32: ParamsSnapshot<f32> = net.snapshot().cast();
    let mut bytes = Vec::with_capacity(snap32.values().len() * 4);
    for v in snap32.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let manifest = CheckpointManifest {
        spec: net.spec().clone(),
        seed,
        step,
        hash: snap32.content_hash(),
        spec_hash: net.spec_hash().to_string(),
        num_params: snap32.values().len(),
    };
    if let Some(dir) = base.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&params_path, bytes).map_err(|e| Error::io(&params_path, e))?;
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(base: &Path) -> Result<(CheckpointManifest, ParamsSnapshot<f32>)> {
    let (params_path, manifest_path) = paths(base);
    let manifest: CheckpointManifest = serde_json::from_slice(
        &fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
    )?;
    let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    if bytes.len() != manifest.num_params * 4 {
        return Err(Error::format(
            &params_path,
            format!(
                "{} bytes for {} parameters",
                bytes.len(),
                manifest.num_params
            ),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if manifest.spec.hash() != manifest.spec_hash {
        return Err(Error::SpecMismatch {
            expected: manifest.spec.hash(),
            found: manifest.spec_hash.clone(),
        });
    }
    let snap = ParamsSnapshot::new(manifest.spec_hash.clone(), values);
    if snap.content_hash() != manifest.hash {
        return Err(Error::format(&params_path, "parameter hash does not match manifest"));
    }
    Ok((manifest, snap))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ckpt/source");
        let spec = ConvNetSpec::with_widths([1, 28, 28], [4, 4, 8], 10);
        let net = Network::<f32>::build(spec.clone(), 5).unwrap();
        let m = save_checkpoint(&base, &net, 5, 100).unwrap();
        let (m2, snap) = load_checkpoint(&base).unwrap();
        assert_eq!(m, m2);
        assert_eq!(snap, net.snapshot());
        let restored = Network::from_snapshot(spec, &snap).unwrap();
        assert_eq!(restored.params(), net.params());
    }

    #[test]
    fn corrupted_params_detected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("c");
        let net = Network::<f32>::build(ConvNetSpec::with_widths([1, 28, 28], [4, 4, 8], 10), 1).unwrap();
        save_checkpoint(&base, &net, 1, 0).unwrap();
        let p = base.with_extension("params");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&p, bytes).unwrap();
        assert!(load_checkpoint(&base).is_err());
    }
}
