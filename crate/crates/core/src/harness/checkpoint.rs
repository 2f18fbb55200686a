//! Tensor container used for model checkpoints and feature stores.
//!
//! Layout, all integers little-endian:
//!
//! | bytes         | content                                   |
//! |---------------|-------------------------------------------|
//! | 0..8          | magic `DIFFREP\0`                         |
//! | 8..16         | `u64` length `H` of the JSON manifest     |
//! | 16..16+H      | UTF-8 JSON [`Manifest`]                   |
//! | 16+H..        | payload: every tensor as `f64` LE, packed |
//!
//! Each tensor entry records its byte offset into the payload, its length
//! and the SHA-256 of its bytes; the manifest also carries the SHA-256 of
//! the whole payload.

use std::fs;
use std::path::Path;

use diffrep_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ddpm::ScheduleParams;
use crate::error::{Error, Result};
use crate::unet::{DenoiserModel, UNetConfig};

pub const MAGIC: &[u8; 8] = b"DIFFREP\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Always `"f64le"`.
    pub dtype: String,
    pub offset: u64,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// `"model"` or `"features"`.
    pub kind: String,
    #[serde(default)]
    pub unet: Option<UNetConfig>,
    #[serde(default)]
    pub schedule: Option<ScheduleParams>,
    #[serde(default)]
    pub step: u64,
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serialize `tensors` with the manifest fields of `template`; the tensor
/// directory and checksums are filled in here.
pub fn encode(mut template: Manifest, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(tensors.iter().map(|(_, t)| t.numel() * 8).sum());
    template.tensors.clear();
    for (name, t) in tensors {
        let start = payload.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        template.tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64le".into(),
            offset: start as u64,
            bytes: (payload.len() - start) as u64,
            sha256: digest(&payload[start..]),
        });
    }
    template.version = FORMAT_VERSION;
    template.payload_sha256 = digest(&payload);
    let header = serde_json::to_vec(&template).map_err(|e| Error::Format {
        what: "manifest",
        reason: e.to_string(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse a container, verifying version, length and every checksum.
pub fn decode(bytes: &[u8]) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            needed: 16,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format {
            what: "container",
            reason: "bad magic bytes".into(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16u64.saturating_add(header_len);
    if (bytes.len() as u64) < header_end {
        return Err(Error::Truncated {
            needed: header_end,
            found: bytes.len() as u64,
        });
    }
    let header = &bytes[16..header_end as usize];
    let raw: serde_json::Value = serde_json::from_slice(header).map_err(|e| Error::Format {
        what: "manifest",
        reason: e.to_string(),
    })?;
    let version = raw
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .unwrap_or(0);
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::Version {
            found: version.min(u64::from(u32::MAX)) as u32,
            supported: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Format {
        what: "manifest",
        reason: e.to_string(),
    })?;
    let payload = &bytes[header_end as usize..];
    let needed = manifest
        .tensors
        .iter()
        .map(|e| e.offset + e.bytes)
        .max()
        .unwrap_or(0);
    if (payload.len() as u64) < needed {
        return Err(Error::Truncated {
            needed: header_end + needed,
            found: bytes.len() as u64,
        });
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.dtype != "f64le" || e.bytes != numel as u64 * 8 {
            return Err(Error::Format {
                what: "tensor entry",
                reason: format!("`{}` has inconsistent size or dtype", e.name),
            });
        }
        let slice = &payload[e.offset as usize..(e.offset + e.bytes) as usize];
        if digest(slice) != e.sha256 {
            return Err(Error::Checksum {
                tensor: format!(
                    "{} (payload bytes {}..{})",
                    e.name,
                    e.offset,
                    e.offset + e.bytes
                ),
            });
        }
        let data = slice
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)));
    }
    if digest(payload) != manifest.payload_sha256 {
        return Err(Error::PayloadChecksum);
    }
    Ok((manifest, tensors))
}

pub fn write_container(
    path: &Path,
    manifest: Manifest,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    let bytes = encode(manifest, tensors)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn empty_manifest(kind: &str) -> Manifest {
    Manifest {
        version: FORMAT_VERSION,
        kind: kind.into(),
        unet: None,
        schedule: None,
        step: 0,
        extra: serde_json::Value::Null,
        tensors: Vec::new(),
        payload_sha256: String::new(),
    }
}

/// A model read back from disk with its training metadata.
#[derive(Debug)]
pub struct LoadedModel {
    pub model: DenoiserModel,
    pub schedule: ScheduleParams,
    pub step: u64,
}

pub fn save_checkpoint(
    model: &DenoiserModel,
    schedule: &ScheduleParams,
    step: u64,
    path: &Path,
) -> Result<()> {
    let mut manifest = empty_manifest("model");
    manifest.unet = Some(model.config.clone());
    manifest.schedule = Some(schedule.clone());
    manifest.step = step;
    let tensors: Vec<(String, Tensor)> = model
        .params
        .iter()
        .map(|(s, t)| (s.name.clone(), t.clone()))
        .collect();
    write_container(path, manifest, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedModel> {
    let (manifest, tensors) = read_container(path)?;
    if manifest.kind != "model" {
        return Err(Error::Format {
            what: "checkpoint",
            reason: format!("holds {:?}, not a model", manifest.kind),
        });
    }
    let config = manifest.unet.ok_or_else(|| Error::Format {
        what: "checkpoint",
        reason: "no U-Net config".into(),
    })?;
    let model = DenoiserModel::from_tensors(&config, tensors)?;
    Ok(LoadedModel {
        model,
        schedule: manifest.schedule.unwrap_or_default(),
        step: manifest.step,
    })
}

/// Store named feature tensors plus labels (kept as an `f64` tensor) and
/// free-form metadata.
pub fn save_features(
    path: &Path,
    tensors: &[(String, Tensor)],
    labels: &[usize],
    extra: serde_json::Value,
) -> Result<()> {
    let mut manifest = empty_manifest("features");
    manifest.extra = extra;
    let mut all = tensors.to_vec();
    all.push((
        "labels".into(),
        Tensor::new([labels.len()], labels.iter().map(|&l| l as f64).collect()),
    ));
    write_container(path, manifest, &all)
}

/// Features written by [`save_features`]: tensors, labels, metadata.
pub fn load_features(
    path: &Path,
) -> Result<(Vec<(String, Tensor)>, Vec<usize>, serde_json::Value)> {
    let (manifest, mut tensors) = read_container(path)?;
    if manifest.kind != "features" {
        return Err(Error::Format {
            what: "feature store",
            reason: format!("holds {:?}, not features", manifest.kind),
        });
    }
    let pos = tensors
        .iter()
        .position(|(n, _)| n == "labels")
        .ok_or_else(|| Error::Format {
            what: "feature store",
            reason: "no labels tensor".into(),
        })?;
    let (_, labels) = tensors.remove(pos);
    let labels = labels.data().iter().map(|&v| v as usize).collect();
    Ok((tensors, labels, manifest.extra))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            (
                "a".into(),
                Tensor::new([2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]),
            ),
            ("b".into(), Tensor::new([3], vec![1e300, -2.0, 0.125])),
        ]
    }

    #[test]
    fn round_trip_is_bitwise() {
        let bytes = encode(empty_manifest("features"), &sample()).unwrap();
        let (m, t) = decode(&bytes).unwrap();
        assert_eq!(m.tensors.len(), 2);
        for ((na, ta), (nb, tb)) in sample().iter().zip(&t) {
            assert_eq!(na, nb);
            assert!(ta.bitwise_eq(tb));
        }
    }

    #[test]
    fn distinct_failures() {
        let bytes = encode(empty_manifest("features"), &sample()).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;

        let mut flipped = bytes.clone();
        let at = 16 + header_len + 8 * 4 + 3;
        flipped[at] ^= 1;
        match decode(&flipped) {
            Err(Error::Checksum { tensor }) => assert!(tensor.starts_with("b ")),
            other => panic!("{other:?}"),
        }

        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(decode(&bytes[..10]), Err(Error::Truncated { .. })));

        let text = String::from_utf8_lossy(&bytes[16..16 + header_len])
            .replace("\"version\":1", "\"version\":9");
        let mut future = bytes[..8].to_vec();
        future.extend_from_slice(&(text.len() as u64).to_le_bytes());
        future.extend_from_slice(text.as_bytes());
        future.extend_from_slice(&bytes[16 + header_len..]);
        assert!(matches!(
            decode(&future),
            Err(Error::Version { found: 9, .. })
        ));
    }
}
