//! On-disk formats: stack bundles (a directory of raw little-endian slices
//! plus a JSON manifest) and network checkpoints (a JSON header followed by
//! little-endian f32 weight blobs).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec, ParamStore, Tensor};
use crate::stacklab::{CardiacStack, Image, LabelMask, Phase};

pub const BUNDLE_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"CPROPCKP";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaseIndex {
    Known(i32),
    Unknown(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub rows: usize,
    pub cols: usize,
    pub slices: usize,
    /// mm per pixel, (row, col)
    pub spacing: [f64; 2],
    pub thickness: f64,
    pub phase: Phase,
    /// Slice index of the base, `-1` when every slice is below it, or "unknown".
    pub base_index: BaseIndex,
    pub byte_order: String,
    pub has_masks: bool,
}

pub fn slice_file(index: usize) -> String {
    format!("slice_{index:03}.f32")
}

pub fn mask_file(index: usize) -> String {
    format!("mask_{index:03}.u8")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_sized(path: &Path, expected: u64, dir: &Path, index: usize) -> Result<Vec<u8>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingSlice {
                dir: dir.to_path_buf(),
                index,
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.len() as u64 != expected {
        return Err(Error::FileSize {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

/// Writes a stack as a bundle directory, creating it if needed.
pub fn save_bundle(stack: &CardiacStack, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (rows, cols) = stack.dims();
    let manifest = BundleManifest {
        format_version: BUNDLE_VERSION,
        rows,
        cols,
        slices: stack.len(),
        spacing: stack.spacing,
        thickness: stack.thickness,
        phase: stack.phase,
        base_index: match stack.base_index() {
            Some(b) => BaseIndex::Known(b),
            None => BaseIndex::Unknown("unknown".into()),
        },
        byte_order: "little-endian".into(),
        has_masks: stack.masks().is_some(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST), text.as_bytes())?;
    for (i, s) in stack.slices().iter().enumerate() {
        let bytes: Vec<u8> = s.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        write_file(&dir.join(slice_file(i)), &bytes)?;
    }
    if let Some(masks) = stack.masks() {
        for (i, m) in masks.iter().enumerate() {
            write_file(&dir.join(mask_file(i)), m.codes())?;
        }
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<BundleManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: BundleManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if m.format_version != BUNDLE_VERSION {
        return Err(Error::Version {
            found: m.format_version,
            expected: BUNDLE_VERSION,
        });
    }
    if m.byte_order != "little-endian" {
        return Err(Error::Format {
            path,
            detail: format!("unsupported byte order `{}`", m.byte_order),
        });
    }
    if let BaseIndex::Unknown(s) = &m.base_index {
        if s != "unknown" {
            return Err(Error::Format {
                path,
                detail: format!("base index must be an integer or \"unknown\", got `{s}`"),
            });
        }
    }
    Ok(m)
}

/// Reads mask files `mask_000.u8 ...` for `n` slices of `rows x cols`.
pub fn load_masks(dir: &Path, n: usize, rows: usize, cols: usize) -> Result<Vec<LabelMask>> {
    (0..n)
        .map(|i| {
            let path = dir.join(mask_file(i));
            let bytes = read_sized(&path, (rows * cols) as u64, dir, i)?;
            LabelMask::new(rows, cols, bytes).map_err(|e| Error::Format {
                path,
                detail: e.to_string(),
            })
        })
        .collect()
}

pub fn load_bundle(dir: &Path) -> Result<CardiacStack> {
    let m = load_manifest(dir)?;
    let px = m.rows * m.cols;
    let mut slices = Vec::with_capacity(m.slices);
    for i in 0..m.slices {
        let bytes = read_sized(&dir.join(slice_file(i)), (px * 4) as u64, dir, i)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        slices.push(Image::new(m.rows, m.cols, data)?);
    }
    let masks = if m.has_masks {
        Some(load_masks(dir, m.slices, m.rows, m.cols)?)
    } else {
        None
    };
    let base = match m.base_index {
        BaseIndex::Known(b) => Some(b),
        BaseIndex::Unknown(_) => None,
    };
    CardiacStack::new(slices, m.spacing, m.thickness, m.phase, base, masks)
}

/// Writes masks alone as `mask_000.u8 ...` into `dir`.
pub fn save_masks(masks: &[LabelMask], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, m) in masks.iter().enumerate() {
        write_file(&dir.join(mask_file(i)), m.codes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub width_multiplier: f64,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Epoch (0-based) whose weights these are.
    pub epoch: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in values from the start of the blob section.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    spec: NetworkSpec,
    meta: TrainingMeta,
    blobs: Vec<BlobEntry>,
}

/// A network spec with its weights, as stored on disk.
///
/// Weights are held at f32 precision so that a checkpoint behaves the same
/// in memory as after a save/load round trip.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub meta: TrainingMeta,
}

fn quantize(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

impl Checkpoint {
    pub fn new(spec: NetworkSpec, params: &ParamStore, meta: TrainingMeta) -> Self {
        let params = ParamStore {
            params: params.params.iter().map(|(k, v)| (k.clone(), quantize(v))).collect(),
            buffers: params.buffers.iter().map(|(k, v)| (k.clone(), quantize(v))).collect(),
        };
        Checkpoint { spec, params, meta }
    }

    pub fn network(&self) -> Result<Network> {
        Network::with_params(self.spec.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let infos = self.spec.parameters();
        let mut blobs = Vec::with_capacity(infos.len());
        let mut payload = Vec::new();
        let mut offset = 0;
        for info in &infos {
            let t = self.params.get(&info.name).expect("store matches spec");
            blobs.push(BlobEntry {
                name: info.name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
            payload.extend(t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()));
        }
        let header = CheckpointHeader {
            spec: self.spec.clone(),
            meta: self.meta.clone(),
            blobs,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < header_len {
            return Err(bad("header truncated"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..header_len]).map_err(|e| bad(&e.to_string()))?;
        let payload = &body[header_len..];
        header.spec.validate()?;

        let mut params = ParamStore::default();
        for info in header.spec.parameters() {
            let mut entries = header.blobs.iter().filter(|b| b.name == info.name);
            let entry = entries
                .next()
                .ok_or_else(|| Error::MissingBlob(info.name.clone()))?;
            if entries.next().is_some() {
                return Err(bad(&format!("duplicate blob `{}`", info.name)));
            }
            if entry.shape != info.shape {
                return Err(Error::Shape {
                    location: format!("checkpoint blob `{}`", info.name),
                    expected: info.shape.clone(),
                    actual: entry.shape.clone(),
                });
            }
            let n: usize = info.shape.iter().product();
            let start = entry.offset * 4;
            let available = payload.len().saturating_sub(start) / 4;
            if available < n {
                return Err(Error::TruncatedBlob {
                    name: info.name.clone(),
                    expected: n,
                    actual: available,
                });
            }
            let data: Vec<f64> = payload[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(info.shape.clone(), data)?;
            if info.trainable {
                params.params.insert(info.name, t);
            } else {
                params.buffers.insert(info.name, t);
            }
        }
        if header.blobs.len() != params.params.len() + params.buffers.len() {
            return Err(bad("checkpoint holds blobs the spec does not declare"));
        }
        Ok(Checkpoint {
            spec: header.spec,
            params,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

/// Reads a JSON document into `T`.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: PathBuf::from(path),
        detail: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    write_file(path, text.as_bytes())
}
