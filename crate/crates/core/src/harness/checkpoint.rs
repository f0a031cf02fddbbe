//! Model checkpoints.
//!
//! ```text
//! "LMDC" | u32 version=1 | u32 manifest_len | manifest JSON
//! f64 LE tensor blob
//! u32 CRC32 of every preceding byte
//! ```
//!
//! The manifest lists every tensor with its byte offset into the blob and
//! its own CRC32, so corruption is reported at the tensor it hit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::write_atomic;
use crate::diffcore::{Architecture, ModelState, Param, ParamSet, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LMDC";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the blob.
    pub offset: u64,
    pub crc: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `stage1` or `stage2`.
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub arch: Architecture,
    pub ema_momentum: f64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub state: ModelState,
}

const GROUPS: [&str; 4] = ["student", "student", "teacher", "teacher"];

fn sets(state: &ModelState) -> [&ParamSet; 4] {
    [
        &state.encoder,
        &state.classifier,
        &state.teacher_encoder,
        &state.teacher_classifier,
    ]
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (group, set) in GROUPS.iter().zip(sets(&ck.state)) {
        for p in set.iter() {
            let bytes = tensor_bytes(&p.value);
            tensors.push(TensorEntry {
                name: format!("{group}.{}", p.name),
                shape: p.value.shape().to_vec(),
                offset: blob.len() as u64,
                crc: crc32fast::hash(&bytes),
            });
            blob.extend_from_slice(&bytes);
        }
    }
    let manifest = Manifest {
        stage: ck.stage.clone(),
        seed: ck.seed,
        config_hash: ck.config_hash.clone(),
        arch: ck.state.arch.clone(),
        ema_momentum: ck.state.ema_momentum,
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Validation(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blob.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parses header and manifest only.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(format_err(bytes.len(), "truncated checkpoint header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic, not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(4, format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let end = HEADER_LEN + len;
    if end + 4 > bytes.len() {
        return Err(format_err(8, format!("manifest length {len} exceeds file")));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..end])
        .map_err(|e| format_err(HEADER_LEN, format!("manifest: {e}")))?;
    Ok((manifest, end))
}

/// Decodes and checks every tensor CRC before the whole-file CRC, so a
/// flipped byte is reported at the tensor that contains it.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, blob_start) = read_manifest(bytes)?;
    let blob_end = bytes.len() - 4;
    let blob = &bytes[blob_start..blob_end];
    let mut values = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + 8 * n;
        if end > blob.len() {
            return Err(format_err(
                blob_start + start,
                format!("tensor `{}` runs past the blob", t.name),
            ));
        }
        let raw = &blob[start..end];
        let computed = crc32fast::hash(raw);
        if computed != t.crc {
            return Err(Error::Crc {
                offset: (blob_start + start) as u64,
                region: format!("tensor `{}`", t.name),
                stored: t.crc,
                computed,
            });
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push((t.name.clone(), Tensor::new(t.shape.clone(), data)?));
    }
    let stored = u32::from_le_bytes(bytes[blob_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..blob_end]);
    if stored != computed {
        return Err(Error::Crc {
            offset: 0,
            region: "header and manifest".into(),
            stored,
            computed,
        });
    }
    let mut template = ModelState::new(manifest.arch.clone(), 0, manifest.ema_momentum)?;
    fill_state(&mut template, values)?;
    Ok(Checkpoint {
        stage: manifest.stage,
        seed: manifest.seed,
        config_hash: manifest.config_hash,
        state: template,
    })
}

/// Copies named tensors into `state`; the first missing or mis-shaped
/// tensor is a shape error.
fn fill_state(state: &mut ModelState, values: Vec<(String, Tensor)>) -> Result<()> {
    let mut iter = values.into_iter();
    let targets: [&mut ParamSet; 4] = [
        &mut state.encoder,
        &mut state.classifier,
        &mut state.teacher_encoder,
        &mut state.teacher_classifier,
    ];
    for (group, set) in GROUPS.iter().zip(targets) {
        for p in set.params.iter_mut() {
            let want = format!("{group}.{}", p.name);
            let Some((name, t)) = iter.next() else {
                return Err(Error::Shape(format!("checkpoint is missing tensor `{want}`")));
            };
            if name != want || t.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "tensor `{want}` expects shape {:?}, checkpoint has `{name}` {:?}",
                    p.value.shape(),
                    t.shape()
                )));
            }
            *p = Param {
                name: p.name.clone(),
                value: t,
                grad: None,
            };
        }
    }
    if let Some((name, _)) = iter.next() {
        return Err(Error::Shape(format!("unexpected extra tensor `{name}`")));
    }
    Ok(())
}

/// Loads the checkpoint's tensors into a model of architecture `arch`.
pub fn load_into(ck: &Checkpoint, arch: &Architecture) -> Result<ModelState> {
    let mut state = ModelState::new(arch.clone(), 0, ck.state.ema_momentum)?;
    let values = sets(&ck.state)
        .into_iter()
        .zip(GROUPS)
        .flat_map(|(set, group)| {
            set.iter()
                .map(move |p| (format!("{group}.{}", p.name), p.value.clone()))
        })
        .collect();
    fill_state(&mut state, values)?;
    Ok(state)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
