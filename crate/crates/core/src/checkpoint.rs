//! Language-neutral checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 8     | magic `LEAKMEMC`                           |
//! | 8     | `u64` header length `h`                    |
//! | h     | UTF-8 JSON [`Manifest`]                    |
//! | rest  | payload of IEEE-754 `f32` values           |
//!
//! Each manifest entry gives a tensor's name, row-major shape, dtype and
//! byte offset relative to the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::pipeline::Model;

pub const MAGIC: &[u8; 8] = b"LEAKMEMC";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Model,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub d_img: usize,
    /// Scalar counts per top-level parameter prefix.
    pub parameter_counts: BTreeMap<String, usize>,
    pub payload_bytes: usize,
    pub tensors: Vec<TensorEntry>,
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn parameter_counts(model: &Model) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for (name, t) in model.params.iter().chain(model.disc_params.iter()) {
        let prefix = name.split('.').next().unwrap_or(name).to_string();
        *counts.entry(prefix).or_insert(0) += t.numel();
    }
    counts
}

/// Serializes `model` with the run configuration it was built from.
pub fn encode(config: &RunConfig, model: &Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (group, store) in [
        (Group::Model, &model.params),
        (Group::Discriminator, &model.disc_params),
    ] {
        for (name, t) in store.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                group,
                shape: t.shape().to_vec(),
                dtype: DTYPE.into(),
                offset: payload.len(),
            });
            for &x in t.data() {
                payload.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        d_img: model.d_img,
        parameter_counts: parameter_counts(model),
        payload_bytes: payload.len(),
        tensors,
    };
    let header = serde_json::to_vec(&manifest).map_err(|e| Error::Contract(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses the container; `path` only labels diagnostics.
pub fn read_manifest<'a>(bytes: &'a [u8], path: &Path) -> Result<(Manifest, &'a [u8])> {
    if bytes.len() < 16 {
        return Err(ckpt_err(
            path,
            format!("file holds {} bytes, shorter than the 16-byte preamble", bytes.len()),
        ));
    }
    if &bytes[..8] != MAGIC {
        return Err(ckpt_err(path, "bad magic"));
    }
    let h = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[16..];
    if rest.len() < h {
        return Err(ckpt_err(
            path,
            format!("header truncated: expected {h} bytes, found {}", rest.len()),
        ));
    }
    let manifest: Manifest = serde_json::from_slice(&rest[..h])
        .map_err(|e| ckpt_err(path, format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ckpt_err(
            path,
            format!(
                "format version {} unsupported (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    let payload = &rest[h..];
    if payload.len() != manifest.payload_bytes {
        return Err(ckpt_err(
            path,
            format!(
                "payload truncated or padded: expected {} bytes, found {}",
                manifest.payload_bytes,
                payload.len()
            ),
        ));
    }
    Ok((manifest, payload))
}

fn fill(store: &mut ParamStore, entries: &[&TensorEntry], payload: &[u8], path: &Path) -> Result<()> {
    if entries.len() != store.len() {
        return Err(ckpt_err(
            path,
            format!("{} tensors in manifest, model expects {}", entries.len(), store.len()),
        ));
    }
    for e in entries {
        if e.dtype != DTYPE {
            return Err(ckpt_err(path, format!("`{}`: dtype {} unsupported", e.name, e.dtype)));
        }
        let id = store
            .id(&e.name)
            .ok_or_else(|| ckpt_err(path, format!("unknown tensor `{}`", e.name)))?;
        let t = store.get_mut(id);
        if t.shape() != e.shape.as_slice() {
            return Err(ckpt_err(
                path,
                format!("`{}`: shape {:?}, model expects {:?}", e.name, e.shape, t.shape()),
            ));
        }
        let end = e.offset + 4 * t.numel();
        let bytes = payload.get(e.offset..end).ok_or_else(|| {
            ckpt_err(
                path,
                format!("`{}`: bytes {}..{end} outside {}-byte payload", e.name, e.offset, payload.len()),
            )
        })?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    }
    Ok(())
}

/// Rebuilds the model described by a checkpoint.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(RunConfig, Model)> {
    let (manifest, payload) = read_manifest(bytes, path)?;
    let cfg = manifest.config;
    let mut model = Model::new(&cfg.model, cfg.train.flags, manifest.d_img, cfg.train.seed)
        .map_err(|e| ckpt_err(path, format!("config snapshot: {e}")))?;
    let pick = |g| manifest.tensors.iter().filter(|e| e.group == g).collect::<Vec<_>>();
    fill(&mut model.params, &pick(Group::Model), payload, path)?;
    fill(&mut model.disc_params, &pick(Group::Discriminator), payload, path)?;
    Ok((cfg, model))
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(path: &Path, config: &RunConfig, model: &Model) -> Result<()> {
    write_atomic(path, &encode(config, model)?)
}

pub fn load(path: &Path) -> Result<(RunConfig, Model)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
