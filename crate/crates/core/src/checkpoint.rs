//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `MVCLCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then the
//! raw little-endian `f64` data of every tensor in header order. The header
//! holds the run metadata and the `(name, shape)` list; tensor names
//! (`frontal.*`, `lateral.*`, `merge.*`) are the transfer contract.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, MultiviewModel, Parameters, SingleViewModel};
use crate::training::EpochRecord;
use crate::view::View;

const MAGIC: &[u8; 8] = b"MVCLCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "view")]
pub enum ModelKind {
    Multiview,
    SingleView(View),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub architecture: ArchitectureSpec,
    /// Epoch the parameters were taken from.
    pub epoch: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    metadata: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn write<M: Parameters>(path: &Path, meta: &CheckpointMeta, model: &M) -> Result<()> {
    let tensors = model.named_tensors();
    let header = Header {
        metadata: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec_pretty(&header)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for (_, _, values) in &tensors {
        for v in values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Metadata plus every tensor as `(name, shape, values)`.
pub fn read(path: &Path) -> Result<(CheckpointMeta, Vec<(String, Vec<usize>, Vec<f64>)>)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint archive", path.display())));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            input.read_exact(&mut buf).map_err(|_| {
                Error::Checkpoint(format!("archive truncated inside tensor `{}`", entry.name))
            })?;
            values.push(f64::from_le_bytes(buf));
        }
        tensors.push((entry.name, entry.shape, values));
    }
    Ok((header.metadata, tensors))
}

/// Overwrites every parameter of `model` from `tensors`; names and shapes
/// must match exactly and nothing may be left over.
pub fn load_into<M: Parameters>(model: &mut M, tensors: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<()> {
    let mut by_name: HashMap<String, (Vec<usize>, Vec<f64>)> =
        tensors.into_iter().map(|(n, s, v)| (n, (s, v))).collect();
    let mut failure = None;
    model.visit_mut(&mut |name, shape, values| {
        if failure.is_some() {
            return;
        }
        match by_name.remove(name) {
            Some((s, v)) if s == shape => values.copy_from_slice(&v),
            Some((s, _)) => {
                failure = Some(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {s:?}, model expects {shape:?}"
                )))
            }
            None => failure = Some(Error::Checkpoint(format!("tensor `{name}` missing from archive"))),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = by_name.keys().min() {
        return Err(Error::Checkpoint(format!("archive has unexpected tensor `{extra}`")));
    }
    Ok(())
}

fn skeleton_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

pub fn load_multiview(path: &Path) -> Result<(MultiviewModel, CheckpointMeta)> {
    let (meta, tensors) = read(path)?;
    if meta.kind != ModelKind::Multiview {
        return Err(Error::Checkpoint(format!("{} holds a {:?} model", path.display(), meta.kind)));
    }
    let mut model = MultiviewModel::new(meta.architecture.clone(), &mut skeleton_rng())?;
    load_into(&mut model, tensors)?;
    Ok((model, meta))
}

pub fn load_single_view(path: &Path) -> Result<(SingleViewModel, CheckpointMeta)> {
    let (meta, tensors) = read(path)?;
    let ModelKind::SingleView(view) = meta.kind else {
        return Err(Error::Checkpoint(format!("{} holds a multiview model", path.display())));
    };
    let mut model = SingleViewModel::new(meta.architecture.clone(), view, &mut skeleton_rng())?;
    load_into(&mut model, tensors)?;
    Ok((model, meta))
}
