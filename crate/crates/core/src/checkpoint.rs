//! On-disk model snapshots.
//!
//! Layout: 5-byte magic `MOCE1`, little-endian u32 header length, JSON
//! header (config, language list, tensor table), then raw little-endian f32
//! blobs in table order. Floats are stored single-precision to halve
//! checkpoint size; loading widens them back.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::tokenizer::build_vocab;

const MAGIC: &[u8; 5] = b"MOCE1";

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    languages: Vec<String>,
    tensors: Vec<TensorInfo>,
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.names().len());
    let mut offset = 0u64;
    for (name, p) in model.names().iter().zip(model.params()) {
        tensors.push(TensorInfo {
            name: name.clone(),
            shape: p.shape().to_vec(),
            offset,
        });
        offset += (p.len() * 4) as u64;
    }
    let header = Header {
        config: model.config.clone(),
        languages: model.vocab.languages().to_vec(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(10 + header_json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for p in model.params() {
        for &v in p.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    if bytes.len() < 9 || &bytes[..5] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let blob_start = 9 + header_len;
    if bytes.len() < blob_start {
        return Err(Error::Checkpoint(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[9..blob_start])?;
    let vocab = build_vocab(&header.languages)?;
    let mut model = build_model(&header.config, &vocab)?;
    if header.tensors.len() != model.names().len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} tensors in file, model wants {}",
            path.display(),
            header.tensors.len(),
            model.names().len()
        )));
    }
    let blob = &bytes[blob_start..];
    for info in &header.tensors {
        let expected = model
            .param(&info.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", info.name)))?;
        if expected.shape() != info.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {}: stored shape {:?} vs model shape {:?}",
                info.name,
                info.shape,
                expected.shape()
            )));
        }
        let n: usize = info.shape.iter().product();
        let start = info.offset as usize;
        let end = start + n * 4;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated blob for tensor {}",
                path.display(),
                info.name
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        model.set_param(&info.name, Tensor::from_vec(&info.shape, data))?;
    }
    Ok(model)
}

/// Element-wise mean of several checkpoints with identical structure.
pub fn average_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<Model> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no checkpoints to average".into()));
    }
    let mut avg = load_model(paths[0].as_ref())?;
    let scale = 1.0 / paths.len() as f64;
    for p in avg.params_mut() {
        *p = p.map(|v| v * scale);
    }
    for path in &paths[1..] {
        let m = load_model(path.as_ref())?;
        // structural identity: same tensors and vocabulary; the init seed
        // may legitimately differ between runs
        let same_shape = m.names() == avg.names()
            && m.params()
                .iter()
                .zip(avg.params())
                .all(|(a, b)| a.shape() == b.shape());
        if !same_shape || m.vocab.languages() != avg.vocab.languages() {
            return Err(Error::Checkpoint(format!(
                "{}: structure differs from the first checkpoint",
                path.as_ref().display()
            )));
        }
        for (a, b) in avg.params_mut().iter_mut().zip(m.params()) {
            a.add_assign_scaled(b, scale);
        }
    }
    Ok(avg)
}
