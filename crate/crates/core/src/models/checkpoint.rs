use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, CtrModel, FeatureSchema, ModelConfig};
use crate::autodiff::Tensor;
use crate::params::GroupTag;
use crate::{Error, Result};

/// First bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOELORA1";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    tag: GroupTag,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: FeatureSchema,
    config: ModelConfig,
    seed: u64,
    params: Vec<Entry>,
}

/// Writes magic, a little-endian `u64` header length, a JSON header, then
/// every parameter's values as little-endian `f64` in header order.
pub fn save_checkpoint(model: &CtrModel, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        schema: model.schema.clone(),
        config: model.config.clone(),
        seed: model.seed,
        params: model
            .params
            .iter()
            .map(|(_, p)| Entry { name: p.name.clone(), tag: p.tag, shape: p.value.shape().to_vec(), trainable: p.trainable })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, p) in model.params.iter() {
        out.write_all(&p.value.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Rebuilds the model from its recorded schema, config and seed, then
/// overwrites every parameter with the stored bytes.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CtrModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = build_model(&header.schema, &header.config, header.seed)?;
    if header.params.len() != model.params.len() {
        return Err(bad("parameter count does not match the recorded architecture"));
    }
    let mut data = &bytes[16 + len..];
    for entry in &header.params {
        let id = model.params.id(&entry.name).ok_or_else(|| bad(&format!("unknown parameter {}", entry.name)))?;
        let p = model.params.get(id);
        if p.tag != entry.tag || p.value.shape() != entry.shape.as_slice() {
            return Err(bad(&format!("parameter {} has a different tag or shape", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        if data.len() < n * 8 {
            return Err(bad("truncated parameter data"));
        }
        let values = data[..n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        data = &data[n * 8..];
        *model.params.value_mut(id) = Tensor::new(entry.shape.clone(), values)?;
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after parameter data"));
    }
    for entry in &header.params {
        let id = model.params.id(&entry.name).expect("checked above");
        model.params.set_trainable_id(id, entry.trainable);
    }
    Ok(model)
}
