//! Binary checkpoints: magic `IVAE1`, a little-endian `u64` header length, a
//! JSON header, then every parameter's values as little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::autodiff::{ParamGroup, Tensor};
use crate::data::Modality;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"IVAE1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub requires_grad: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub modalities: Vec<Modality>,
    pub seed: u64,
    pub schema_hash: String,
    pub params: Vec<ParamEntry>,
    /// Free-form run information (epoch, metric, version).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Stable hash of a modality list, used to match checkpoints and datasets.
pub fn schema_hash(modalities: &[Modality]) -> String {
    let json = serde_json::to_string(modalities).expect("modalities serialize");
    let h = json
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    format!("{h:016x}")
}

pub fn save(model: &Model, seed: u64, metadata: serde_json::Value, path: &Path) -> Result<()> {
    let params: Vec<ParamEntry> = model
        .params()
        .iter()
        .map(|(name, p)| ParamEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            group: p.group,
            requires_grad: p.requires_grad,
        })
        .collect();
    let header = Header {
        config: model.config().clone(),
        modalities: model.modalities().to_vec(),
        seed,
        schema_hash: schema_hash(model.modalities()),
        params,
        metadata,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, p) in model.params().iter() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<Header> {
    let mut r = BufReader::new(File::open(path)?);
    read_header_from(&mut r)
}

fn read_header_from<R: Read>(r: &mut R) -> Result<Header> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for a checkpoint".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an IVAE1 checkpoint".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    Ok(serde_json::from_slice(&json)?)
}

/// Rebuilds the model described by the header and loads its values.
pub fn load(path: &Path) -> Result<(Model, Header)> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header_from(&mut r)?;
    let mut model = Model::build(header.config.clone(), header.modalities.clone(), header.seed)?;
    let store = model.params_mut();
    if store.len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            header.params.len(),
            store.len()
        )));
    }
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; 8 * n];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated values for `{}`", entry.name)))?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let p = store
            .get(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", entry.name)))?;
        if p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "`{}` has shape {:?} in the checkpoint but {:?} in the model",
                entry.name,
                entry.shape,
                p.value.shape()
            )));
        }
        store.set(&entry.name, Tensor::new(entry.shape.clone(), data)?)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((model, header))
}
