//! Checkpoint archive: magic bytes, a format version, a JSON header with the
//! resolved configuration and the parameter table, then every parameter as
//! little-endian `f64` in header order.

use std::io::{Read, Write};
use std::path::Path;

use medmatting_nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{MattingError, Result};

use super::config::TrainConfig;
use super::model::MedicalMatting;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MEDMATCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    /// Epochs completed when the archive was written.
    epoch: usize,
    params: Vec<(String, Vec<usize>)>,
}

pub fn write_checkpoint<W: Write>(mut out: W, model: &MedicalMatting, config: &TrainConfig, epoch: usize) -> Result<()> {
    let header = Header {
        config: config.clone(),
        epoch,
        params: model
            .store
            .iter()
            .map(|(name, t)| (name.to_string(), t.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, t) in model.store.iter() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// The model, its configuration and the completed epoch count.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(MedicalMatting, TrainConfig, usize)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(MattingError::Format("not a checkpoint archive".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(MattingError::Version {
            found: version.to_string(),
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut store = ParamStore::new();
    let mut buf = [0u8; 8];
    for (name, shape) in header.params {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        store.insert(name, Tensor::new(&shape, data)?)?;
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(MattingError::Format(format!("{} trailing bytes in checkpoint", rest.len())));
    }
    let model = MedicalMatting::from_params(&header.config, store)?;
    Ok((model, header.config, header.epoch))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &MedicalMatting, config: &TrainConfig, epoch: usize) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(file, model, config, epoch)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MedicalMatting, TrainConfig, usize)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => MattingError::NotFound(path.to_path_buf()),
        _ => e.into(),
    })?;
    read_checkpoint(std::io::BufReader::new(file))
}
