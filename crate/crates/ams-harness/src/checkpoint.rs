//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic `AMSCKPT\x01`, a little-endian u64 header length, a
//! JSON header (format version, dtype, epoch, optimizer step, config
//! snapshot, name→shape table), then the raw little-endian tensor payloads
//! in the order the header lists them. Parameters are stored under their
//! visit names; Adam moments under `adam_m.<name>` / `adam_v.<name>`.

use crate::backbone::{Model, ModelConfig};
use crate::error::{HarnessError, Result};
use crate::optim::Adam;
use ams_core::real::{Dtype, Real};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"AMSCKPT\x01";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub epoch: usize,
    pub adam_step: usize,
    pub model: ModelConfig,
    /// Full run configuration snapshot (opaque here).
    pub run: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn write_values(out: &mut Vec<u8>, dtype: Dtype, values: &[f64]) {
    match dtype {
        Dtype::F64 => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F32 => {
            for v in values {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
}

fn read_values(bytes: &[u8], dtype: Dtype, count: usize, offset: &mut usize) -> Result<Vec<f64>> {
    let width = dtype.byte_width();
    let end = *offset + count * width;
    if end > bytes.len() {
        return Err(HarnessError::input("checkpoint payload truncated"));
    }
    let slice = &bytes[*offset..end];
    *offset = end;
    let values = match dtype {
        Dtype::F64 => slice
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        Dtype::F32 => slice
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect(),
    };
    Ok(values)
}

/// Serializes model parameters, optimizer moments and the config snapshot.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &mut Model<T>,
    optimizer: &Adam<T>,
    model_cfg: &ModelConfig,
    run_snapshot: serde_json::Value,
    epoch: usize,
) -> Result<()> {
    let params = model.export_params();
    let moments = optimizer.export_moments();

    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, shape, values) in &params {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
        });
        write_values(&mut payload, T::DTYPE, values);
    }
    for (name, m, v) in &moments {
        tensors.push(TensorEntry {
            name: format!("adam_m.{name}"),
            shape: vec![m.len()],
        });
        write_values(&mut payload, T::DTYPE, m);
        tensors.push(TensorEntry {
            name: format!("adam_v.{name}"),
            shape: vec![v.len()],
        });
        write_values(&mut payload, T::DTYPE, v);
    }

    let header = CheckpointHeader {
        format_version: 1,
        dtype: T::DTYPE.name().to_string(),
        epoch,
        adam_step: optimizer.step_count(),
        model: model_cfg.clone(),
        run: run_snapshot,
        tensors,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&payload)?;
    Ok(())
}

/// A parsed checkpoint: header plus name→(shape, values) tensors.
pub struct LoadedCheckpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(HarnessError::input(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + header_len {
        return Err(HarnessError::input("checkpoint header truncated"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])?;
    if header.format_version != 1 {
        return Err(HarnessError::input(format!(
            "unsupported checkpoint format version {}",
            header.format_version
        )));
    }
    let dtype = match header.dtype.as_str() {
        "f64" => Dtype::F64,
        "f32" => Dtype::F32,
        other => {
            return Err(HarnessError::input(format!(
                "unsupported checkpoint dtype '{other}'"
            )))
        }
    };
    let mut offset = 16 + header_len;
    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let values = read_values(&bytes, dtype, count, &mut offset)?;
        tensors.insert(entry.name.clone(), (entry.shape.clone(), values));
    }
    Ok(LoadedCheckpoint { header, tensors })
}

impl LoadedCheckpoint {
    /// Rebuilds a model (and optimizer moments) from this checkpoint.
    pub fn restore<T: Real>(&self) -> Result<(Model<T>, Adam<T>)> {
        if T::DTYPE.name() != self.header.dtype {
            return Err(HarnessError::input(format!(
                "checkpoint dtype {} does not match requested precision {}",
                self.header.dtype,
                T::DTYPE.name()
            )));
        }
        let mut rng = crate::rng::seeded(0);
        let mut model = Model::<T>::new(&self.header.model, &mut rng)?;
        let params: BTreeMap<String, (Vec<usize>, Vec<f64>)> = self
            .tensors
            .iter()
            .filter(|(name, _)| !name.starts_with("adam_m.") && !name.starts_with("adam_v."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        model.import_params(&params)?;

        let mut adam = Adam::<T>::new(0.0);
        let mut moments = Vec::new();
        for (name, _) in params.iter() {
            let m = self.tensors.get(&format!("adam_m.{name}"));
            let v = self.tensors.get(&format!("adam_v.{name}"));
            if let (Some((_, m)), Some((_, v))) = (m, v) {
                moments.push((name.clone(), m.clone(), v.clone()));
            }
        }
        if !moments.is_empty() {
            // Moments must follow visit order, not BTreeMap order.
            let mut ordered = Vec::new();
            model.visit_params(&mut |p| {
                if let Some(pos) = moments.iter().position(|(n, _, _)| *n == p.name) {
                    ordered.push(moments[pos].clone());
                }
            });
            adam.import_moments(self.header.adam_step, ordered);
        }
        Ok((model, adam))
    }
}
