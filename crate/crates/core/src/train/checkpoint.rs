//! Checkpoint persistence: a JSON manifest (config, strategy, metrics,
//! tensor table) followed by one blob of little-endian f32 values
//! concatenated in manifest order, preceded by an 8-byte magic and a
//! format version. Round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochMetrics, TrainConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamRegistry};

const MAGIC: &[u8; 8] = b"MEMAUDCK";
const FORMAT_VERSION: u32 = 1;

/// Role a checkpoint is allowed to play downstream.
pub const ROLE_REFERENCE: &str = "reference";
pub const ROLE_FINETUNE: &str = "finetune";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    model_config: ModelConfig,
    train_config: TrainConfig,
    strategy: Option<String>,
    role: String,
    epoch: u32,
    metrics: Option<EpochMetrics>,
    tensors: Vec<TensorEntry>,
}

/// A parameter snapshot plus everything needed to reproduce or resume the
/// run that made it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub train_config: TrainConfig,
    pub strategy: Option<String>,
    pub role: String,
    pub epoch: u32,
    pub metrics: Option<EpochMetrics>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::with_capacity(self.model.params().len());
        let mut offset = 0u64;
        for (name, t) in self.model.params() {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel() as u64,
            });
            offset += t.numel() as u64;
        }
        let manifest = Manifest {
            model_config: self.model.config().clone(),
            train_config: self.train_config.clone(),
            strategy: self.strategy.clone(),
            role: self.role.clone(),
            epoch: self.epoch,
            metrics: self.metrics.clone(),
            tensors,
        };
        let manifest_bytes =
            serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;

        // Write to a sibling temp file and rename, so an interrupted run
        // never leaves a truncated checkpoint under the final name.
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = std::io::BufWriter::new(&mut f);
            w.write_all(MAGIC).map_err(|e| Error::io(&tmp, e))?;
            w.write_all(&FORMAT_VERSION.to_le_bytes())
                .map_err(|e| Error::io(&tmp, e))?;
            w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())
                .map_err(|e| Error::io(&tmp, e))?;
            w.write_all(&manifest_bytes).map_err(|e| Error::io(&tmp, e))?;
            for (_, t) in self.model.params() {
                for &v in t.data() {
                    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&tmp, e))?;
                }
            }
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format(format!(
                "{}: not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})",
                path.display()
            )));
        }
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let manifest_end = 20 + manifest_len;
        if bytes.len() < manifest_end {
            return Err(Error::Format(format!(
                "{}: truncated manifest",
                path.display()
            )));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[20..manifest_end])
            .map_err(|e| Error::Format(format!("{}: manifest: {e}", path.display())))?;

        let blob = &bytes[manifest_end..];
        let total: u64 = manifest.tensors.iter().map(|t| t.len).sum();
        if blob.len() != total as usize * 4 {
            return Err(Error::Format(format!(
                "{}: blob holds {} bytes, manifest expects {}",
                path.display(),
                blob.len(),
                total * 4
            )));
        }
        let mut params = ParamRegistry::new();
        let mut expect_offset = 0u64;
        for entry in &manifest.tensors {
            if entry.offset != expect_offset {
                return Err(Error::Format(format!(
                    "{}: tensor {} at offset {}, expected {}",
                    path.display(),
                    entry.name,
                    entry.offset,
                    expect_offset
                )));
            }
            let numel: usize = entry.shape.iter().product();
            if numel as u64 != entry.len {
                return Err(Error::Format(format!(
                    "{}: tensor {} shape {:?} disagrees with len {}",
                    path.display(),
                    entry.name,
                    entry.shape,
                    entry.len
                )));
            }
            let start = entry.offset as usize * 4;
            let data: Vec<f32> = blob[start..start + numel * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            params.insert(
                entry.name.clone(),
                Tensor::from_vec(entry.shape.clone(), data)?,
            );
            expect_offset += entry.len;
        }
        let model = Model::from_parts(manifest.model_config, params)?;
        Ok(Checkpoint {
            model,
            train_config: manifest.train_config,
            strategy: manifest.strategy,
            role: manifest.role,
            epoch: manifest.epoch,
            metrics: manifest.metrics,
        })
    }
}
