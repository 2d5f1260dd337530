use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{EpochMetrics, Result, TrainConfig, TrainerError};
use crate::augment::Normalization;
use crate::backbones::{build_model_for_classes, BackboneSpec, Model, ModelOptions};

const MAGIC: &[u8; 8] = b"CARIDCKP";
/// Current on-disk format. Readers refuse any other value.
pub const FORMAT_VERSION: u32 = 1;
/// File names written by [`Checkpoint::export`].
pub const EXPORT_WEIGHTS: &str = "model.safetensors";
pub const EXPORT_META: &str = "model.json";

/// Everything besides the weights needed to rebuild and serve a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: BackboneSpec,
    pub class_names: Vec<String>,
    pub normalization: Normalization,
    pub input_size: usize,
    pub dropout_rate: f64,
    pub config: Option<TrainConfig>,
    /// Metrics of the epoch these weights come from.
    pub metrics: Option<EpochMetrics>,
    /// `<backbone>-<weight checksum>`.
    pub model_version: String,
    /// Hex CRC-32 of the safetensors payload.
    pub payload_crc32: String,
}

/// Weights plus metadata, held in memory.
#[derive(Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl std::fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Checkpoint")
            .field("meta", &self.meta)
            .field("tensors", &self.tensors.len())
            .finish()
    }
}

fn corrupt(msg: impl Into<String>) -> TrainerError {
    TrainerError::CorruptCheckpoint(msg.into())
}

fn payload(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let views: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    safetensors::serialize(views, None).map_err(|e| TrainerError::InvalidConfig(format!("cannot serialize weights: {e}")))
}

fn digest(bytes: &[u8]) -> String {
    format!("{:08x}", crc32fast::hash(bytes))
}

impl Checkpoint {
    /// Snapshots `model` (all parameters and buffers).
    pub fn capture(
        model: &Model,
        class_names: &[String],
        normalization: Normalization,
        config: Option<&TrainConfig>,
        metrics: Option<&EpochMetrics>,
    ) -> Result<Self> {
        if class_names.len() != model.num_classes() {
            return Err(TrainerError::ClassMismatch {
                model: model.num_classes(),
                data: class_names.len(),
            });
        }
        let tensors = model.state_dict()?;
        let crc = digest(&payload(&tensors)?);
        Ok(Self {
            meta: CheckpointMeta {
                spec: model.spec().clone(),
                class_names: class_names.to_vec(),
                normalization,
                input_size: model.input_size(),
                dropout_rate: model.head().dropout(),
                config: config.cloned(),
                metrics: metrics.cloned(),
                model_version: format!("{}-{crc}", model.spec().name),
                payload_crc32: crc,
            },
            tensors,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = payload(&self.tensors)?;
        let mut meta = self.meta.clone();
        meta.payload_crc32 = digest(&body);
        let meta = serde_json::to_vec(&meta).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(body.len() + meta.len() + 28);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rest = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if rest.len() < n {
                return Err(corrupt(format!("truncated while reading {what}")));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        if take(8, "magic")? != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(TrainerError::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let meta_len = u64::from_le_bytes(take(8, "metadata length")?.try_into().unwrap()) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(take(meta_len, "metadata")?)
            .map_err(|e| corrupt(format!("metadata: {e}")))?;
        let body_len = u64::from_le_bytes(take(8, "payload length")?.try_into().unwrap()) as usize;
        let body = take(body_len, "weights")?;
        if !rest.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", rest.len())));
        }
        if digest(body) != meta.payload_crc32 {
            return Err(corrupt("weight payload does not match its digest"));
        }
        let mut tensors: Vec<(String, Tensor)> = candle_core::safetensors::load_buffer(body, &Device::Cpu)
            .map_err(|e| corrupt(format!("weights: {e}")))?
            .into_iter()
            .collect();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self { meta, tensors })
    }

    /// Writes atomically (temp file in the same directory, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| TrainerError::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Writes a plain safetensors file and its metadata as JSON into `dir`,
    /// for consumers that do not read the checkpoint container.
    pub fn export(&self, dir: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let body = payload(&self.tensors)?;
        let mut meta = self.meta.clone();
        meta.payload_crc32 = digest(&body);
        let weights = dir.join(EXPORT_WEIGHTS);
        let meta_path = dir.join(EXPORT_META);
        std::fs::write(&weights, &body)?;
        let json = serde_json::to_vec_pretty(&meta).map_err(|e| corrupt(e.to_string()))?;
        std::fs::write(&meta_path, json)?;
        Ok((weights, meta_path))
    }

    /// Rebuilds the model (no pretrained download; weights come from here).
    pub fn build_model(&self) -> Result<Model> {
        let mut spec = self.meta.spec.clone();
        spec.pretrained = false;
        let opts = ModelOptions {
            input_size: Some(self.meta.input_size),
            ..ModelOptions::default()
        };
        let mut model = build_model_for_classes(&spec, &self.meta.class_names, self.meta.dropout_rate, &opts)?;
        // weights are restored below; keep the recorded provenance flag
        model.set_pretrained_flag(self.meta.spec.pretrained);
        let map: HashMap<String, Tensor> = self.tensors.iter().cloned().collect();
        model.load_state(&map)?;
        Ok(model)
    }
}

/// Snapshots `model` and writes it to `path`.
pub fn save_checkpoint(
    model: &Model,
    class_names: &[String],
    normalization: Normalization,
    config: Option<&TrainConfig>,
    metrics: Option<&EpochMetrics>,
    path: &Path,
) -> Result<CheckpointMeta> {
    let ckpt = Checkpoint::capture(model, class_names, normalization, config, metrics)?;
    ckpt.save(path)?;
    Ok(ckpt.meta)
}

/// Reads a checkpoint and rebuilds its model.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.build_model()?;
    Ok((model, ckpt.meta))
}
