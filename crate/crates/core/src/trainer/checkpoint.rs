//! Single-file checkpoints: safetensors with a JSON metadata header.
//!
//! Tensors are stored as `model.<name>` (weights and buffers) and
//! `adam.{m,v}.<name>` (optimizer moments).

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::adam::{Adam, LossScaler};
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, SegmentationModel};

pub const FORMAT: &str = "pneumoseg-checkpoint";
pub const VERSION: &str = "1";

/// Progress counters saved alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Last completed epoch, 1-based.
    pub epoch: usize,
    /// Index of the last applied optimizer step, 0-based.
    pub step: usize,
    pub best_iou: f64,
    pub epochs_since_improvement: usize,
    pub adam_updates: u64,
    pub loss_scaler: Option<LossScaler>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: SegmentationModel,
    pub state: TrainState,
    pub optimizer: BTreeMap<String, Tensor>,
}

pub fn save_checkpoint(path: &Path, model: &SegmentationModel, adam: &Adam, state: &TrainState) -> Result<PathBuf> {
    let mut tensors: HashMap<String, Tensor> = model
        .params()
        .tensors()
        .into_iter()
        .map(|(k, v)| (format!("model.{k}"), v))
        .collect();
    tensors.extend(adam.state());
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("version".to_string(), VERSION.to_string());
    meta.insert("model_config".to_string(), serde_json::to_string(model.config())?);
    meta.insert("train_state".to_string(), serde_json::to_string(state)?);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write-then-rename keeps the previous file intact if serialisation fails.
    let tmp = path.with_extension("ckpt.tmp");
    safetensors::serialize_to_file(&tensors, Some(meta), &tmp).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| malformed(e.to_string()))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| malformed("missing metadata".into()))?;
    let field = |k: &str| meta.get(k).cloned().ok_or_else(|| malformed(format!("missing `{k}`")));
    if field("format")? != FORMAT {
        return Err(malformed(format!("not a {FORMAT} file")));
    }
    let version = field("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION.to_string(),
        });
    }
    let config: ModelConfig =
        serde_json::from_str(&field("model_config")?).map_err(|e| malformed(format!("model_config: {e}")))?;
    let state: TrainState =
        serde_json::from_str(&field("train_state")?).map_err(|e| malformed(format!("train_state: {e}")))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;

    // Weights come from the file, so skip any pretrained source.
    let model = build_model(&ModelConfig {
        pretrained_source: None,
        ..config
    })?;
    let mut weights = BTreeMap::new();
    let mut optimizer = BTreeMap::new();
    for (k, t) in tensors {
        if let Some(name) = k.strip_prefix("model.") {
            weights.insert(name.to_string(), t);
        } else if k.starts_with("adam.") {
            optimizer.insert(k, t);
        }
    }
    let expected = model.params().tensors().len();
    let loaded = model.params().load_from(&weights)?;
    if loaded.len() != expected {
        return Err(malformed(format!("{} of {expected} model tensors present", loaded.len())));
    }
    Ok(Checkpoint {
        model,
        state,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::adam::AdamConfig;

    fn state() -> TrainState {
        TrainState {
            epoch: 3,
            step: 11,
            best_iou: 0.4,
            epochs_since_improvement: 1,
            adam_updates: 12,
            loss_scaler: None,
        }
    }

    #[test]
    fn round_trip_restores_weights_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(&ModelConfig {
            seed: 4,
            ..ModelConfig::tiny(32)
        })
        .unwrap();
        let adam = Adam::new(AdamConfig::default(), model.params()).unwrap();
        let path = save_checkpoint(&dir.path().join("a.ckpt"), &model, &adam, &state()).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.state, state());
        assert_eq!(ck.model.config(), model.config());
        for (k, t) in model.params().tensors() {
            let a: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = ck.model.params().tensors()[&k].flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b, "{k}");
        }
        assert_eq!(ck.optimizer.len(), 2 * model.params().params().len());
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/x.ckpt")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("old.ckpt");
        let t: HashMap<String, Tensor> = HashMap::from([("x".to_string(), Tensor::new(&[1f32], &Device::Cpu).unwrap())]);
        let meta = HashMap::from([
            ("format".to_string(), FORMAT.to_string()),
            ("version".to_string(), "0".to_string()),
        ]);
        safetensors::serialize_to_file(&t, Some(meta), &path).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("v0") && msg.contains("v1"), "{msg}");
    }

    #[test]
    fn foreign_safetensors_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.safetensors");
        let t: HashMap<String, Tensor> = HashMap::from([("x".to_string(), Tensor::new(&[1f32], &Device::Cpu).unwrap())]);
        candle_core::safetensors::save(&t, &path).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
    }
}
