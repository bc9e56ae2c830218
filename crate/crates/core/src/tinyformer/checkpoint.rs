//! On-disk checkpoints.
//!
//! ```text
//! <dir>/model.json            model config, tokenizer, base checksum
//! <dir>/adapters/manifest.json rank, targets, layer map
//! <dir>/adapters/<layer>_<target>_{a,b}.bin
//! ```
//!
//! Base weights are regenerated from the config seed and verified against
//! the stored checksum, so adapters are the only weights written.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::lora::{AdaptedModel, LoraAdapter, LoraConfig, Target, TargetId};
use super::matrix::Matrix;
use super::model::{init_model, ModelConfig};
use super::tokenizer::CharTokenizer;
use super::TinyformerError;
use crate::tensor_io::{self, Array};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    config: ModelConfig,
    tokenizer: CharTokenizer,
    base_checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterManifest {
    pub format_version: u32,
    pub rank: usize,
    pub dropout: f64,
    pub scale: f64,
    pub targets: Vec<Target>,
    pub d_model: usize,
    pub layers: Vec<AdapterEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub layer: usize,
    pub target: Target,
    pub a: String,
    pub b: String,
}

fn io_err(path: &Path, e: std::io::Error) -> TinyformerError {
    TinyformerError::Checkpoint(format!("{}: {e}", path.display()))
}

fn to_array(m: &Matrix) -> Array {
    Array::new(
        vec![m.rows(), m.cols()],
        m.data().iter().map(|&v| v as f32).collect(),
    )
}

fn from_array(a: Array, path: &Path) -> Result<Matrix, TinyformerError> {
    if a.shape.len() != 2 {
        return Err(TinyformerError::Checkpoint(format!(
            "{}: expected a 2-d array, found shape {:?}",
            path.display(),
            a.shape
        )));
    }
    Ok(Matrix::from_vec(
        a.shape[0],
        a.shape[1],
        a.values.into_iter().map(f64::from).collect(),
    ))
}

pub fn save_checkpoint(
    dir: &Path,
    model: &AdaptedModel,
    tokenizer: &CharTokenizer,
) -> Result<(), TinyformerError> {
    let adapter_dir = dir.join("adapters");
    fs::create_dir_all(&adapter_dir).map_err(|e| io_err(&adapter_dir, e))?;
    let base = model.base();
    let model_file = ModelFile {
        format_version: FORMAT_VERSION,
        config: base.config().clone(),
        tokenizer: tokenizer.clone(),
        base_checksum: base.checksum(),
    };
    let path = dir.join("model.json");
    fs::write(
        &path,
        serde_json::to_vec_pretty(&model_file).expect("serializable"),
    )
    .map_err(|e| io_err(&path, e))?;

    let cfg = model.lora_config();
    let mut layers = Vec::new();
    for adapter in model.adapters() {
        let TargetId { layer, target } = adapter.attached_to;
        let a_name = format!("{layer}_{target}_a.bin");
        let b_name = format!("{layer}_{target}_b.bin");
        tensor_io::write(&adapter_dir.join(&a_name), &to_array(&adapter.a))?;
        tensor_io::write(&adapter_dir.join(&b_name), &to_array(&adapter.b))?;
        layers.push(AdapterEntry {
            layer,
            target,
            a: a_name,
            b: b_name,
        });
    }
    let manifest = AdapterManifest {
        format_version: FORMAT_VERSION,
        rank: cfg.rank,
        dropout: cfg.dropout,
        scale: cfg.scale,
        targets: cfg.targets.clone(),
        d_model: base.config().d_model,
        layers,
    };
    let path = adapter_dir.join("manifest.json");
    fs::write(
        &path,
        serde_json::to_vec_pretty(&manifest).expect("serializable"),
    )
    .map_err(|e| io_err(&path, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(AdaptedModel, CharTokenizer), TinyformerError> {
    let path = dir.join("model.json");
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    let model_file: ModelFile = serde_json::from_slice(&bytes)
        .map_err(|e| TinyformerError::Checkpoint(format!("{}: {e}", path.display())))?;
    let base = init_model(&model_file.config)?;
    if base.checksum() != model_file.base_checksum {
        return Err(TinyformerError::Checkpoint(
            "regenerated base weights do not match the stored checksum".into(),
        ));
    }

    let adapter_dir = dir.join("adapters");
    let path = adapter_dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    let manifest: AdapterManifest = serde_json::from_slice(&bytes)
        .map_err(|e| TinyformerError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut adapters = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let a_path = adapter_dir.join(&entry.a);
        let b_path = adapter_dir.join(&entry.b);
        adapters.push(LoraAdapter {
            a: from_array(tensor_io::read(&a_path)?, &a_path)?,
            b: from_array(tensor_io::read(&b_path)?, &b_path)?,
            attached_to: TargetId {
                layer: entry.layer,
                target: entry.target,
            },
        });
    }
    let config = LoraConfig {
        rank: manifest.rank,
        dropout: manifest.dropout,
        targets: manifest.targets.clone(),
        scale: manifest.scale,
        seed: 0,
    };
    Ok((
        AdaptedModel::from_parts(base, config, adapters)?,
        model_file.tokenizer,
    ))
}
