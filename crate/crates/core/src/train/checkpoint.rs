//! Single-file checkpoints: parameters, optimizer moments, configs,
//! vocabulary and RNG state.
//!
//! Tensors are stored as safetensors; everything else is one JSON document
//! under a single metadata key, so the file bytes are a pure function of the
//! training state.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWParams};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{GroundingModel, ModelConfig, Vocab};

pub const CHECKPOINT_FORMAT: u32 = 1;
const META_KEY: &str = "pathground";
const PARAM: &str = "param.";
const ADAM_M: &str = "adam_m.";
const ADAM_V: &str = "adam_v.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// Decimal word position (a u128).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |m: &str| Error::Config(format!("invalid RNG state: {m}"));
        if self.seed.len() != 64 {
            return Err(bad("seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed is not hex"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad("word_pos"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vec<String>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub optimizer_step: u64,
    pub rng: RngState,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &GroundingModel,
    opt: &AdamW,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, var) in model.params().vars() {
        tensors.push((format!("{PARAM}{name}"), var.as_tensor().clone()));
    }
    for (name, t) in &opt.m {
        tensors.push((format!("{ADAM_M}{name}"), t.clone()));
    }
    for (name, t) in &opt.v {
        tensors.push((format!("{ADAM_V}{name}"), t.clone()));
    }
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    let bytes = safetensors::serialize(tensors, Some(info)).map_err(|e| ckpt_err(path, e.to_string()))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| ckpt_err(path, "not a grounding checkpoint (metadata missing)"))?;
    let meta: CheckpointMeta =
        serde_json::from_str(meta_json).map_err(|e| ckpt_err(path, format!("metadata: {e}")))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(ckpt_err(
            path,
            format!("format {} is not supported (expected {CHECKPOINT_FORMAT})", meta.format),
        ));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    let mut ck = Checkpoint {
        meta,
        params: BTreeMap::new(),
        adam_m: BTreeMap::new(),
        adam_v: BTreeMap::new(),
    };
    for (name, t) in tensors {
        if let Some(n) = name.strip_prefix(PARAM) {
            ck.params.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(ADAM_M) {
            ck.adam_m.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(ADAM_V) {
            ck.adam_v.insert(n.to_string(), t);
        } else {
            return Err(ckpt_err(path, format!("unexpected tensor {name}")));
        }
    }
    Ok(ck)
}

impl Checkpoint {
    /// Rebuilds the model and copies the stored parameters into it.
    pub fn model(&self, device: &Device) -> Result<GroundingModel> {
        let vocab = Vocab::from_words(self.meta.vocab.clone())?;
        let model = GroundingModel::new(self.meta.model.clone(), vocab, self.meta.train.seed, device)?;
        model.params().load_values(&self.params)?;
        Ok(model)
    }

    pub fn optimizer(&self, params: AdamWParams) -> AdamW {
        AdamW {
            params,
            step: self.meta.optimizer_step,
            m: self.adam_m.clone(),
            v: self.adam_v.clone(),
        }
    }
}

/// Loads just the model from a checkpoint for inference.
pub fn load_model(path: &Path, device: &Device) -> Result<GroundingModel> {
    let ck = load_checkpoint(path, device)?;
    ck.model(device).map_err(|e| ckpt_err(path, e.to_string()))
}

pub fn epoch_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:04}.safetensors"))
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("final.safetensors")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..13 {
            rng.random::<u32>();
        }
        let state = RngState::capture(&rng);
        let mut back = state.restore().unwrap();
        let a: Vec<u64> = (0..5).map(|_| rng.random()).collect();
        let b: Vec<u64> = (0..5).map(|_| back.random()).collect();
        assert_eq!(a, b);
    }
}
