//! Optimisation loop: seeded shuffling and dropout, box-regression loss,
//! global-norm clipping, AdamW, periodic evaluation and checkpoints.

mod checkpoint;
mod loss;
mod optim;

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalConfig, EvalReport};
use crate::geometry::LossConfig;
use crate::model::{Ctx, GroundingModel, ModelConfig, Vocab};
use crate::synth::{GroundingSample, Split};

pub use checkpoint::{
    epoch_checkpoint_path, final_checkpoint_path, load_checkpoint, load_model, save_checkpoint, Checkpoint,
    CheckpointMeta, RngState, CHECKPOINT_FORMAT,
};
pub use loss::{box_loss, TensorLoss};
pub use optim::{clip_grad_norm, global_norm, named_grads, AdamW, AdamWParams};

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const RUN_SUMMARY_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Write `epoch-NNNN` checkpoints every k epochs; 0 only writes the final one.
    pub checkpoint_every: usize,
    /// Evaluate on the test split every k epochs; 0 disables.
    pub eval_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs after which the learning rate is multiplied by `lr_decay_factor`.
    /// Empty keeps it constant.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 60,
            batch_size: 16,
            weight_decay: 1e-4,
            seed: 0,
            loss: LossConfig::default(),
            grad_clip: 0.1,
            checkpoint_every: 10,
            eval_every: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("weight_decay and grad_clip must be non-negative".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("optimizer betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!("lr_decay_factor must lie in (0, 1], got {}", self.lr_decay_factor));
        }
        if self.lr_decay_epochs.contains(&0) {
            return bad("lr_decay_epochs entries must be at least 1".into());
        }
        self.loss.validate()?;
        Ok(())
    }

    /// Learning rate used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs.iter().filter(|&&m| epoch > m).count();
        self.learning_rate * self.lr_decay_factor.powi(drops as i32)
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_l1: f64,
    pub mean_iou: f64,
    /// Mean pre-clip global gradient norm.
    pub mean_grad_norm: f64,
    pub learning_rate: f64,
    pub wall_clock_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Stop (without a final checkpoint) once this epoch completes.
    pub stop_after_epoch: Option<usize>,
    pub eval: EvalConfig,
    pub eval_batch_size: usize,
}

impl TrainOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            resume: None,
            stop_after_epoch: None,
            eval: EvalConfig::default(),
            eval_batch_size: 32,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: GroundingModel,
    pub log: TrainLog,
}

/// Hex digest identifying a (model, train) configuration pair.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> Result<String> {
    let doc = serde_json::to_string(&(model, train))?;
    let digest = Sha256::digest(doc.as_bytes());
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Vocabulary over the expressions and knowledge texts of `samples`.
pub fn build_vocab(samples: &[&GroundingSample]) -> Vocab {
    Vocab::build(
        samples
            .iter()
            .flat_map(|s| std::iter::once(s.expression.as_str()).chain(s.knowledge.as_deref())),
    )
}

/// Boxes of `samples` as an f32 `[b, 4]` tensor.
pub fn target_tensor(samples: &[&GroundingSample], device: &Device) -> Result<Tensor> {
    let v: Vec<f32> = samples
        .iter()
        .flat_map(|s| s.box_.to_array().map(|x| x as f32))
        .collect();
    Ok(Tensor::from_vec(v, (samples.len(), 4), device)?)
}

/// Periodic validation hook: inference on the test split.
pub fn evaluate_during_training(
    model: &GroundingModel,
    test: &[GroundingSample],
    cfg: &EvalConfig,
    batch_size: usize,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyInput("test split is empty".into()));
    }
    evaluate_model(model, test, cfg, batch_size).map(|(r, _)| r)
}

fn check_knowledge(model_cfg: &ModelConfig, samples: &[&GroundingSample]) -> Result<()> {
    if !model_cfg.ablation_mode.requires_knowledge() {
        return Ok(());
    }
    let missing: Vec<&str> = samples
        .iter()
        .filter(|s| s.knowledge.as_deref().is_none_or(|k| k.trim().is_empty()))
        .map(|s| s.image_id.as_str())
        .collect();
    if missing.is_empty() {
        return Ok(());
    }
    let shown = missing.iter().take(10).copied().collect::<Vec<_>>().join(", ");
    let more = if missing.len() > 10 {
        format!(" and {} more", missing.len() - 10)
    } else {
        String::new()
    };
    Err(Error::Config(format!(
        "ablation mode {} requires knowledge text; missing for {shown}{more} (run knowledge expansion first)",
        model_cfg.ablation_mode
    )))
}

fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let f = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Schema {
            file: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_train_log(dir: &Path) -> Result<Vec<EpochRecord>> {
    read_log(&dir.join(TRAIN_LOG_FILE))
}

fn write_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_log(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(path, e))
}

fn mismatch(path: &Path, what: &str) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("{what} differs from the run being resumed"),
    }
}

/// Trains on the train split of `corpus`; the test split feeds periodic
/// evaluation when `eval_every > 0`.
pub fn train(
    corpus: &[GroundingSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    opts.eval.validate()?;
    let train_set: Vec<&GroundingSample> = corpus.iter().filter(|s| s.split == Split::Train).collect();
    let test_set: Vec<GroundingSample> = corpus.iter().filter(|s| s.split == Split::Test).cloned().collect();
    if train_set.is_empty() {
        return Err(Error::EmptyInput("train split is empty".into()));
    }
    check_knowledge(model_cfg, &train_set)?;
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let device = Device::Cpu;

    let vocab = build_vocab(&train_set);
    let mut resolved = model_cfg.clone();
    resolved.vocab_size = vocab.len();
    let hash = config_hash(&resolved, cfg)?;
    let log_path = opts.out_dir.join(TRAIN_LOG_FILE);

    let (model, mut opt, mut rng, start_epoch, mut records) = match &opts.resume {
        Some(path) => {
            let ck = load_checkpoint(path, &device)?;
            if ck.meta.model != resolved {
                return Err(mismatch(path, "model configuration"));
            }
            if ck.meta.train != *cfg {
                return Err(mismatch(path, "train configuration"));
            }
            if ck.meta.vocab != vocab.words() {
                return Err(mismatch(path, "vocabulary (training corpus)"));
            }
            let model = ck.model(&device)?;
            let opt = ck.optimizer(cfg.adamw());
            let rng = ck.meta.rng.restore()?;
            let mut records = read_log(&log_path)?;
            records.retain(|r| r.epoch <= ck.meta.epoch);
            write_log(&log_path, &records)?;
            (model, opt, rng, ck.meta.epoch, records)
        }
        None => {
            let model = GroundingModel::new(model_cfg.clone(), vocab, cfg.seed, &device)?;
            write_log(&log_path, &[])?;
            (
                model,
                AdamW::new(cfg.adamw()),
                ChaCha8Rng::seed_from_u64(cfg.seed),
                0,
                Vec::new(),
            )
        }
    };
    let vars = model.params().vars();
    tracing::info!(
        params = model.params().count(),
        train = train_set.len(),
        mode = %resolved.ablation_mode,
        "training from epoch {}",
        start_epoch + 1
    );

    let meta_for = |epoch: usize, opt: &AdamW, rng: &ChaCha8Rng| CheckpointMeta {
        format: CHECKPOINT_FORMAT,
        model: model.config().clone(),
        train: cfg.clone(),
        vocab: model.vocab().words().to_vec(),
        epoch,
        optimizer_step: opt.step,
        rng: RngState::capture(rng),
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in start_epoch + 1..=cfg.epochs {
        let t0 = Instant::now();
        opt.params.lr = cfg.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_l1, mut sum_iou, mut sum_norm) = (0.0, 0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&GroundingSample> = chunk.iter().map(|&i| train_set[i]).collect();
            let out = model.forward_samples(&batch, &mut Ctx::train(&mut rng))?;
            let gt = target_tensor(&batch, &device)?;
            let loss = box_loss(&out.boxes, &gt, &cfg.loss)?;
            let total = loss.total.to_scalar::<f32>()? as f64;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    sample_ids: batch.iter().map(|s| s.image_id.clone()).collect(),
                });
            }
            let n = batch.len() as f64;
            sum_total += total * n;
            sum_l1 += loss.l1.to_scalar::<f32>()? as f64 * n;
            sum_iou += loss.iou.to_scalar::<f32>()? as f64 * n;
            let grads = loss.total.backward()?;
            let mut named = named_grads(&vars, &grads);
            sum_norm += clip_grad_norm(&mut named, cfg.grad_clip)?;
            opt.step(&vars, &named)?;
            steps += 1;
        }
        let n = train_set.len() as f64;
        let mut record = EpochRecord {
            epoch,
            mean_total: sum_total / n,
            mean_l1: sum_l1 / n,
            mean_iou: sum_iou / n,
            mean_grad_norm: sum_norm / steps as f64,
            learning_rate: opt.params.lr,
            wall_clock_s: t0.elapsed().as_secs_f64(),
            eval: None,
        };
        if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 && !test_set.is_empty() {
            record.eval = Some(evaluate_during_training(&model, &test_set, &opts.eval, opts.eval_batch_size)?);
        }
        tracing::info!(
            epoch,
            loss = record.mean_total,
            l1 = record.mean_l1,
            iou = record.mean_iou,
            secs = record.wall_clock_s,
            "epoch done"
        );
        append_log(&log_path, &record)?;
        records.push(record);
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            save_checkpoint(
                &epoch_checkpoint_path(&opts.out_dir, epoch),
                &model,
                &opt,
                &meta_for(epoch, &opt, &rng),
            )?;
        }
        if opts.stop_after_epoch == Some(epoch) && epoch < cfg.epochs {
            return Ok(TrainOutcome {
                model,
                log: TrainLog {
                    records,
                    final_checkpoint: None,
                    config_hash: hash,
                },
            });
        }
    }

    let final_path = final_checkpoint_path(&opts.out_dir);
    save_checkpoint(&final_path, &model, &opt, &meta_for(cfg.epochs, &opt, &rng))?;
    let log = TrainLog {
        records,
        final_checkpoint: Some(final_path),
        config_hash: hash,
    };
    let summary = serde_json::json!({
        "final_checkpoint": log.final_checkpoint,
        "config_hash": log.config_hash,
        "epochs_completed": cfg.epochs,
    });
    let summary_path = opts.out_dir.join(RUN_SUMMARY_FILE);
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")
        .map_err(|e| Error::io(&summary_path, e))?;
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_schedule() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            lr_decay_epochs: vec![200, 100],
            lr_decay_factor: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(1), 1e-3);
        assert_eq!(cfg.lr_at(100), 1e-3);
        assert_eq!(cfg.lr_at(101), 5e-4);
        assert_eq!(cfg.lr_at(201), 2.5e-4);
        assert_eq!(TrainConfig::default().lr_at(1000), 1e-4);
        assert!(TrainConfig { lr_decay_factor: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { lr_decay_epochs: vec![0], ..cfg }.validate().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn config_hash_tracks_changes() {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let h = config_hash(&m, &t).unwrap();
        assert_eq!(h, config_hash(&m, &t).unwrap());
        let t2 = TrainConfig {
            seed: 1,
            ..Default::default()
        };
        assert_ne!(h, config_hash(&m, &t2).unwrap());
    }
}
