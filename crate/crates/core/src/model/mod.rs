//! The grounding network.
//!
//! Image → visual branch → `F_v`; expression (and knowledge) → shared text
//! encoder → `F_e` (`F_k`); knowledge fusion → `F_l`; cross-modal fusion over
//! `[REG; P_v; P_l]` → MLP head → logistic squashing → `(cx, cy, w, h)`.
//!
//! All tensors are batch-major: features are `[b, tokens, channels]` and
//! padding masks are `[b, tokens]` with 1 at padded positions.

mod kernels;
mod nn;
mod params;
mod text;
mod visual;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::synth::GroundingSample;

pub use nn::{attention_bias, softmax_last, Ctx, Encoder, EncoderLayer, LayerNorm, Linear, MASK_BIAS};
pub use params::{Init, ParamStore, Scope};
pub use text::{TextBatch, TextEncoder, Vocab, PAD, PAD_ID, UNK, UNK_ID};
pub use visual::{check_image_dims, images_to_tensor, BackboneKind, VisualEncoder, VisualFeatures};

/// Which knowledge pathway feeds the cross-modal fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Expression only.
    None,
    /// Expression and knowledge joined into one text.
    ConcatText,
    /// Separately encoded, concatenated, no fusion layers.
    Branch,
    /// Separately encoded, fused by the knowledge fusion module.
    #[default]
    BranchKfm,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::None,
        AblationMode::ConcatText,
        AblationMode::Branch,
        AblationMode::BranchKfm,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationMode::None => "none",
            AblationMode::ConcatText => "concat_text",
            AblationMode::Branch => "branch",
            AblationMode::BranchKfm => "branch_kfm",
        }
    }

    pub fn requires_knowledge(&self) -> bool {
        !matches!(self, AblationMode::None)
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                format!("unknown ablation mode {s:?} (expected none, concat_text, branch or branch_kfm)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub c_v: usize,
    pub visual_layers: usize,
    pub text_layers: usize,
    pub c_e: usize,
    pub c_p: usize,
    pub kfm_layers: usize,
    pub cfm_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_text_tokens: usize,
    /// Filled from the training vocabulary; 0 until then.
    pub vocab_size: usize,
    pub ablation_mode: AblationMode,
    pub dropout: f64,
    pub head_layers: usize,
    /// Learned expression/knowledge type embedding ahead of knowledge fusion.
    pub segment_embedding: bool,
    pub backbone: BackboneKind,
    /// Largest visual grid side covered by the positional table.
    pub max_grid: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c_v: 256,
            visual_layers: 6,
            text_layers: 4,
            c_e: 256,
            c_p: 256,
            kfm_layers: 2,
            cfm_layers: 6,
            heads: 8,
            ffn_dim: 512,
            max_text_tokens: 64,
            vocab_size: 0,
            ablation_mode: AblationMode::BranchKfm,
            dropout: 0.1,
            head_layers: 3,
            segment_embedding: false,
            backbone: BackboneKind::Desk,
            max_grid: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 {
            return bad("heads must be positive".into());
        }
        for (name, v) in [("c_v", self.c_v), ("c_e", self.c_e), ("c_p", self.c_p)] {
            if v == 0 || v % self.heads != 0 {
                return bad(format!("{name} = {v} is not a positive multiple of heads = {}", self.heads));
            }
        }
        if self.ablation_mode == AblationMode::BranchKfm && self.kfm_layers != 2 {
            return bad(format!(
                "kfm_layers must be 2 for branch_kfm, got {}",
                self.kfm_layers
            ));
        }
        for (name, v) in [
            ("visual_layers", self.visual_layers),
            ("text_layers", self.text_layers),
            ("cfm_layers", self.cfm_layers),
            ("ffn_dim", self.ffn_dim),
            ("max_text_tokens", self.max_text_tokens),
            ("head_layers", self.head_layers),
            ("max_grid", self.max_grid),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenRole {
    Expression,
    Knowledge,
    Fused,
}

/// `[b, n, c]` token features with their `[b, n]` padding mask.
#[derive(Debug, Clone)]
pub struct TokenFeatures {
    pub features: Tensor,
    pub pad_mask: Tensor,
    pub role: TokenRole,
}

impl TokenFeatures {
    pub fn tokens(&self) -> usize {
        self.features.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.features.dims()[2]
    }
}

/// Result of the cross-modal fusion and head.
#[derive(Debug, Clone)]
pub struct GroundOutput {
    /// `[b, 4]` boxes in `(0, 1)`, ordered `(cx, cy, w, h)`.
    pub boxes: Tensor,
    /// `[b, c_p]` REG token output.
    pub reg: Tensor,
    /// Length of the fused sequence `1 + N_v + N_l`.
    pub sequence_len: usize,
}

impl GroundOutput {
    pub fn to_boxes(&self) -> Result<Vec<BoundingBox>> {
        tensor_to_boxes(&self.boxes)
    }
}

pub fn tensor_to_boxes(t: &Tensor) -> Result<Vec<BoundingBox>> {
    Ok(t.to_dtype(DType::F64)?
        .to_vec2::<f64>()?
        .into_iter()
        .map(|r| BoundingBox::from_unit_outputs([r[0], r[1], r[2], r[3]]))
        .collect())
}

#[derive(Debug, Clone)]
struct CrossModalFusion {
    proj_v: Linear,
    proj_l: Linear,
    reg: Tensor,
    encoder: Encoder,
    head: Vec<Linear>,
    c_p: usize,
}

impl CrossModalFusion {
    fn new(s: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let head = (0..cfg.head_layers)
            .map(|i| {
                let out = if i + 1 == cfg.head_layers { 4 } else { cfg.c_p };
                Linear::new(&s.pp(format!("head{i}")), cfg.c_p, out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            proj_v: Linear::new(&s.pp("proj_v"), cfg.c_v, cfg.c_p)?,
            proj_l: Linear::new(&s.pp("proj_l"), cfg.c_e, cfg.c_p)?,
            reg: s.get("reg", &[1, 1, cfg.c_p], Init::Normal(0.02))?,
            encoder: Encoder::new(
                &s.pp("encoder"),
                cfg.cfm_layers,
                cfg.c_p,
                cfg.heads,
                cfg.ffn_dim,
                cfg.dropout,
            )?,
            head,
            c_p: cfg.c_p,
        })
    }

    fn forward(&self, f_v: &VisualFeatures, f_l: &TokenFeatures, ctx: &mut Ctx) -> Result<GroundOutput> {
        let (b, n_v, _) = f_v.features.dims3()?;
        let n_l = f_l.tokens();
        if f_l.features.dims()[0] != b {
            return Err(Error::Config("visual and language batch sizes differ".into()));
        }
        let p_v = self.proj_v.forward(&f_v.features)?;
        let p_l = self.proj_l.forward(&f_l.features)?;
        let reg = self.reg.broadcast_as((b, 1, self.c_p))?;
        let x0 = Tensor::cat(&[&reg, &p_v, &p_l], 1)?;
        let dev = f_l.pad_mask.device();
        let mask = Tensor::cat(
            &[
                &Tensor::zeros((b, 1 + n_v), DType::F32, dev)?,
                &f_l.pad_mask.to_dtype(DType::F32)?,
            ],
            1,
        )?;
        let x = self.encoder.forward(&x0, Some(&mask), ctx)?;
        let reg_out = x.narrow(1, 0, 1)?.squeeze(1)?;
        let mut h = reg_out.clone();
        for (i, layer) in self.head.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.head.len() {
                h = h.relu()?;
            }
        }
        Ok(GroundOutput {
            boxes: (h.neg()?.exp()? + 1.0)?.recip()?,
            reg: reg_out,
            sequence_len: 1 + n_v + n_l,
        })
    }
}

/// Texts for one batch, resolved against the ablation mode.
struct BatchTexts<'a> {
    expressions: Vec<&'a str>,
    knowledge: Vec<&'a str>,
}

/// The full network with its vocabulary and parameters.
#[derive(Debug, Clone)]
pub struct GroundingModel {
    config: ModelConfig,
    vocab: Vocab,
    store: ParamStore,
    visual: VisualEncoder,
    text: TextEncoder,
    kfm: Option<Encoder>,
    segments: Option<Tensor>,
    cfm: CrossModalFusion,
}

impl GroundingModel {
    /// Builds a model with seed-derived initial weights. `config.vocab_size`
    /// is overwritten with the vocabulary's size.
    pub fn new(mut config: ModelConfig, vocab: Vocab, seed: u64, device: &Device) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let store = ParamStore::new(seed, device.clone());
        let root = store.root();
        let visual = VisualEncoder::new(
            &root.pp("visual"),
            config.backbone,
            config.c_v,
            config.visual_layers,
            config.heads,
            config.ffn_dim,
            config.dropout,
            config.max_grid,
        )?;
        let text = TextEncoder::new(
            &root.pp("text"),
            config.vocab_size,
            config.max_text_tokens,
            config.c_e,
            config.text_layers,
            config.heads,
            config.ffn_dim,
            config.dropout,
        )?;
        let with_kfm = config.ablation_mode == AblationMode::BranchKfm;
        let kfm = if with_kfm {
            Some(Encoder::new(
                &root.pp("kfm"),
                config.kfm_layers,
                config.c_e,
                config.heads,
                config.ffn_dim,
                config.dropout,
            )?)
        } else {
            None
        };
        let segments = if with_kfm && config.segment_embedding {
            Some(root.pp("kfm").get("segments", &[2, config.c_e], Init::Normal(0.02))?)
        } else {
            None
        };
        let cfm = CrossModalFusion::new(&root.pp("cfm"), &config)?;
        Ok(Self {
            config,
            vocab,
            store,
            visual,
            text,
            kfm,
            segments,
            cfm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Parameter count of the shared text encoder.
    pub fn text_param_count(&self) -> usize {
        self.store.count_with_prefix("text.")
    }

    pub fn tokenize(&self, texts: &[&str]) -> Result<TextBatch> {
        self.vocab.batch(texts, self.config.max_text_tokens, self.device())
    }

    pub fn encode_image(&self, images: &Tensor, ctx: &mut Ctx) -> Result<VisualFeatures> {
        self.visual.forward(images, ctx)
    }

    /// Both branches go through this single encoder instance.
    pub fn encode_text(&self, batch: &TextBatch, role: TokenRole, ctx: &mut Ctx) -> Result<TokenFeatures> {
        Ok(TokenFeatures {
            features: self.text.forward(batch, ctx)?,
            pad_mask: batch.pad_mask.to_dtype(DType::F32)?,
            role,
        })
    }

    /// Concatenates along the token axis, then applies the fusion layers
    /// when the mode has them; otherwise returns the plain concatenation.
    pub fn fuse_knowledge(&self, f_e: &TokenFeatures, f_k: &TokenFeatures, ctx: &mut Ctx) -> Result<TokenFeatures> {
        if f_e.role != TokenRole::Expression || f_k.role != TokenRole::Knowledge {
            return Err(Error::Config(format!(
                "knowledge fusion expects expression and knowledge features, got {:?} and {:?}",
                f_e.role, f_k.role
            )));
        }
        if f_e.channels() != f_k.channels() {
            return Err(Error::Config(format!(
                "channel mismatch: expression {} vs knowledge {}",
                f_e.channels(),
                f_k.channels()
            )));
        }
        let (mut e, mut k) = (f_e.features.clone(), f_k.features.clone());
        if let Some(seg) = &self.segments {
            e = e.broadcast_add(&seg.narrow(0, 0, 1)?.unsqueeze(0)?)?;
            k = k.broadcast_add(&seg.narrow(0, 1, 1)?.unsqueeze(0)?)?;
        }
        let x = Tensor::cat(&[&e, &k], 1)?;
        let mask = Tensor::cat(&[&f_e.pad_mask, &f_k.pad_mask], 1)?;
        let features = match &self.kfm {
            Some(kfm) => kfm.forward(&x, Some(&mask), ctx)?,
            None => x,
        };
        Ok(TokenFeatures {
            features,
            pad_mask: mask,
            role: TokenRole::Fused,
        })
    }

    pub fn ground(&self, f_v: &VisualFeatures, f_l: &TokenFeatures, ctx: &mut Ctx) -> Result<GroundOutput> {
        self.cfm.forward(f_v, f_l, ctx)
    }

    /// Language features for a batch according to the ablation mode.
    pub fn language_features(
        &self,
        expressions: &[&str],
        knowledge: &[Option<&str>],
        ctx: &mut Ctx,
    ) -> Result<TokenFeatures> {
        let texts = self.resolve_texts(expressions, knowledge, None)?;
        self.language_from(&texts, ctx)
    }

    fn resolve_texts<'a>(
        &self,
        expressions: &[&'a str],
        knowledge: &[Option<&'a str>],
        ids: Option<&[&str]>,
    ) -> Result<BatchTexts<'a>> {
        if expressions.len() != knowledge.len() {
            return Err(Error::Config("expression and knowledge counts differ".into()));
        }
        let mode = self.config.ablation_mode;
        let mut know = Vec::new();
        if mode.requires_knowledge() {
            let mut missing = Vec::new();
            for (i, k) in knowledge.iter().enumerate() {
                match k {
                    Some(k) if !k.trim().is_empty() => know.push(*k),
                    _ => missing.push(ids.map_or_else(|| format!("#{i}"), |ids| ids[i].to_string())),
                }
            }
            if !missing.is_empty() {
                return Err(Error::Config(format!(
                    "ablation mode {mode} requires knowledge text; missing for {}",
                    missing.join(", ")
                )));
            }
        }
        Ok(BatchTexts {
            expressions: expressions.to_vec(),
            knowledge: know,
        })
    }

    fn language_from(&self, texts: &BatchTexts, ctx: &mut Ctx) -> Result<TokenFeatures> {
        match self.config.ablation_mode {
            AblationMode::None => {
                self.encode_text(&self.tokenize(&texts.expressions)?, TokenRole::Expression, ctx)
            }
            AblationMode::ConcatText => {
                let joined: Vec<String> = texts
                    .expressions
                    .iter()
                    .zip(&texts.knowledge)
                    .map(|(e, k)| format!("{e} {k}"))
                    .collect();
                let refs: Vec<&str> = joined.iter().map(String::as_str).collect();
                let mut f = self.encode_text(&self.tokenize(&refs)?, TokenRole::Expression, ctx)?;
                f.role = TokenRole::Fused;
                Ok(f)
            }
            AblationMode::Branch | AblationMode::BranchKfm => {
                let f_e = self.encode_text(&self.tokenize(&texts.expressions)?, TokenRole::Expression, ctx)?;
                let f_k = self.encode_text(&self.tokenize(&texts.knowledge)?, TokenRole::Knowledge, ctx)?;
                self.fuse_knowledge(&f_e, &f_k, ctx)
            }
        }
    }

    /// Batched forward from raw inputs.
    pub fn forward_batch(
        &self,
        images: &Tensor,
        expressions: &[&str],
        knowledge: &[Option<&str>],
        ctx: &mut Ctx,
    ) -> Result<GroundOutput> {
        let texts = self.resolve_texts(expressions, knowledge, None)?;
        let f_v = self.encode_image(images, ctx)?;
        let f_l = self.language_from(&texts, ctx)?;
        self.ground(&f_v, &f_l, ctx)
    }

    /// Batched forward over samples; knowledge errors name the samples.
    pub fn forward_samples(&self, samples: &[&GroundingSample], ctx: &mut Ctx) -> Result<GroundOutput> {
        let ids: Vec<&str> = samples.iter().map(|s| s.image_id.as_str()).collect();
        let expressions: Vec<&str> = samples.iter().map(|s| s.expression.as_str()).collect();
        let knowledge: Vec<Option<&str>> = samples.iter().map(|s| s.knowledge.as_deref()).collect();
        let texts = self.resolve_texts(&expressions, &knowledge, Some(&ids))?;
        let imgs: Vec<&image::RgbImage> = samples.iter().map(|s| &s.image).collect();
        let images = images_to_tensor(&imgs, self.device())?;
        let f_v = self.encode_image(&images, ctx)?;
        let f_l = self.language_from(&texts, ctx)?;
        self.ground(&f_v, &f_l, ctx)
    }

    /// Single-sample inference.
    pub fn forward(&self, sample: &GroundingSample) -> Result<BoundingBox> {
        let out = self.forward_samples(&[sample], &mut Ctx::eval())?;
        Ok(out.to_boxes()?.remove(0))
    }

    /// Inference over many samples in batches of `batch_size`. Samples of
    /// different sizes are grouped into separate batches.
    pub fn predict(&self, samples: &[&GroundingSample], batch_size: usize) -> Result<Vec<BoundingBox>> {
        let batch_size = batch_size.max(1);
        let mut out = Vec::with_capacity(samples.len());
        let mut start = 0;
        while start < samples.len() {
            let dims = samples[start].image.dimensions();
            let mut end = start + 1;
            while end < samples.len() && end - start < batch_size && samples[end].image.dimensions() == dims {
                end += 1;
            }
            let res = self.forward_samples(&samples[start..end], &mut Ctx::eval())?;
            out.extend(res.to_boxes()?);
            start = end;
        }
        Ok(out)
    }
}
