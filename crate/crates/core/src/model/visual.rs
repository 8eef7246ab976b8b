//! Visual branch: stride-32 backbone, 2-D positions, transformer encoder.

use candle_core::{Device, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::nn::{Ctx, Encoder, LayerNorm, Linear};
use super::params::{Init, Scope};
use crate::error::{Error, Result};
use crate::synth::IMAGE_STRIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Four non-overlapping patch convolutions with strides 4, 2, 2, 2.
    #[default]
    Desk,
    /// 50-layer bottleneck residual network with frozen (affine) norms.
    Resnet50,
}

pub fn check_image_dims(height: usize, width: usize) -> Result<()> {
    let s = IMAGE_STRIDE as usize;
    if height == 0 || width == 0 || height % s != 0 || width % s != 0 {
        return Err(Error::Config(format!(
            "image size {width}x{height} is not a positive multiple of {s} on both sides"
        )));
    }
    Ok(())
}

/// Stacks images into `[b, 3, h, w]`, normalising each image's channels to
/// zero mean and unit variance.
pub fn images_to_tensor(images: &[&RgbImage], device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::EmptyInput("empty image batch".into()))?;
    let (w, h) = first.dimensions();
    check_image_dims(h as usize, w as usize)?;
    let plane = (w * h) as usize;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::Config(format!(
                "mixed image sizes in one batch: {w}x{h} and {}x{}",
                img.width(),
                img.height()
            )));
        }
        let raw = img.as_raw();
        for c in 0..3 {
            let vals: Vec<f32> = raw.iter().skip(c).step_by(3).map(|&v| v as f32).collect();
            let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
            let std = var.sqrt().max(1e-3);
            data.extend(vals.iter().map(|&v| ((v as f64 - mean) / std) as f32));
        }
    }
    Ok(Tensor::from_vec(
        data,
        (images.len(), 3, h as usize, w as usize),
        device,
    )?)
}

/// `[b, h, w, c] -> [b, h/s, w/s, s*s*c]`.
fn space_to_depth(x: &Tensor, s: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h / s, s, w / s, s, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, h / s, w / s, s * s * c))?)
}

#[derive(Debug, Clone)]
struct PatchStage {
    proj: Linear,
    norm: LayerNorm,
    stride: usize,
    activate: bool,
}

#[derive(Debug, Clone)]
struct DeskBackbone {
    stages: Vec<PatchStage>,
}

const DESK_STRIDES: [usize; 4] = [4, 2, 2, 2];
const DESK_WIDTHS: [usize; 3] = [64, 128, 256];

impl DeskBackbone {
    fn new(s: &Scope, c_v: usize) -> Result<Self> {
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &stride) in DESK_STRIDES.iter().enumerate() {
            let c_out = DESK_WIDTHS.get(i).copied().unwrap_or(c_v);
            let st = s.pp(format!("stage{i}"));
            stages.push(PatchStage {
                proj: Linear::new(&st.pp("proj"), stride * stride * c_in, c_out)?,
                norm: LayerNorm::new(&st.pp("norm"), c_out)?,
                stride,
                activate: i + 1 < DESK_STRIDES.len(),
            });
            c_in = c_out;
        }
        Ok(Self { stages })
    }

    /// `[b, 3, h, w] -> [b, h/32, w/32, c_v]`.
    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.permute((0, 2, 3, 1))?;
        for st in &self.stages {
            x = st.norm.forward(&st.proj.forward(&space_to_depth(&x, st.stride)?)?)?;
            if st.activate {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
struct Conv {
    weight: Tensor,
    scale: Tensor,
    shift: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new(s: &Scope, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", &[c_out, c_in, k, k], Init::KaimingUniform)?,
            scale: s.get("bn_scale", &[c_out], Init::Ones)?,
            shift: s.get("bn_shift", &[c_out], Init::Zeros)?,
            stride,
            padding: k / 2,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.scale.dims()[0];
        Ok(y
            .broadcast_mul(&self.scale.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.shift.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: Conv,
    spatial: Conv,
    expand: Conv,
    shortcut: Option<Conv>,
}

impl Bottleneck {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.reduce.forward(x)?.relu()?;
        let y = self.spatial.forward(&y)?.relu()?;
        let y = self.expand.forward(&y)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct Resnet50 {
    stem: Conv,
    blocks: Vec<Bottleneck>,
    proj: Linear,
}

impl Resnet50 {
    fn new(s: &Scope, c_v: usize) -> Result<Self> {
        let stem = Conv::new(&s.pp("stem"), 3, 64, 7, 2)?;
        let mut blocks = Vec::new();
        let mut c_in = 64;
        for (li, (&depth, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            for bi in 0..depth {
                let stride = if bi == 0 && li > 0 { 2 } else { 1 };
                let bs = s.pp(format!("layer{li}.block{bi}"));
                let c_out = width * 4;
                blocks.push(Bottleneck {
                    reduce: Conv::new(&bs.pp("reduce"), c_in, width, 1, 1)?,
                    spatial: Conv::new(&bs.pp("spatial"), width, width, 3, stride)?,
                    expand: Conv::new(&bs.pp("expand"), width, c_out, 1, 1)?,
                    shortcut: if bi == 0 {
                        Some(Conv::new(&bs.pp("shortcut"), c_in, c_out, 1, stride)?)
                    } else {
                        None
                    },
                });
                c_in = c_out;
            }
        }
        Ok(Self {
            stem,
            blocks,
            proj: Linear::new(&s.pp("proj"), c_in, c_v)?,
        })
    }

    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let x = self.stem.forward(images)?.relu()?;
        // Zero padding is safe after the ReLU.
        let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut x = x.max_pool2d_with_stride(3, 2)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        self.proj.forward(&x.permute((0, 2, 3, 1))?)
    }
}

#[derive(Debug, Clone)]
enum Backbone {
    Desk(DeskBackbone),
    Resnet50(Box<Resnet50>),
}

/// Output of the visual branch for a batch: `[b, n_v, c_v]` in row-major
/// grid order.
#[derive(Debug, Clone)]
pub struct VisualFeatures {
    pub features: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl VisualFeatures {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

#[derive(Debug, Clone)]
pub struct VisualEncoder {
    backbone: Backbone,
    rows: Tensor,
    cols: Tensor,
    encoder: Encoder,
    c_v: usize,
    max_grid: usize,
}

impl VisualEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        s: &Scope,
        kind: BackboneKind,
        c_v: usize,
        layers: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        max_grid: usize,
    ) -> Result<Self> {
        let backbone = match kind {
            BackboneKind::Desk => Backbone::Desk(DeskBackbone::new(&s.pp("backbone"), c_v)?),
            BackboneKind::Resnet50 => {
                Backbone::Resnet50(Box::new(Resnet50::new(&s.pp("backbone"), c_v)?))
            }
        };
        Ok(Self {
            backbone,
            rows: s.get("pos_rows", &[max_grid, c_v], Init::Normal(0.02))?,
            cols: s.get("pos_cols", &[max_grid, c_v], Init::Normal(0.02))?,
            encoder: Encoder::new(&s.pp("encoder"), layers, c_v, heads, ffn_dim, dropout)?,
            c_v,
            max_grid,
        })
    }

    pub fn forward(&self, images: &Tensor, ctx: &mut Ctx) -> Result<VisualFeatures> {
        let (b, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::Config(format!("expected 3 image channels, got {c}")));
        }
        check_image_dims(h, w)?;
        let (gh, gw) = (h / IMAGE_STRIDE as usize, w / IMAGE_STRIDE as usize);
        if gh > self.max_grid || gw > self.max_grid {
            return Err(Error::Config(format!(
                "image {w}x{h} exceeds the positional table ({} px per side)",
                self.max_grid * IMAGE_STRIDE as usize
            )));
        }
        let map = match &self.backbone {
            Backbone::Desk(d) => d.forward(images)?,
            Backbone::Resnet50(r) => r.forward(images)?,
        };
        let pos = self
            .rows
            .narrow(0, 0, gh)?
            .reshape((gh, 1, self.c_v))?
            .broadcast_add(&self.cols.narrow(0, 0, gw)?.reshape((1, gw, self.c_v))?)?;
        let x = map
            .broadcast_add(&pos.unsqueeze(0)?)?
            .reshape((b, gh * gw, self.c_v))?;
        Ok(VisualFeatures {
            features: self.encoder.forward(&x, None, ctx)?,
            grid_h: gh,
            grid_w: gw,
        })
    }
}
