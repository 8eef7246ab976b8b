//! Transformer building blocks.

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::params::{Init, Scope};
use crate::error::Result;

/// Additive bias applied to attention logits of padded keys.
pub const MASK_BIAS: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

/// Forward-pass context. Dropout is active only when an RNG is present.
pub struct Ctx<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Ctx<'static> {
    pub fn eval() -> Self {
        Ctx { rng: None }
    }
}

impl<'a> Ctx<'a> {
    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Ctx { rng: Some(rng) }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x.clone());
        };
        if p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = (1.0 - p) as f32;
        let scale = 1.0 / keep;
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if rng.random::<f32>() < keep { scale } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    kernels::softmax(x)
}

/// `[.., n, in] -> [.., n, out]` with a `[out, in]` weight.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", &[out_dim, in_dim], Init::XavierUniform)?,
            bias: Some(s.get("bias", &[out_dim], Init::Zeros)?),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("non-scalar input");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, in_dim))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = kernels::bias_add(&y, b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-scalar") = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.get("gamma", &[dim], Init::Ones)?,
            beta: s.get("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        kernels::layer_norm(x, &self.gamma, &self.beta, LN_EPS)
    }
}

/// Converts a `[b, n]` padding mask (1 = padded) into an additive
/// `[b, 1, 1, n]` attention bias.
pub fn attention_bias(pad_mask: &Tensor) -> Result<Tensor> {
    let (b, n) = pad_mask.dims2()?;
    Ok((pad_mask.to_dtype(DType::F32)? * MASK_BIAS)?.reshape((b, 1, 1, n))?)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(s: &Scope, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(&s.pp("qkv"), dim, 3 * dim)?,
            out: Linear::new(&s.pp("out"), dim, dim)?,
            heads,
            dim,
        })
    }

    /// Self-attention over `[b, n, dim]`; `bias` is `[b, 1, 1, n]` or absent.
    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        let hd = self.dim / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, n, 3, self.heads, hd))?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let mut logits = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        if let Some(bias) = bias {
            logits = logits.broadcast_add(bias)?;
        }
        let attn = softmax_last(&logits)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, self.dim))?;
        self.out.forward(&y)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    dropout: f64,
}

impl EncoderLayer {
    pub fn new(s: &Scope, dim: usize, heads: usize, ffn_dim: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&s.pp("ln1"), dim)?,
            attn: MultiHeadAttention::new(&s.pp("attn"), dim, heads)?,
            ln2: LayerNorm::new(&s.pp("ln2"), dim)?,
            ff1: Linear::new(&s.pp("ff1"), dim, ffn_dim)?,
            ff2: Linear::new(&s.pp("ff2"), ffn_dim, dim)?,
            dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>, ctx: &mut Ctx) -> Result<Tensor> {
        let a = self.attn.forward(&self.ln1.forward(x)?, bias)?;
        let x = (x + ctx.dropout(&a, self.dropout)?)?;
        let h = self.ff1.forward(&self.ln2.forward(&x)?)?.relu()?;
        let h = self.ff2.forward(&ctx.dropout(&h, self.dropout)?)?;
        Ok((&x + ctx.dropout(&h, self.dropout)?)?)
    }
}

/// A stack of encoder layers followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
}

impl Encoder {
    pub fn new(
        s: &Scope,
        layers: usize,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(&s.pp(format!("layer{i}")), dim, heads, ffn_dim, dropout))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            norm: LayerNorm::new(&s.pp("norm"), dim)?,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `pad_mask` is `[b, n]` with 1 at padded positions.
    pub fn forward(&self, x: &Tensor, pad_mask: Option<&Tensor>, ctx: &mut Ctx) -> Result<Tensor> {
        let bias = pad_mask.map(attention_bias).transpose()?;
        let mut x = x.clone();
        for layer in &self.layers {
            x = layer.forward(&x, bias.as_ref(), ctx)?;
        }
        self.norm.forward(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;
    use candle_core::{Device, Var};
    use rand::SeedableRng;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f32, 2.0, 3.0], [-1e9, 0.0, 0.0]], &Device::Cpu).unwrap();
        let y = softmax_last(&x).unwrap().to_vec2::<f32>().unwrap();
        for row in &y {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(y[1][0], 0.0);
        assert!((y[1][1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_normalises() {
        let store = ParamStore::new(0, Device::Cpu);
        let ln = LayerNorm::new(&store.root(), 4).unwrap();
        let x = Tensor::new(&[[1.0f32, 2.0, 3.0, 10.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f32>().unwrap();
        let mean: f32 = y[0].iter().sum::<f32>() / 4.0;
        let var: f32 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn layer_norm_has_gradients() {
        let x = Var::new(&[[0.3f32, -1.0, 2.0]], &Device::Cpu).unwrap();
        let store = ParamStore::new(0, Device::Cpu);
        let ln = LayerNorm::new(&store.root(), 3).unwrap();
        let y = ln.forward(x.as_tensor()).unwrap();
        let w = Tensor::new(&[[1.0f32, 2.0, 3.0]], &Device::Cpu).unwrap();
        let g = (y * w).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(g.get(x.as_tensor()).is_some());
        assert!(g.get(&store.get("gamma").unwrap()).is_some());
    }

    #[test]
    fn padded_keys_do_not_affect_unpadded_queries() {
        let store = ParamStore::new(3, Device::Cpu);
        let enc = Encoder::new(&store.root(), 2, 8, 2, 16, 0.0).unwrap();
        let dev = Device::Cpu;
        let base: Vec<f32> = (0..5 * 8).map(|i| ((i * 37 % 11) as f32 - 5.0) / 5.0).collect();
        let mut other = base.clone();
        for v in &mut other[3 * 8..] {
            *v += 7.0;
        }
        let mask = Tensor::new(&[[0f32, 0., 0., 1., 1.]], &dev).unwrap();
        let run = |data: &[f32]| {
            let x = Tensor::from_vec(data.to_vec(), (1, 5, 8), &dev).unwrap();
            enc.forward(&x, Some(&mask), &mut Ctx::eval())
                .unwrap()
                .narrow(1, 0, 3)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        };
        let (a, b) = (run(&base), run(&other));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn dropout_only_in_training() {
        let x = Tensor::ones((4, 100), DType::F32, &Device::Cpu).unwrap();
        let same = Ctx::eval().dropout(&x, 0.5).unwrap();
        assert_eq!(same.sum_all().unwrap().to_scalar::<f32>().unwrap(), 400.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = Ctx::train(&mut rng).dropout(&x, 0.5).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        let kept = v.iter().filter(|&&e| e > 0.0).count();
        assert!((150..250).contains(&kept));
    }
}
