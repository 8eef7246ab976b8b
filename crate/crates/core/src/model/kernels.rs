//! Fused CPU kernels with hand-written backward passes.
//!
//! Composing layer norm, softmax and bias addition from primitive ops costs
//! several strided reductions in the backward pass; these kernels do one
//! pass over contiguous rows instead. All of them take and return f32.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor};

use crate::error::Result;

fn slice<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f32]> {
    let data = s.as_slice::<f32>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

fn vec_of(t: &Tensor) -> candle_core::Result<Vec<f32>> {
    t.contiguous()?.flatten_all()?.to_vec1::<f32>()
}

fn last_dim(shape: &Shape) -> usize {
    *shape.dims().last().unwrap_or(&1)
}

fn check_f32(t: &Tensor) -> Result<()> {
    if t.dtype() != DType::F32 {
        return Err(candle_core::Error::Msg(format!("fused kernels need f32, got {:?}", t.dtype())).into());
    }
    Ok(())
}

struct LayerNormOp {
    eps: f32,
}

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "fused-layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (x, gamma, beta) = (slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?);
        let d = last_dim(l1.shape());
        let mut out = vec![0f32; x.len()];
        for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let (mean, rstd) = moments(row, self.eps);
            for i in 0..d {
                o[i] = (row[i] - mean) * rstd * gamma[i] + beta[i];
            }
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let d = x.dims().last().copied().unwrap_or(1);
        let (xv, gv, gam) = (vec_of(x)?, vec_of(grad)?, vec_of(gamma)?);
        let mut dx = vec![0f32; xv.len()];
        let mut dgamma = vec![0f32; d];
        let mut dbeta = vec![0f32; d];
        let mut xhat = vec![0f32; d];
        let mut dxhat = vec![0f32; d];
        for ((row, g), out) in xv.chunks_exact(d).zip(gv.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
            let (mean, rstd) = moments(row, self.eps);
            let (mut s1, mut s2) = (0f32, 0f32);
            for i in 0..d {
                xhat[i] = (row[i] - mean) * rstd;
                dxhat[i] = g[i] * gam[i];
                dgamma[i] += g[i] * xhat[i];
                dbeta[i] += g[i];
                s1 += dxhat[i];
                s2 += dxhat[i] * xhat[i];
            }
            let (m1, m2) = (s1 / d as f32, s2 / d as f32);
            for i in 0..d {
                out[i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
            }
        }
        let dev = x.device();
        Ok((
            Some(Tensor::from_vec(dx, x.shape(), dev)?),
            Some(Tensor::from_vec(dgamma, d, dev)?),
            Some(Tensor::from_vec(dbeta, d, dev)?),
        ))
    }
}

fn moments(row: &[f32], eps: f32) -> (f32, f32) {
    let d = row.len() as f32;
    let mean = row.iter().sum::<f32>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Layer norm over the last dim with affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    check_f32(x)?;
    Ok(x.contiguous()?.apply_op3(gamma, beta, LayerNormOp { eps: eps as f32 })?)
}

struct SoftmaxOp;

impl CustomOp1 for SoftmaxOp {
    fn name(&self) -> &'static str {
        "fused-softmax"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = slice(s, l)?;
        let d = last_dim(l.shape());
        let mut out = vec![0f32; x.len()];
        for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0f32;
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = (v - max).exp();
                sum += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= sum;
            }
        }
        Ok((CpuStorage::F32(out), l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let d = res.dims().last().copied().unwrap_or(1);
        let (y, g) = (vec_of(res)?, vec_of(grad)?);
        let mut dx = vec![0f32; y.len()];
        for ((yr, gr), o) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
            let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for i in 0..d {
                o[i] = yr[i] * (gr[i] - dot);
            }
        }
        Ok(Some(Tensor::from_vec(dx, res.shape(), res.device())?))
    }
}

/// Numerically stable softmax over the last dim.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    check_f32(x)?;
    Ok(x.contiguous()?.apply_op1(SoftmaxOp)?)
}

struct BiasAddOp;

impl CustomOp2 for BiasAddOp {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (x, b) = (slice(s1, l1)?, slice(s2, l2)?);
        let d = b.len();
        let mut out = x.to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        _x: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let d = b.elem_count();
        let g = vec_of(grad)?;
        let mut db = vec![0f32; d];
        for row in g.chunks_exact(d) {
            for (acc, v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
        Ok((Some(grad.clone()), Some(Tensor::from_vec(db, b.shape(), b.device())?)))
    }
}

/// `x + b` broadcast over the last dim of `x`, with `b` of shape `[d]`.
pub fn bias_add(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_f32(x)?;
    Ok(x.contiguous()?.apply_op2(&b.contiguous()?, BiasAddOp)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn close(a: &Tensor, b: &Tensor, tol: f32) {
        let a = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = b.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    fn data(shape: (usize, usize, usize)) -> Tensor {
        let n = shape.0 * shape.1 * shape.2;
        let v: Vec<f32> = (0..n).map(|i| ((i * 7919 % 113) as f32 - 56.0) / 17.0).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn weights(shape: (usize, usize, usize)) -> Tensor {
        let n = shape.0 * shape.1 * shape.2;
        let v: Vec<f32> = (0..n).map(|i| ((i * 31 % 29) as f32 - 14.0) / 9.0).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn layer_norm_matches_composed() {
        let shape = (2, 3, 8);
        let x = Var::from_tensor(&data(shape)).unwrap();
        let gamma = Var::from_tensor(&Tensor::new(&[1.0f32, 0.5, 2.0, -1.0, 0.3, 1.5, 0.9, 1.1], &Device::Cpu).unwrap()).unwrap();
        let beta = Var::from_tensor(&Tensor::new(&[0.1f32, 0.0, -0.2, 0.3, 0.0, 0.5, -0.1, 0.2], &Device::Cpu).unwrap()).unwrap();
        let w = weights(shape);

        let fused = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        let mean = x.mean_keepdim(D::Minus1).unwrap();
        let xc = x.broadcast_sub(&mean).unwrap();
        let var = xc.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        let composed = xc
            .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&gamma)
            .unwrap()
            .broadcast_add(&beta)
            .unwrap();
        close(&fused, &composed, 1e-5);

        let g1 = (fused * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (composed * &w).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &gamma, &beta] {
            close(g1.get(v).unwrap(), g2.get(v).unwrap(), 1e-4);
        }
    }

    #[test]
    fn softmax_matches_composed() {
        let shape = (2, 4, 6);
        let x = Var::from_tensor(&data(shape)).unwrap();
        let w = weights(shape);
        let fused = softmax(&x).unwrap();
        let e = x.exp().unwrap();
        let composed = e.broadcast_div(&e.sum_keepdim(D::Minus1).unwrap()).unwrap();
        close(&fused, &composed, 1e-6);
        let g1 = (fused * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (composed * &w).unwrap().sum_all().unwrap().backward().unwrap();
        close(g1.get(&x).unwrap(), g2.get(&x).unwrap(), 1e-5);
    }

    #[test]
    fn bias_add_matches_broadcast() {
        let shape = (3, 5, 4);
        let x = Var::from_tensor(&data(shape)).unwrap();
        let b = Var::new(&[0.5f32, -1.0, 2.0, 0.25], &Device::Cpu).unwrap();
        let w = weights(shape);
        let fused = bias_add(&x, &b).unwrap();
        let composed = x.broadcast_add(&b).unwrap();
        close(&fused, &composed, 0.0);
        let g1 = (fused * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (composed * &w).unwrap().sum_all().unwrap().backward().unwrap();
        close(g1.get(&x).unwrap(), g2.get(&x).unwrap(), 1e-6);
        close(g1.get(&b).unwrap(), g2.get(&b).unwrap(), 1e-5);
    }

    #[test]
    fn masked_softmax_ignores_large_negative() {
        let x = Tensor::new(&[[0.0f32, 1.0, -1e9]], &Device::Cpu).unwrap();
        let y = softmax(&x).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(y[0][2], 0.0);
        assert!((y[0][0] + y[0][1] - 1.0).abs() < 1e-6);
    }
}
