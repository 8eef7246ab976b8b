//! Differentiable box-regression loss over `[b, 4]` tensors.

use candle_core::Tensor;

use crate::error::Result;
use crate::geometry::{IouVariant, LossConfig};

/// Batch means of the two loss terms and their weighted sum (scalars).
#[derive(Debug, Clone)]
pub struct TensorLoss {
    pub total: Tensor,
    pub l1: Tensor,
    pub iou: Tensor,
}

fn col(t: &Tensor, i: usize) -> Result<Tensor> {
    Ok(t.narrow(1, i, 1)?.squeeze(1)?)
}

/// Mean over the batch of `λ_l1·mean|p−g| + λ_iou·(1 − overlap)`, with
/// boxes in `(cx, cy, w, h)` order.
pub fn box_loss(pred: &Tensor, gt: &Tensor, cfg: &LossConfig) -> Result<TensorLoss> {
    let l1 = (pred - gt)?.abs()?.mean_all()?;

    let corners = |t: &Tensor| -> Result<[Tensor; 4]> {
        let (cx, cy) = (col(t, 0)?, col(t, 1)?);
        let (hw, hh) = ((col(t, 2)? * 0.5)?, (col(t, 3)? * 0.5)?);
        Ok([(&cx - &hw)?, (&cy - &hh)?, (&cx + &hw)?, (&cy + &hh)?])
    };
    let [px0, py0, px1, py1] = corners(pred)?;
    let [tx0, ty0, tx1, ty1] = corners(gt)?;

    let iw = (px1.minimum(&tx1)? - px0.maximum(&tx0)?)?.relu()?;
    let ih = (py1.minimum(&ty1)? - py0.maximum(&ty0)?)?.relu()?;
    let inter = (iw * ih)?;
    let area_p = ((&px1 - &px0)? * (&py1 - &py0)?)?;
    let area_t = ((&tx1 - &tx0)? * (&ty1 - &ty0)?)?;
    let union = ((area_p + area_t)? - &inter)?;
    let mut overlap = (&inter / &union)?;
    if cfg.iou_variant == IouVariant::Generalized {
        let ew = (px1.maximum(&tx1)? - px0.minimum(&tx0)?)?;
        let eh = (py1.maximum(&ty1)? - py0.minimum(&ty0)?)?;
        let enclosing = (ew * eh)?;
        overlap = (overlap - ((&enclosing - &union)? / &enclosing)?)?;
    }
    let iou = (1.0 - overlap)?.mean_all()?;
    let total = ((&l1 * cfg.lambda_l1)? + (&iou * cfg.lambda_iou)?)?;
    Ok(TensorLoss { total, l1, iou })
}
