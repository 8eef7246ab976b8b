//! Box representations, overlap measures and the box-regression loss.
//!
//! Boxes are normalized to the image extent and stored in center form
//! `(cx, cy, w, h)`. Everything here is `f64` and pure; the tensor version of
//! the loss used during training lives in [`crate::train::loss`] and is
//! checked against [`loss_gradient`].

use serde::{Deserialize, Serialize};

/// Smallest accepted width/height. Anything at or below is degenerate.
pub const MIN_EXTENT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BoxError {
    #[error("box coordinate {field} = {value} is not finite")]
    NonFinite { field: &'static str, value: f64 },
    #[error("box center {field} = {value} lies outside [0, 1]")]
    CenterOutOfRange { field: &'static str, value: f64 },
    #[error("box extent {field} = {value} must be in ({MIN_EXTENT}, 1]")]
    Degenerate { field: &'static str, value: f64 },
}

/// Normalized center-format box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoundingBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = BoxError;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        BoundingBox::new(raw.cx, raw.cy, raw.w, raw.h)
    }
}

impl From<BoundingBox> for RawBox {
    fn from(b: BoundingBox) -> Self {
        RawBox {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
        }
    }
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, BoxError> {
        for (field, value) in [("cx", cx), ("cy", cy), ("w", w), ("h", h)] {
            if !value.is_finite() {
                return Err(BoxError::NonFinite { field, value });
            }
        }
        for (field, value) in [("cx", cx), ("cy", cy)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(BoxError::CenterOutOfRange { field, value });
            }
        }
        for (field, value) in [("w", w), ("h", h)] {
            if value <= MIN_EXTENT || value > 1.0 {
                return Err(BoxError::Degenerate { field, value });
            }
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Builds a box from values already squashed into `(0, 1)`, such as the
    /// logistic outputs of the regression head. Extents that underflowed in
    /// single precision are lifted to just above [`MIN_EXTENT`].
    pub fn from_unit_outputs(values: [f64; 4]) -> Self {
        let unit = |v: f64| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.5 };
        let extent = |v: f64| unit(v).max(2.0 * MIN_EXTENT);
        Self {
            cx: unit(values[0]),
            cy: unit(values[1]),
            w: extent(values[2]),
            h: extent(values[3]),
        }
    }

    pub fn from_corners(c: CornerBox) -> Result<Self, BoxError> {
        Self::new(
            (c.x0 + c.x1) / 2.0,
            (c.y0 + c.y1) / 2.0,
            c.x1 - c.x0,
            c.y1 - c.y0,
        )
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn to_corners(&self) -> CornerBox {
        to_corners(self)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corner form clipped to the unit square.
    pub fn clamped_corners(&self) -> CornerBox {
        let c = self.to_corners();
        CornerBox {
            x0: c.x0.max(0.0),
            y0: c.y0.max(0.0),
            x1: c.x1.min(1.0),
            y1: c.y1.min(1.0),
        }
    }

    /// True when the unclipped corner form stays inside `[0, 1]²`.
    pub fn is_inside_unit_square(&self) -> bool {
        let c = self.to_corners();
        c.x0 >= -1e-12 && c.y0 >= -1e-12 && c.x1 <= 1.0 + 1e-12 && c.y1 <= 1.0 + 1e-12
    }
}

/// Normalized corner-format box, `x0 <= x1` and `y0 <= y1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl CornerBox {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

pub fn to_corners(b: &BoundingBox) -> CornerBox {
    CornerBox {
        x0: b.cx - b.w / 2.0,
        y0: b.cy - b.h / 2.0,
        x1: b.cx + b.w / 2.0,
        y1: b.cy + b.h / 2.0,
    }
}

fn intersection_area(a: &CornerBox, b: &CornerBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    iw * ih
}

fn enclosing_area(a: &CornerBox, b: &CornerBox) -> f64 {
    (a.x1.max(b.x1) - a.x0.min(b.x0)) * (a.y1.max(b.y1) - a.y0.min(b.y0))
}

/// Intersection over union of the two corner forms.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let inter = intersection_area(&ca, &cb);
    let union = ca.area() + cb.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered
/// by the union. Lies in `[-1, 1]` and never exceeds [`iou`].
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let inter = intersection_area(&ca, &cb);
    let union = ca.area() + cb.area() - inter;
    let enclosing = enclosing_area(&ca, &cb);
    if union <= 0.0 || enclosing <= 0.0 {
        return 0.0;
    }
    inter / union - (enclosing - union) / enclosing
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouVariant {
    Plain,
    #[default]
    Generalized,
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("loss weights must be positive and finite (lambda_l1 = {lambda_l1}, lambda_iou = {lambda_iou})")]
pub struct InvalidLossConfig {
    pub lambda_l1: f64,
    pub lambda_iou: f64,
}

/// Weights of the L1 and overlap terms of the regression loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_l1: f64,
    pub lambda_iou: f64,
    pub iou_variant: IouVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_l1: 5.0,
            lambda_iou: 2.0,
            iou_variant: IouVariant::Generalized,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), InvalidLossConfig> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.lambda_l1) && ok(self.lambda_iou) {
            Ok(())
        } else {
            Err(InvalidLossConfig {
                lambda_l1: self.lambda_l1,
                lambda_iou: self.lambda_iou,
            })
        }
    }

    pub fn combine(&self, l1_term: f64, iou_term: f64) -> f64 {
        self.lambda_l1 * l1_term + self.lambda_iou * iou_term
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1_term: f64,
    pub iou_term: f64,
    pub total: f64,
}

/// Weighted L1 + (1 - IoU or 1 - GIoU) loss for one predicted box.
pub fn loss(pred: &BoundingBox, gt: &BoundingBox, cfg: &LossConfig) -> LossBreakdown {
    let l1_term = pred
        .to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / 4.0;
    let overlap = match cfg.iou_variant {
        IouVariant::Plain => iou(pred, gt),
        IouVariant::Generalized => giou(pred, gt),
    };
    let iou_term = 1.0 - overlap;
    LossBreakdown {
        l1_term,
        iou_term,
        total: cfg.combine(l1_term, iou_term),
    }
}

/// Analytic gradient of `loss(pred, gt, cfg).total` with respect to the
/// predicted `(cx, cy, w, h)`.
///
/// Kinks (coinciding edges, `pred == gt` per coordinate) take the one-sided
/// derivative that treats the prediction's edge as the inner one.
pub fn loss_gradient(pred: &BoundingBox, gt: &BoundingBox, cfg: &LossConfig) -> [f64; 4] {
    let mut grad = [0.0; 4];
    for (g, (p, t)) in grad.iter_mut().zip(pred.to_array().iter().zip(gt.to_array())) {
        *g = cfg.lambda_l1 * sign(p - t) / 4.0;
    }

    let p = pred.to_corners();
    let t = gt.to_corners();

    // Derivatives with respect to the corner coordinates (x0, y0, x1, y1).
    let iw_raw = p.x1.min(t.x1) - p.x0.max(t.x0);
    let ih_raw = p.y1.min(t.y1) - p.y0.max(t.y0);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let d_iw = if iw_raw > 0.0 {
        [
            -ind(p.x0 > t.x0),
            0.0,
            ind(p.x1 < t.x1),
            0.0,
        ]
    } else {
        [0.0; 4]
    };
    let d_ih = if ih_raw > 0.0 {
        [
            0.0,
            -ind(p.y0 > t.y0),
            0.0,
            ind(p.y1 < t.y1),
        ]
    } else {
        [0.0; 4]
    };
    let (pw, ph) = (p.width(), p.height());
    let d_area = [-ph, -pw, ph, pw];
    let union = p.area() + t.area() - inter;

    let mut d_overlap = [0.0; 4];
    for k in 0..4 {
        let d_inter = d_iw[k] * ih + iw * d_ih[k];
        let d_union = d_area[k] - d_inter;
        d_overlap[k] = (d_inter * union - inter * d_union) / (union * union);
    }

    if cfg.iou_variant == IouVariant::Generalized {
        let ew = p.x1.max(t.x1) - p.x0.min(t.x0);
        let eh = p.y1.max(t.y1) - p.y0.min(t.y0);
        let enclosing = ew * eh;
        let d_ew = [-ind(p.x0 < t.x0), 0.0, ind(p.x1 > t.x1), 0.0];
        let d_eh = [0.0, -ind(p.y0 < t.y0), 0.0, ind(p.y1 > t.y1)];
        for k in 0..4 {
            let d_inter = d_iw[k] * ih + iw * d_ih[k];
            let d_union = d_area[k] - d_inter;
            let d_enc = d_ew[k] * eh + ew * d_eh[k];
            // giou = iou - 1 + union / enclosing
            d_overlap[k] += (d_union * enclosing - union * d_enc) / (enclosing * enclosing);
        }
    }

    // x0 = cx - w/2, x1 = cx + w/2 (same for y).
    let d_corner = d_overlap.map(|d| -cfg.lambda_iou * d);
    grad[0] += d_corner[0] + d_corner[2];
    grad[1] += d_corner[1] + d_corner[3];
    grad[2] += (d_corner[2] - d_corner[0]) / 2.0;
    grad[3] += (d_corner[3] - d_corner[1]) / 2.0;
    grad
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn ind(cond: bool) -> f64 {
    if cond {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn corners_of_reference_boxes() {
        let c = bx(0.5, 0.5, 1.0, 1.0).to_corners();
        assert_eq!((c.x0, c.y0, c.x1, c.y1), (0.0, 0.0, 1.0, 1.0));
        let c = bx(0.25, 0.25, 0.5, 0.5).to_corners();
        assert_eq!((c.x0, c.y0, c.x1, c.y1), (0.0, 0.0, 0.5, 0.5));
        let c = bx(0.5, 0.5, 0.2, 0.4).to_corners();
        assert_abs_diff_eq!(c.x0, 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(c.y0, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(c.x1, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(c.y1, 0.7, epsilon = 1e-12);
    }

    #[test]
    fn corner_round_trip() {
        let b = bx(0.31, 0.77, 0.13, 0.41);
        let back = BoundingBox::from_corners(b.to_corners()).unwrap();
        for (x, y) in b.to_array().iter().zip(back.to_array()) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn iou_reference_values() {
        let a = bx(0.5, 0.5, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        let d1 = bx(0.2, 0.2, 0.2, 0.2);
        let d2 = bx(0.8, 0.8, 0.2, 0.2);
        assert_eq!(iou(&d1, &d2), 0.0);
        let q = bx(0.25, 0.25, 0.5, 0.5);
        assert_abs_diff_eq!(iou(&q, &a), 0.142857, epsilon = 1e-6);
    }

    #[test]
    fn giou_reference_values() {
        let a = bx(0.4, 0.6, 0.3, 0.2);
        assert_abs_diff_eq!(giou(&a, &a), 1.0, epsilon = 1e-12);
        // Enclosure [0.1,0.9]^2 has area 0.64, union 0.08: 0 - 0.56/0.64.
        let d1 = bx(0.2, 0.2, 0.2, 0.2);
        let d2 = bx(0.8, 0.8, 0.2, 0.2);
        assert_abs_diff_eq!(giou(&d1, &d2), -0.875, epsilon = 1e-9);
    }

    #[test]
    fn loss_reference_values() {
        let cfg = LossConfig::default();
        let b = bx(0.3, 0.6, 0.2, 0.3);
        let l = loss(&b, &b, &cfg);
        assert_eq!((l.l1_term, l.iou_term, l.total), (0.0, 0.0, 0.0));
        assert_abs_diff_eq!(cfg.combine(0.1, 0.3), 1.1, epsilon = 1e-12);

        let plain = LossConfig {
            iou_variant: IouVariant::Plain,
            ..cfg
        };
        let l = loss(&bx(0.2, 0.2, 0.2, 0.2), &bx(0.8, 0.8, 0.2, 0.2), &plain);
        assert_eq!(l.iou_term, 1.0);
        assert_abs_diff_eq!(l.total, 5.0 * l.l1_term + 2.0 * l.iou_term, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_and_invalid_boxes_rejected() {
        assert!(matches!(
            BoundingBox::new(0.5, 0.5, 0.0, 0.2),
            Err(BoxError::Degenerate { field: "w", .. })
        ));
        assert!(BoundingBox::new(0.5, 0.5, 1e-6, 0.2).is_err());
        assert!(BoundingBox::new(0.5, 0.5, 0.2, 1.5).is_err());
        assert!(BoundingBox::new(1.2, 0.5, 0.2, 0.2).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.5, 0.2, 0.2).is_err());
        let json = r#"{"cx":0.5,"cy":0.5,"w":0.0,"h":0.1}"#;
        assert!(serde_json::from_str::<BoundingBox>(json).is_err());
    }

    #[test]
    fn json_encoding_shape() {
        let b = bx(0.5, 0.25, 0.125, 0.5);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, r#"{"cx":0.5,"cy":0.25,"w":0.125,"h":0.5}"#);
        assert_eq!(serde_json::from_str::<BoundingBox>(&s).unwrap(), b);
    }

    #[test]
    fn squashed_outputs_always_valid() {
        let b = BoundingBox::from_unit_outputs([0.0, 1.0, 0.0, f64::NAN]);
        assert!(BoundingBox::new(b.cx(), b.cy(), b.w(), b.h()).is_ok());
    }

    #[test]
    fn invalid_loss_weights() {
        let cfg = LossConfig {
            lambda_l1: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }
}
