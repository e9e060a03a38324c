//! Axis-aligned box arithmetic in normalized coordinates: IoU, the
//! complete-IoU (CIoU) loss and its analytic gradient.
//!
//! CIoU extends plain IoU with two penalties: the squared center distance
//! over the squared diagonal of the smallest enclosing box, and an
//! aspect-ratio consistency term weighted by a trade-off factor. All
//! computation is in f64; pixel conversion happens only at I/O boundaries.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};

/// Axis-aligned box in center form. Coordinates are normalized to the image
/// but centers may drift outside [0,1] during optimization; only finiteness
/// and non-negative extent are enforced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.cx, self.cy, self.w, self.h] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("non-finite box field in {self:?}")));
            }
        }
        if self.w < 0.0 || self.h < 0.0 {
            return Err(Error::invalid(format!("negative box extent in {self:?}")));
        }
        Ok(())
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    #[inline]
    pub fn x2(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    #[inline]
    pub fn y1(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    #[inline]
    pub fn y2(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Every intermediate of the CIoU loss, exposed so tests and diagnostics can
/// check each term in isolation.
#[derive(Debug, Clone, Copy)]
pub struct CIoUBreakdown {
    pub iou: f64,
    pub center_dist_sq: f64,
    pub enclosing_diag_sq: f64,
    pub upsilon: f64,
    pub alpha: f64,
    pub loss: f64,
}

#[inline]
pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Intersection over union. Two zero-area boxes yield 0 by convention.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

#[inline]
fn aspect_angle(w: f64, h: f64) -> f64 {
    // A collapsing box (h = 0) is treated as ratio +inf so the angle stays
    // finite instead of going NaN.
    if h > 0.0 {
        (w / h).atan()
    } else {
        FRAC_PI_2
    }
}

/// Aspect-ratio consistency term: (4/pi^2) (arctan(w_gt/h_gt) - arctan(w/h))^2.
/// Always in [0,1]; zero heights are handled via the +inf ratio convention.
pub fn aspect_consistency(gt: &BBox, pred: &BBox) -> f64 {
    let d = aspect_angle(gt.w, gt.h) - aspect_angle(pred.w, pred.h);
    (4.0 / (PI * PI)) * d * d
}

/// Trade-off factor between the IoU and aspect terms. Returns 0 when both the
/// overlap is perfect and the aspect ratios agree (0/0 convention).
pub fn ciou_alpha(iou: f64, upsilon: f64) -> f64 {
    let denom = (1.0 - iou) + upsilon;
    if denom == 0.0 {
        0.0
    } else {
        upsilon / denom
    }
}

/// CIoU loss: 1 - IoU + rho^2/c^2 + alpha * upsilon, where rho is the center
/// distance and c the diagonal of the smallest enclosing box.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> Result<CIoUBreakdown> {
    pred.validate()?;
    gt.validate()?;
    if gt.area() <= 0.0 {
        return Err(Error::invalid(format!("zero-area ground truth {gt:?}")));
    }

    let iou = iou_unchecked(pred, gt);
    let dx = pred.cx - gt.cx;
    let dy = pred.cy - gt.cy;
    let center_dist_sq = dx * dx + dy * dy;
    let cw = pred.x2().max(gt.x2()) - pred.x1().min(gt.x1());
    let ch = pred.y2().max(gt.y2()) - pred.y1().min(gt.y1());
    let enclosing_diag_sq = cw * cw + ch * ch;
    let upsilon = aspect_consistency(gt, pred);
    let alpha = ciou_alpha(iou, upsilon);
    let loss = 1.0 - iou + center_dist_sq / enclosing_diag_sq + alpha * upsilon;

    Ok(CIoUBreakdown {
        iou,
        center_dist_sq,
        enclosing_diag_sq,
        upsilon,
        alpha,
        loss,
    })
}

/// Analytic gradient of [`ciou_loss`] with respect to pred's (cx, cy, w, h).
///
/// The trade-off factor alpha is held constant during differentiation, so
/// the aspect term contributes alpha * d(upsilon). Min/max corner selections
/// use strict comparisons; exact corner ties take the zero branch, which is a
/// valid subgradient and never occurs for generic inputs.
pub fn ciou_grad(pred: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    pred.validate()?;
    gt.validate()?;
    if gt.area() <= 0.0 {
        return Err(Error::invalid(format!("zero-area ground truth {gt:?}")));
    }
    if pred.w <= 0.0 || pred.h <= 0.0 {
        return Err(Error::invalid(format!("degenerate predicted box {pred:?}")));
    }

    let (x1, x2, y1, y2) = (pred.x1(), pred.x2(), pred.y1(), pred.y2());
    let (gx1, gx2, gy1, gy2) = (gt.x1(), gt.x2(), gt.y1(), gt.y2());

    let iw = x2.min(gx2) - x1.max(gx1);
    let ih = y2.min(gy2) - y1.max(gy1);
    let inter = if iw > 0.0 && ih > 0.0 { iw * ih } else { 0.0 };
    let union = pred.area() + gt.area() - inter;
    let iou = inter / union;

    // Indicator of which corner the min/max picked, as 0.0 or 1.0.
    let ind = |cond: bool| if cond { 1.0 } else { 0.0 };

    // Intersection extent derivatives (zero when the extent is clamped away).
    let (diw_dx, diw_dw, dih_dy, dih_dh) = if inter > 0.0 {
        (
            ind(x2 < gx2) - ind(x1 > gx1),
            0.5 * ind(x2 < gx2) + 0.5 * ind(x1 > gx1),
            ind(y2 < gy2) - ind(y1 > gy1),
            0.5 * ind(y2 < gy2) + 0.5 * ind(y1 > gy1),
        )
    } else {
        (0.0, 0.0, 0.0, 0.0)
    };
    let di = [
        ih.max(0.0) * diw_dx,
        iw.max(0.0) * dih_dy,
        ih.max(0.0) * diw_dw,
        iw.max(0.0) * dih_dh,
    ];
    let darea = [0.0, 0.0, pred.h, pred.w];
    let mut diou = [0.0; 4];
    for k in 0..4 {
        let du = darea[k] - di[k];
        diou[k] = (union * di[k] - inter * du) / (union * union);
    }

    // Center-distance penalty rho^2 / c^2.
    let dx_c = pred.cx - gt.cx;
    let dy_c = pred.cy - gt.cy;
    let rho_sq = dx_c * dx_c + dy_c * dy_c;
    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let c_sq = cw * cw + ch * ch;
    let drho = [2.0 * dx_c, 2.0 * dy_c, 0.0, 0.0];
    let dcw = [
        ind(x2 > gx2) - ind(x1 < gx1),
        0.0,
        0.5 * ind(x2 > gx2) + 0.5 * ind(x1 < gx1),
        0.0,
    ];
    let dch = [
        0.0,
        ind(y2 > gy2) - ind(y1 < gy1),
        0.0,
        0.5 * ind(y2 > gy2) + 0.5 * ind(y1 < gy1),
    ];
    let mut dpen = [0.0; 4];
    for k in 0..4 {
        let dc_sq = 2.0 * cw * dcw[k] + 2.0 * ch * dch[k];
        dpen[k] = (c_sq * drho[k] - rho_sq * dc_sq) / (c_sq * c_sq);
    }

    // Aspect term with alpha frozen. d(upsilon)/dw and /dh use the exact
    // arctan derivative, no small-angle shortcut, so finite differences of
    // the loss value match this gradient.
    let upsilon = aspect_consistency(gt, pred);
    let alpha = ciou_alpha(iou, upsilon);
    let d_angle = aspect_angle(gt.w, gt.h) - aspect_angle(pred.w, pred.h);
    let k_ups = 8.0 / (PI * PI) * d_angle;
    let wh_sq = pred.w * pred.w + pred.h * pred.h;
    let dups_dw = k_ups * (-pred.h / wh_sq);
    let dups_dh = k_ups * (pred.w / wh_sq);

    Ok([
        -diou[0] + dpen[0],
        -diou[1] + dpen[1],
        -diou[2] + dpen[2] + alpha * dups_dw,
        -diou[3] + dpen[3] + alpha * dups_dh,
    ])
}
