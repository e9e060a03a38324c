//! Grid target assignment, the composite detection loss, and raw-prediction
//! decoding.
//!
//! The head emits, per grid cell and slot, the channels
//! `[tx, ty, tw, th, obj, class_0 .. class_{K-1}]`, all raw logits. The loss
//! applies the squashing itself: sigmoid on everything, with box centers
//! decoded cell-relative and extents relative to the whole image. The total
//! is a sum of four non-negative components:
//!
//! * `ciou`   CIoU box regression over object slots,
//! * `obj`    binary cross-entropy of objectness against 1 over object slots,
//! * `noobj`  the same against 0 over empty slots (weighted by lambda),
//! * `cls`    per-class binary cross-entropy over object slots.

use crate::error::{Error, Result};
use crate::geometry::{self, BBox};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA_NOOBJ: f64 = 0.5;
/// Probabilities are clamped to [EPS, 1-EPS] inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Binary cross-entropy of sigmoid(z) against target t, returning
/// (loss, d loss / d z). Only the value is clamped; the gradient keeps the
/// plain logit form p - t so a slot driven deep into saturation still gets
/// pulled back instead of going silent. The two disagree only beyond
/// |z| > ln(1/EPS), far outside anything the difference oracles visit.
#[inline]
fn bce_logit(z: f64, t: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let loss = -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
    (loss, p - t)
}

/// Ground-truth layout on the S x S grid: at most one gt box per (cell, slot).
#[derive(Debug, Clone)]
pub struct TargetGrid {
    pub s: usize,
    pub b: usize,
    pub classes: usize,
    slots: Vec<Option<(usize, BBox)>>,
    /// Boxes dropped because their cell already had `b` assignments.
    pub dropped: usize,
    /// Boxes skipped for an out-of-range center or empty area.
    pub skipped: usize,
}

impl TargetGrid {
    #[inline]
    fn index(&self, row: usize, col: usize, slot: usize) -> usize {
        (row * self.s + col) * self.b + slot
    }

    pub fn slot(&self, row: usize, col: usize, slot: usize) -> Option<&(usize, BBox)> {
        self.slots[self.index(row, col, slot)].as_ref()
    }

    pub fn is_obj(&self, row: usize, col: usize, slot: usize) -> bool {
        self.slots[self.index(row, col, slot)].is_some()
    }

    pub fn num_assigned(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }
}

/// Place each ground-truth box into the cell containing its center, at the
/// lowest free slot. Boxes beyond capacity are dropped (counted); boxes with
/// out-of-range centers or zero area are skipped (counted).
pub fn assign_targets(
    gt: &[(usize, BBox)],
    s: usize,
    b: usize,
    classes: usize,
) -> Result<TargetGrid> {
    if s == 0 || b == 0 || classes == 0 {
        return Err(Error::config("grid, slots and classes must be positive"));
    }
    let mut grid = TargetGrid {
        s,
        b,
        classes,
        slots: vec![None; s * s * b],
        dropped: 0,
        skipped: 0,
    };
    for &(class, bbox) in gt {
        if class >= classes {
            return Err(Error::config(format!(
                "class id {class} out of range for {classes} classes"
            )));
        }
        bbox.validate()?;
        let in_range =
            (0.0..1.0).contains(&bbox.cx) && (0.0..1.0).contains(&bbox.cy) && bbox.area() > 0.0;
        if !in_range {
            grid.skipped += 1;
            continue;
        }
        let row = ((bbox.cy * s as f64) as usize).min(s - 1);
        let col = ((bbox.cx * s as f64) as usize).min(s - 1);
        let mut placed = false;
        for slot in 0..b {
            let idx = grid.index(row, col, slot);
            if grid.slots[idx].is_none() {
                grid.slots[idx] = Some((class, bbox));
                placed = true;
                break;
            }
        }
        if !placed {
            grid.dropped += 1;
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub ciou: f64,
    pub obj: f64,
    pub noobj: f64,
    pub cls: f64,
    pub total: f64,
    pub lambda_noobj: f64,
}

/// Decode the box stored at a slot's four leading channels.
#[inline]
fn decode_box(tx: f64, ty: f64, tw: f64, th: f64, row: usize, col: usize, s: usize) -> BBox {
    // Extreme logits underflow the sigmoid to exactly 0 or 1; a collapsed
    // width or height would put the box outside the loss gradient's domain
    // mid-training, so pin the extent just inside (0, 1). The sigmoid slope
    // is below the clamp width there, so the chained gradient is unaffected
    // at any magnitude the finite-difference checks can resolve.
    BBox {
        cx: (col as f64 + sigmoid(tx)) / s as f64,
        cy: (row as f64 + sigmoid(ty)) / s as f64,
        w: sigmoid(tw).clamp(BCE_EPS, 1.0 - BCE_EPS),
        h: sigmoid(th).clamp(BCE_EPS, 1.0 - BCE_EPS),
    }
}

/// Ideal raw logits for a gt box at its assigned cell; decoding them
/// recovers the box up to float rounding.
pub fn encode_box(gt: &BBox, row: usize, col: usize, s: usize) -> [f64; 4] {
    [
        logit(gt.cx * s as f64 - col as f64),
        logit(gt.cy * s as f64 - row as f64),
        logit(gt.w),
        logit(gt.h),
    ]
}

fn check_pred_shape(pred: &Tensor, target: &TargetGrid) -> Result<usize> {
    let per_slot = 5 + target.classes;
    let expect = [target.s, target.s, target.b * per_slot];
    if pred.shape != expect {
        return Err(Error::config(format!(
            "prediction shape {:?} does not match target grid {:?}",
            pred.shape, expect
        )));
    }
    Ok(per_slot)
}

/// Composite loss and its gradient with respect to the raw prediction
/// tensor. The CIoU part differentiates with the trade-off factor alpha held
/// constant; everything else is plain BCE-through-sigmoid.
pub fn total_loss_grad(
    pred: &Tensor,
    target: &TargetGrid,
    lambda_noobj: f64,
) -> Result<(LossReport, Tensor)> {
    let per_slot = check_pred_shape(pred, target)?;
    let mut grad = Tensor::zeros(&pred.shape);
    let (mut ciou, mut obj, mut noobj, mut cls) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let s = target.s;

    for row in 0..s {
        for col in 0..s {
            for slot in 0..target.b {
                let base = pred.idx3(row, col, slot * per_slot);
                let obj_z = pred.data[base + 4] as f64;
                match target.slot(row, col, slot) {
                    None => {
                        let (l, g) = bce_logit(obj_z, 0.0);
                        noobj += l;
                        grad.data[base + 4] += (lambda_noobj * g) as f32;
                    }
                    Some(&(gt_class, gt_box)) => {
                        let (l, g) = bce_logit(obj_z, 1.0);
                        obj += l;
                        grad.data[base + 4] += g as f32;

                        for c in 0..target.classes {
                            let z = pred.data[base + 5 + c] as f64;
                            let t = if c == gt_class { 1.0 } else { 0.0 };
                            let (l, g) = bce_logit(z, t);
                            cls += l;
                            grad.data[base + 5 + c] += g as f32;
                        }

                        let (tx, ty, tw, th) = (
                            pred.data[base] as f64,
                            pred.data[base + 1] as f64,
                            pred.data[base + 2] as f64,
                            pred.data[base + 3] as f64,
                        );
                        let decoded = decode_box(tx, ty, tw, th, row, col, s);
                        let br = geometry::ciou_loss(&decoded, &gt_box)?;
                        ciou += br.loss;
                        let g4 = geometry::ciou_grad(&decoded, &gt_box)?;
                        let (sx, sy, sw, sh) = (sigmoid(tx), sigmoid(ty), sigmoid(tw), sigmoid(th));
                        grad.data[base] += (g4[0] * sx * (1.0 - sx) / s as f64) as f32;
                        grad.data[base + 1] += (g4[1] * sy * (1.0 - sy) / s as f64) as f32;
                        grad.data[base + 2] += (g4[2] * sw * (1.0 - sw)) as f32;
                        grad.data[base + 3] += (g4[3] * sh * (1.0 - sh)) as f32;
                    }
                }
            }
        }
    }
    grad.check_finite("loss gradient")?;
    let report = LossReport {
        ciou,
        obj,
        noobj,
        cls,
        total: ciou + obj + lambda_noobj * noobj + cls,
        lambda_noobj,
    };
    Ok((report, grad))
}

pub fn total_loss(pred: &Tensor, target: &TargetGrid, lambda_noobj: f64) -> Result<LossReport> {
    total_loss_grad(pred, target, lambda_noobj).map(|(r, _)| r)
}

/// One decoded, thresholded prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

/// Decode a raw prediction tensor. Confidence is objectness times the best
/// class score; detections are emitted when strictly above `conf_thresh`,
/// in (row, col, slot) scan order. Class ties resolve to the lowest index.
pub fn decode_predictions(
    pred: &Tensor,
    classes: usize,
    conf_thresh: f64,
) -> Result<Vec<Detection>> {
    if pred.shape.len() != 3 || pred.shape[0] != pred.shape[1] {
        return Err(Error::config(format!(
            "prediction tensor must be square-gridded, got {:?}",
            pred.shape
        )));
    }
    let per_slot = 5 + classes;
    if !pred.shape[2].is_multiple_of(per_slot) {
        return Err(Error::config(format!(
            "channel count {} is not a multiple of 5+K={per_slot}",
            pred.shape[2]
        )));
    }
    let s = pred.shape[0];
    let b = pred.shape[2] / per_slot;
    let mut out = Vec::new();
    for row in 0..s {
        for col in 0..s {
            for slot in 0..b {
                let base = pred.idx3(row, col, slot * per_slot);
                let obj = sigmoid(pred.data[base + 4] as f64);
                let mut best_c = 0usize;
                let mut best_score = f64::NEG_INFINITY;
                for c in 0..classes {
                    let score = sigmoid(pred.data[base + 5 + c] as f64);
                    if score > best_score {
                        best_score = score;
                        best_c = c;
                    }
                }
                let confidence = obj * best_score;
                if confidence > conf_thresh {
                    let bbox = decode_box(
                        pred.data[base] as f64,
                        pred.data[base + 1] as f64,
                        pred.data[base + 2] as f64,
                        pred.data[base + 3] as f64,
                        row,
                        col,
                        s,
                    );
                    out.push(Detection {
                        class: best_c,
                        bbox,
                        confidence,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn bb(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn assign_places_center_cell() {
        let grid = assign_targets(&[(0, bb(0.3, 0.3, 0.2, 0.2))], 2, 1, 2).unwrap();
        assert!(grid.is_obj(0, 0, 0));
        assert!(!grid.is_obj(0, 1, 0));
        assert!(!grid.is_obj(1, 0, 0));
        assert!(!grid.is_obj(1, 1, 0));
        assert_eq!(grid.num_assigned(), 1);
    }

    #[test]
    fn assign_empty_list_all_noobj() {
        let grid = assign_targets(&[], 2, 2, 3).unwrap();
        assert_eq!(grid.num_assigned(), 0);
        assert_eq!(grid.num_slots(), 8);
    }

    #[test]
    fn assign_drops_beyond_capacity_in_insertion_order() {
        let b0 = bb(0.3, 0.3, 0.1, 0.1);
        let b1 = bb(0.31, 0.3, 0.12, 0.1);
        let b2 = bb(0.3, 0.31, 0.1, 0.12);
        let grid = assign_targets(&[(0, b0), (1, b1), (0, b2)], 2, 2, 2).unwrap();
        assert_eq!(grid.num_assigned(), 2);
        assert_eq!(grid.dropped, 1);
        assert_eq!(grid.slot(0, 0, 0).unwrap(), &(0, b0));
        assert_eq!(grid.slot(0, 0, 1).unwrap(), &(1, b1));
    }

    #[test]
    fn assign_skips_out_of_range_center() {
        let grid = assign_targets(&[(0, bb(1.2, 0.5, 0.1, 0.1))], 2, 1, 2).unwrap();
        assert_eq!(grid.num_assigned(), 0);
        assert_eq!(grid.skipped, 1);
    }

    #[test]
    fn assign_rejects_bad_class() {
        assert!(assign_targets(&[(5, bb(0.5, 0.5, 0.1, 0.1))], 2, 1, 2).is_err());
    }

    #[test]
    fn noobj_grid_closed_form() {
        // All logits zero: every slot's objectness sits at 0.5, so the total
        // is lambda * S^2 * B * ln 2.
        let grid = assign_targets(&[], 2, 1, 2).unwrap();
        let pred = Tensor::zeros(&[2, 2, 7]);
        let report = total_loss(&pred, &grid, 0.5).unwrap();
        assert!((report.total - 1.386294).abs() < 1e-5, "{}", report.total);
        assert_eq!(report.ciou, 0.0);
        assert_eq!(report.obj, 0.0);
        assert_eq!(report.cls, 0.0);
    }

    /// Prediction tensor that nails every target: exact boxes, confident
    /// objectness and classes, silent empty slots.
    fn perfect_pred(grid: &TargetGrid) -> Tensor {
        let per_slot = 5 + grid.classes;
        let mut pred = Tensor::zeros(&[grid.s, grid.s, grid.b * per_slot]);
        for row in 0..grid.s {
            for col in 0..grid.s {
                for slot in 0..grid.b {
                    let base = pred.idx3(row, col, slot * per_slot);
                    match grid.slot(row, col, slot) {
                        None => pred.data[base + 4] = -20.0,
                        Some(&(class, gt)) => {
                            let t = encode_box(&gt, row, col, grid.s);
                            for k in 0..4 {
                                pred.data[base + k] = t[k] as f32;
                            }
                            pred.data[base + 4] = 20.0;
                            for c in 0..grid.classes {
                                pred.data[base + 5 + c] = if c == class { 20.0 } else { -20.0 };
                            }
                        }
                    }
                }
            }
        }
        pred
    }

    #[test]
    fn perfect_prediction_near_zero_loss() {
        let gt = vec![(1, bb(0.3, 0.3, 0.25, 0.2)), (0, bb(0.7, 0.6, 0.3, 0.35))];
        let grid = assign_targets(&gt, 2, 2, 3).unwrap();
        let pred = perfect_pred(&grid);
        let report = total_loss(&pred, &grid, 0.5).unwrap();
        assert!(report.total < 1e-4, "total = {}", report.total);
    }

    #[test]
    fn single_obj_slot_at_half_confidence() {
        let gt = vec![(0, bb(0.3, 0.3, 0.25, 0.2))];
        let grid = assign_targets(&gt, 2, 1, 2).unwrap();
        let mut pred = perfect_pred(&grid);
        let base = pred.idx3(0, 0, 0);
        pred.data[base + 4] = 0.0;
        let report = total_loss(&pred, &grid, 0.5).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((report.obj - ln2).abs() < 1e-5, "obj = {}", report.obj);
    }

    #[test]
    fn lambda_scales_only_noobj() {
        let gt = vec![(1, bb(0.6, 0.4, 0.2, 0.3))];
        let grid = assign_targets(&gt, 2, 2, 2).unwrap();
        let mut pred = Tensor::zeros(&[2, 2, 14]);
        let mut rng = Rng::new(3);
        for v in pred.data.iter_mut() {
            *v = rng.uniform_range(-2.0, 2.0) as f32;
        }
        let a = total_loss(&pred, &grid, 0.5).unwrap();
        let b = total_loss(&pred, &grid, 1.5).unwrap();
        assert_eq!(a.ciou, b.ciou);
        assert_eq!(a.obj, b.obj);
        assert_eq!(a.cls, b.cls);
        assert_eq!(a.noobj, b.noobj);
        assert!((b.total - a.total - 1.0 * a.noobj).abs() < 1e-12);
    }

    #[test]
    fn components_are_non_negative() {
        let gt = vec![(0, bb(0.25, 0.75, 0.3, 0.2)), (1, bb(0.8, 0.2, 0.15, 0.3))];
        let grid = assign_targets(&gt, 2, 2, 2).unwrap();
        let mut rng = Rng::new(17);
        for trial in 0..50 {
            let mut pred = Tensor::zeros(&[2, 2, 14]);
            for v in pred.data.iter_mut() {
                *v = rng.uniform_range(-4.0, 4.0) as f32;
            }
            let r = total_loss(&pred, &grid, 0.5).unwrap();
            assert!(r.ciou >= 0.0 && r.obj >= 0.0 && r.noobj >= 0.0 && r.cls >= 0.0);
            assert!(r.total >= 0.0, "trial {trial}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_toy_grid() {
        let gt = vec![(0, bb(0.3, 0.3, 0.25, 0.2)), (1, bb(0.7, 0.65, 0.3, 0.35))];
        let grid = assign_targets(&gt, 2, 2, 2).unwrap();
        let mut rng = Rng::new(5);
        let mut pred = Tensor::zeros(&[2, 2, 14]);
        for v in pred.data.iter_mut() {
            *v = rng.uniform_range(-2.0, 2.0) as f32;
        }
        let (_, grad) = total_loss_grad(&pred, &grid, 0.5).unwrap();

        // The loss differentiates with alpha frozen per object slot, so the
        // finite-difference oracle must recompose the CIoU term with the
        // unperturbed alphas.
        let frozen: Vec<f64> = {
            let per_slot = 7;
            let mut alphas = Vec::new();
            for row in 0..2 {
                for col in 0..2 {
                    for slot in 0..2 {
                        if let Some(&(_, gt_box)) = grid.slot(row, col, slot) {
                            let base = pred.idx3(row, col, slot * per_slot);
                            let decoded = decode_box(
                                pred.data[base] as f64,
                                pred.data[base + 1] as f64,
                                pred.data[base + 2] as f64,
                                pred.data[base + 3] as f64,
                                row,
                                col,
                                2,
                            );
                            alphas.push(geometry::ciou_loss(&decoded, &gt_box).unwrap().alpha);
                        }
                    }
                }
            }
            alphas
        };
        let eval = |data: &[f32]| -> f64 {
            let per_slot = 7;
            let mut total = 0.0;
            let mut obj_i = 0;
            let t = Tensor::from_vec(&[2, 2, 14], data.to_vec()).unwrap();
            for row in 0..2 {
                for col in 0..2 {
                    for slot in 0..2 {
                        let base = t.idx3(row, col, slot * per_slot);
                        let obj_z = t.data[base + 4] as f64;
                        match grid.slot(row, col, slot) {
                            None => total += 0.5 * bce_logit(obj_z, 0.0).0,
                            Some(&(gt_class, gt_box)) => {
                                total += bce_logit(obj_z, 1.0).0;
                                for c in 0..2 {
                                    let z = t.data[base + 5 + c] as f64;
                                    let tt = if c == gt_class { 1.0 } else { 0.0 };
                                    total += bce_logit(z, tt).0;
                                }
                                let decoded = decode_box(
                                    t.data[base] as f64,
                                    t.data[base + 1] as f64,
                                    t.data[base + 2] as f64,
                                    t.data[base + 3] as f64,
                                    row,
                                    col,
                                    2,
                                );
                                let br = geometry::ciou_loss(&decoded, &gt_box).unwrap();
                                total += 1.0 - br.iou
                                    + br.center_dist_sq / br.enclosing_diag_sq
                                    + frozen[obj_i] * br.upsilon;
                                obj_i += 1;
                            }
                        }
                    }
                }
            }
            total
        };

        let h = 1e-4f32;
        for i in 0..pred.numel() {
            let mut up = pred.data.clone();
            let mut down = pred.data.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (eval(&up) - eval(&down)) / (2.0 * h as f64);
            let a = grad.data[i] as f64;
            let rel = (a - fd).abs() / fd.abs().max(a.abs()).max(1.0);
            assert!(rel < 1e-3, "channel {i}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn decode_silent_when_objectness_tiny() {
        let pred = {
            let mut t = Tensor::zeros(&[2, 2, 7]);
            for row in 0..2 {
                for col in 0..2 {
                    let base = t.idx3(row, col, 4);
                    t.data[base] = -100.0;
                }
            }
            t
        };
        assert!(decode_predictions(&pred, 2, 0.25).unwrap().is_empty());
    }

    #[test]
    fn decode_confidence_is_product() {
        let mut pred = Tensor::zeros(&[2, 2, 7]);
        for row in 0..2 {
            for col in 0..2 {
                let at = pred.idx3(row, col, 4);
                pred.data[at] = -100.0;
            }
        }
        let base = pred.idx3(1, 0, 0);
        pred.data[base + 4] = logit(0.9) as f32;
        pred.data[base + 5] = logit(0.8) as f32;
        pred.data[base + 6] = logit(0.3) as f32;
        let dets = decode_predictions(&pred, 2, 0.5).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class, 0);
        assert!((dets[0].confidence - 0.72).abs() < 1e-6);
    }

    #[test]
    fn decode_threshold_one_is_always_empty() {
        let mut pred = Tensor::zeros(&[2, 2, 7]);
        for v in pred.data.iter_mut() {
            *v = 50.0;
        }
        assert!(decode_predictions(&pred, 2, 1.0).unwrap().is_empty());
    }

    #[test]
    fn decode_class_ties_take_lowest_index() {
        let mut pred = Tensor::zeros(&[1, 1, 8]);
        pred.data[4] = 20.0;
        pred.data[5] = 3.0;
        pred.data[6] = 3.0;
        pred.data[7] = 3.0;
        let dets = decode_predictions(&pred, 3, 0.25).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class, 0);
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = Rng::new(21);
        for _ in 0..200 {
            let gt = bb(
                rng.uniform_range(0.05, 0.95),
                rng.uniform_range(0.05, 0.95),
                rng.uniform_range(0.05, 0.9),
                rng.uniform_range(0.05, 0.9),
            );
            let s = 4;
            let row = ((gt.cy * s as f64) as usize).min(s - 1);
            let col = ((gt.cx * s as f64) as usize).min(s - 1);
            let t = encode_box(&gt, row, col, s);
            let decoded = decode_box(
                t[0] as f32 as f64,
                t[1] as f32 as f64,
                t[2] as f32 as f64,
                t[3] as f32 as f64,
                row,
                col,
                s,
            );
            assert!((decoded.cx - gt.cx).abs() < 1e-6);
            assert!((decoded.cy - gt.cy).abs() < 1e-6);
            assert!((decoded.w - gt.w).abs() < 1e-6);
            assert!((decoded.h - gt.h).abs() < 1e-6);
        }
    }
}
