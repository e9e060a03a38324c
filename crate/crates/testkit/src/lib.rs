//! Independent oracles shared by the test suites.
//!
//! Everything here recomputes a quantity the main crate already produces,
//! through a deliberately different route: rasterized overlap instead of
//! interval arithmetic, an f64 scalar network twin instead of the f32
//! layer engine, quadratic recounting instead of suffix tricks. Slow and
//! obvious beats fast and clever in this crate.

use std::path::Path;

use sim2real_core::geometry::BBox;
use sim2real_core::loss::TargetGrid;
use sim2real_core::net::{Activation, DetectorNet};
use sim2real_core::tensor::Tensor;

/// Relative error with an absolute floor: |a-b| / max(1, |a|, |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// FNV-1a over a file's bytes; used to compare weight files and reports.
pub fn file_hash(path: &Path) -> std::io::Result<u64> {
    let bytes = std::fs::read(path)?;
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// Geometry oracles
// ---------------------------------------------------------------------------

/// Overlap-over-union measured by counting grid cells, `resolution` cells per
/// unit length, grid anchored at integer coordinates. For boxes whose corners
/// lie on a lattice that divides `resolution` evenly, every edge falls on a
/// cell boundary and the count is exact, so the comparison tolerance can be
/// tight; for arbitrary boxes the error is O(perimeter / resolution).
pub fn raster_iou(a: &BBox, b: &BBox, resolution: usize) -> f64 {
    let lo_x = a.x1().min(b.x1()).floor();
    let lo_y = a.y1().min(b.y1()).floor();
    let hi_x = a.x2().max(b.x2()).ceil();
    let hi_y = a.y2().max(b.y2()).ceil();
    let nx = ((hi_x - lo_x) * resolution as f64).round() as usize;
    let ny = ((hi_y - lo_y) * resolution as f64).round() as usize;
    let cell = 1.0 / resolution as f64;
    let inside =
        |bx: &BBox, x: f64, y: f64| x > bx.x1() && x < bx.x2() && y > bx.y1() && y < bx.y2();
    let (mut in_a, mut in_b, mut in_both) = (0u64, 0u64, 0u64);
    for iy in 0..ny {
        let y = lo_y + (iy as f64 + 0.5) * cell;
        for ix in 0..nx {
            let x = lo_x + (ix as f64 + 0.5) * cell;
            let ia = inside(a, x, y);
            let ib = inside(b, x, y);
            in_a += ia as u64;
            in_b += ib as u64;
            in_both += (ia && ib) as u64;
        }
    }
    let union = in_a + in_b - in_both;
    if union == 0 {
        0.0
    } else {
        in_both as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RefCIoU {
    pub iou: f64,
    pub upsilon: f64,
    pub alpha: f64,
    pub loss: f64,
}

fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn ref_aspect(b: &BBox) -> f64 {
    if b.h == 0.0 {
        std::f64::consts::FRAC_PI_2
    } else {
        (b.w / b.h).atan()
    }
}

/// (iou, center penalty, aspect term) recomputed from scratch.
fn ref_terms(pred: &BBox, gt: &BBox) -> (f64, f64, f64) {
    let iou = ref_iou(pred, gt);
    let rho2 = (pred.cx - gt.cx).powi(2) + (pred.cy - gt.cy).powi(2);
    let cw = pred.x2().max(gt.x2()) - pred.x1().min(gt.x1());
    let ch = pred.y2().max(gt.y2()) - pred.y1().min(gt.y1());
    let c2 = cw * cw + ch * ch;
    let d = ref_aspect(gt) - ref_aspect(pred);
    let upsilon = 4.0 / (std::f64::consts::PI * std::f64::consts::PI) * d * d;
    let pen = if c2 > 0.0 { rho2 / c2 } else { 0.0 };
    (iou, pen, upsilon)
}

/// Scalar restatement of the complete-overlap loss
/// 1 - IoU + rho^2/c^2 + alpha*upsilon, kept separate from the main crate's
/// version so each checks the other.
pub fn reference_ciou(pred: &BBox, gt: &BBox) -> RefCIoU {
    let (iou, pen, upsilon) = ref_terms(pred, gt);
    let denom = (1.0 - iou) + upsilon;
    let alpha = if denom == 0.0 { 0.0 } else { upsilon / denom };
    RefCIoU {
        iou,
        upsilon,
        alpha,
        loss: 1.0 - iou + pen + alpha * upsilon,
    }
}

/// The same loss with the trade-off factor pinned, which is the function the
/// analytic gradient actually differentiates.
pub fn reference_ciou_frozen(pred: &BBox, gt: &BBox, alpha: f64) -> f64 {
    let (iou, pen, upsilon) = ref_terms(pred, gt);
    1.0 - iou + pen + alpha * upsilon
}

/// Central finite differences of a scalar box function along (cx, cy, w, h).
pub fn fd_box_grad<F: Fn(&BBox) -> f64>(f: F, at: &BBox, step: f64) -> [f64; 4] {
    let mut out = [0.0; 4];
    let fields: [fn(&mut BBox) -> &mut f64; 4] =
        [|b| &mut b.cx, |b| &mut b.cy, |b| &mut b.w, |b| &mut b.h];
    for (i, field) in fields.iter().enumerate() {
        let mut hi = *at;
        let mut lo = *at;
        *field(&mut hi) += step;
        *field(&mut lo) -= step;
        out[i] = (f(&hi) - f(&lo)) / (2.0 * step);
    }
    out
}

// ---------------------------------------------------------------------------
// Network twin in f64
// ---------------------------------------------------------------------------

struct F64Conv {
    weight: Vec<f64>,
    bias: Vec<f64>,
    shape: [usize; 4],
    stride: usize,
    pad: usize,
    leaky: bool,
}

/// A plain f64 copy of the detector: same parameters, same architecture,
/// scalar loops, no caching. Finite differences through this twin stay
/// meaningful at steps far below f32 resolution.
pub struct F64Net {
    layers: Vec<F64Conv>,
    pub input_size: usize,
}

impl F64Net {
    pub fn from_net(net: &DetectorNet) -> F64Net {
        let mut layers = Vec::new();
        for seg in net.segments() {
            for conv in &seg.layers {
                layers.push(F64Conv {
                    weight: conv.weight.data.iter().map(|&v| v as f64).collect(),
                    bias: conv.bias.data.iter().map(|&v| v as f64).collect(),
                    shape: [
                        conv.weight.shape[0],
                        conv.weight.shape[1],
                        conv.weight.shape[2],
                        conv.weight.shape[3],
                    ],
                    stride: conv.stride,
                    pad: conv.pad,
                    leaky: conv.act == Activation::Leaky,
                });
            }
        }
        F64Net {
            layers,
            input_size: net.config.input_size,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut at = 0;
        for l in self.layers.iter_mut() {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
    }

    /// Raw head output as a flat HWC vector plus its shape.
    pub fn forward(&self, image: &Tensor) -> (Vec<f64>, [usize; 3]) {
        let mut data: Vec<f64> = image.data.iter().map(|&v| v as f64).collect();
        let mut h = image.shape[0];
        let mut w = image.shape[1];
        let mut c = image.shape[2];
        for (li, l) in self.layers.iter().enumerate() {
            let [oc, k, _, ic] = l.shape;
            assert_eq!(c, ic, "channel mismatch in twin layer {li}");
            let oh = (h + 2 * l.pad - k) / l.stride + 1;
            let ow = (w + 2 * l.pad - k) / l.stride + 1;
            let mut next = vec![0.0f64; oh * ow * oc];
            for y in 0..oh {
                for x in 0..ow {
                    for o in 0..oc {
                        let mut acc = l.bias[o];
                        for ky in 0..k {
                            let sy = (y * l.stride + ky) as isize - l.pad as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let sx = (x * l.stride + kx) as isize - l.pad as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                for cc in 0..ic {
                                    let iv = data[(sy as usize * w + sx as usize) * ic + cc];
                                    let wv = l.weight[((o * k + ky) * k + kx) * ic + cc];
                                    acc += iv * wv;
                                }
                            }
                        }
                        let act = if l.leaky && acc <= 0.0 {
                            0.1 * acc
                        } else {
                            acc
                        };
                        next[(y * ow + x) * oc + o] = act;
                    }
                }
            }
            data = next;
            h = oh;
            w = ow;
            c = oc;
        }
        (data, [h, w, c])
    }
}

/// Analytic parameter gradients of the live network, flattened in the same
/// order as [`F64Net::params`]. Call after `backward`.
pub fn collect_param_grads(net: &DetectorNet) -> Vec<f64> {
    let mut out = Vec::new();
    for seg in net.segments() {
        for conv in &seg.layers {
            let wg = conv.weight.grad.as_ref().expect("missing weight grad");
            out.extend(wg.iter().map(|&v| v as f64));
            let bg = conv.bias.grad.as_ref().expect("missing bias grad");
            out.extend(bg.iter().map(|&v| v as f64));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Composite loss restated in f64
// ---------------------------------------------------------------------------

fn ref_sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn ref_bce(z: f64, t: f64) -> f64 {
    let p = ref_sigmoid(z).clamp(1e-7, 1.0 - 1e-7);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

fn slot_box(
    pred: &[f64],
    shape: [usize; 3],
    row: usize,
    col: usize,
    base: usize,
    s: usize,
) -> BBox {
    let at = |ch: usize| pred[(row * shape[1] + col) * shape[2] + base + ch];
    // Same extent clamp as the production decode, so the two losses agree
    // even on collapsing boxes.
    BBox {
        cx: (col as f64 + ref_sigmoid(at(0))) / s as f64,
        cy: (row as f64 + ref_sigmoid(at(1))) / s as f64,
        w: ref_sigmoid(at(2)).clamp(1e-7, 1.0 - 1e-7),
        h: ref_sigmoid(at(3)).clamp(1e-7, 1.0 - 1e-7),
    }
}

/// Trade-off factors per (cell, slot) at the current prediction, indexed
/// `(row * s + col) * b + slot`; zero where no object is assigned. Freeze
/// these before differencing, matching the analytic gradient's convention.
pub fn reference_slot_alphas(pred: &[f64], shape: [usize; 3], target: &TargetGrid) -> Vec<f64> {
    let per_slot = 5 + target.classes;
    let s = target.s;
    let mut alphas = vec![0.0; s * s * target.b];
    for row in 0..s {
        for col in 0..s {
            for slot in 0..target.b {
                if let Some(&(_, gt_box)) = target.slot(row, col, slot) {
                    let decoded = slot_box(pred, shape, row, col, slot * per_slot, s);
                    alphas[(row * s + col) * target.b + slot] =
                        reference_ciou(&decoded, &gt_box).alpha;
                }
            }
        }
    }
    alphas
}

/// The composite loss recomputed from a flat f64 prediction, with per-slot
/// trade-off factors supplied by the caller (see [`reference_slot_alphas`]).
pub fn reference_total_loss(
    pred: &[f64],
    shape: [usize; 3],
    target: &TargetGrid,
    lambda_noobj: f64,
    alphas: &[f64],
) -> f64 {
    let per_slot = 5 + target.classes;
    let s = target.s;
    assert_eq!(shape[2], target.b * per_slot);
    let mut total = 0.0;
    for row in 0..s {
        for col in 0..s {
            for slot in 0..target.b {
                let base = slot * per_slot;
                let at = |ch: usize| pred[(row * shape[1] + col) * shape[2] + base + ch];
                match target.slot(row, col, slot) {
                    None => total += lambda_noobj * ref_bce(at(4), 0.0),
                    Some(&(gt_class, gt_box)) => {
                        total += ref_bce(at(4), 1.0);
                        for c in 0..target.classes {
                            let t = if c == gt_class { 1.0 } else { 0.0 };
                            total += ref_bce(at(5 + c), t);
                        }
                        let decoded = slot_box(pred, shape, row, col, base, s);
                        let alpha = alphas[(row * s + col) * target.b + slot];
                        total += reference_ciou_frozen(&decoded, &gt_box, alpha);
                    }
                }
            }
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Average precision by exhaustive recount
// ---------------------------------------------------------------------------

/// Quadratic-time average precision over (confidence, is_true_positive)
/// pairs: re-rank, recount the prefix at every rank, take each envelope value
/// as a fresh forward maximum, and accumulate rank by rank. Matches the fast
/// version bit for bit because every intermediate value is derived from the
/// same integers in the same order.
pub fn brute_force_ap(gt_count: usize, detections: &[(f64, bool)]) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut ranked = detections.to_vec();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let n = ranked.len();
    let precision_at = |i: usize| {
        let mut tp = 0usize;
        for d in ranked.iter().take(i + 1) {
            if d.1 {
                tp += 1;
            }
        }
        tp as f64 / (i + 1) as f64
    };
    let recall_at = |i: usize| {
        let mut tp = 0usize;
        for d in ranked.iter().take(i + 1) {
            if d.1 {
                tp += 1;
            }
        }
        tp as f64 / gt_count as f64
    };
    let envelope_at = |i: usize| {
        let mut best = precision_at(i);
        for j in i + 1..n {
            let p = precision_at(j);
            if p > best {
                best = p;
            }
        }
        best
    };
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        ap += (recall_at(i) - prev_recall) * envelope_at(i);
        prev_recall = recall_at(i);
    }
    ap
}
