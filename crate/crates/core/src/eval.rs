//! Detection evaluation: greedy matching, per-class average precision with
//! the all-point precision envelope, mAP, non-maximum suppression, and
//! dataset color-histogram diagnostics.

use std::path::Path;

use crate::error::{Error, Result};
use crate::formats::{self, Manifest};
use crate::geometry::{iou_unchecked, BBox};
use crate::loss::{decode_predictions, Detection};
use crate::net::DetectorNet;

/// Detections below this confidence never enter evaluation; it is distinct
/// from any user-facing display threshold.
pub const EVAL_CONF_FLOOR: f64 = 0.005;
pub const NMS_IOU_THRESH: f64 = 0.45;

/// Matched detections for one class: scored detections flagged TP/FP plus
/// the ground-truth count they were matched against.
#[derive(Debug, Clone, Default)]
pub struct ClassMatches {
    pub gt_count: usize,
    /// (confidence, is_true_positive), in pooled input order.
    pub detections: Vec<(f64, bool)>,
}

/// Per-class matching outcome over one or more images.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub per_class: Vec<ClassMatches>,
}

impl MatchResult {
    pub fn new(classes: usize) -> Self {
        MatchResult {
            per_class: vec![ClassMatches::default(); classes],
        }
    }

    pub fn merge(&mut self, other: &MatchResult) {
        assert_eq!(self.per_class.len(), other.per_class.len());
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.gt_count += b.gt_count;
            a.detections.extend_from_slice(&b.detections);
        }
    }
}

/// Greedy per-image matching: detections in descending confidence (ties by
/// input order); each is a TP iff its best-IoU unmatched same-class ground
/// truth reaches `iou_thresh`, consuming that ground truth.
pub fn match_detections(
    dets: &[Detection],
    gts: &[(usize, BBox)],
    iou_thresh: f64,
    classes: usize,
) -> Result<MatchResult> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::config(format!(
            "iou threshold {iou_thresh} outside (0, 1]"
        )));
    }
    let mut result = MatchResult::new(classes);
    for &(class, _) in gts {
        if class >= classes {
            return Err(Error::config(format!("gt class {class} out of range")));
        }
        result.per_class[class].gt_count += 1;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap());
    let mut gt_used = vec![false; gts.len()];
    for &di in &order {
        let det = &dets[di];
        if det.class >= classes {
            return Err(Error::config(format!(
                "detection class {} out of range",
                det.class
            )));
        }
        let mut best: Option<(usize, f64)> = None;
        for (gi, &(gclass, gbox)) in gts.iter().enumerate() {
            if gt_used[gi] || gclass != det.class {
                continue;
            }
            let ov = iou_unchecked(&det.bbox, &gbox);
            if best.is_none_or(|(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        let is_tp = match best {
            Some((gi, ov)) if ov >= iou_thresh => {
                gt_used[gi] = true;
                true
            }
            _ => false,
        };
        result.per_class[det.class]
            .detections
            .push((det.confidence, is_tp));
    }
    Ok(result)
}

/// All-point interpolated average precision: area under the
/// monotone-non-increasing precision envelope of the ranked PR curve.
/// Returns 0 for a class without ground truth (excluded from mAP upstream).
pub fn average_precision(matches: &ClassMatches) -> f64 {
    if matches.gt_count == 0 {
        return 0.0;
    }
    let mut ranked = matches.detections.clone();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let n = ranked.len();
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, &(_, is_tp)) in ranked.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / matches.gt_count as f64);
    }
    // Suffix-max precision envelope ("highest precision at various recall").
    let mut envelope = precisions.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        if envelope[i + 1] > envelope[i] {
            envelope[i] = envelope[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        ap += (recalls[i] - prev_recall) * envelope[i];
        prev_recall = recalls[i];
    }
    ap
}

#[derive(Debug, Clone)]
pub struct APReport {
    /// AP per class; None where the class has no ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub iou_threshold: f64,
    pub conf_threshold: f64,
}

impl APReport {
    /// CSV mirror: `class,ap` rows for defined classes, then a final mAP row.
    pub fn write_csv(&self, path: &Path, class_names: &[String]) -> Result<()> {
        let mut out = String::from("class,ap\n");
        for (i, ap) in self.per_class_ap.iter().enumerate() {
            if let Some(ap) = ap {
                let name = class_names
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| format!("class{i}"));
                out.push_str(&format!("{name},{ap:.6}\n"));
            }
        }
        out.push_str(&format!("mAP,{:.6}\n", self.map));
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Pool detections per class across images, compute per-class AP, and
/// average over classes that have ground truth.
pub fn mean_average_precision(
    per_image_dets: &[Vec<Detection>],
    per_image_gts: &[Vec<(usize, BBox)>],
    iou_thresh: f64,
    classes: usize,
) -> Result<APReport> {
    if per_image_dets.len() != per_image_gts.len() {
        return Err(Error::config(format!(
            "{} detection lists vs {} ground-truth lists",
            per_image_dets.len(),
            per_image_gts.len()
        )));
    }
    let mut pooled = MatchResult::new(classes);
    for (dets, gts) in per_image_dets.iter().zip(per_image_gts) {
        let m = match_detections(dets, gts, iou_thresh, classes)?;
        pooled.merge(&m);
    }
    let mut per_class_ap = Vec::with_capacity(classes);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..classes {
        if pooled.per_class[c].gt_count == 0 {
            per_class_ap.push(None);
        } else {
            let ap = average_precision(&pooled.per_class[c]);
            sum += ap;
            counted += 1;
            per_class_ap.push(Some(ap));
        }
    }
    Ok(APReport {
        per_class_ap,
        map: if counted == 0 {
            0.0
        } else {
            sum / counted as f64
        },
        iou_threshold: iou_thresh,
        conf_threshold: EVAL_CONF_FLOOR,
    })
}

/// Greedy per-class non-maximum suppression: keep detections in descending
/// confidence, dropping any whose IoU with an already-kept detection of the
/// same class exceeds `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap());
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && iou_unchecked(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Per-channel 256-bin histogram, normalized per image and averaged across
/// a dataset.
#[derive(Debug, Clone)]
pub struct ColorHistogram {
    /// [channel][bin] mean normalized frequency; each channel sums to 1.
    pub bins: Vec<[f64; 256]>,
}

impl ColorHistogram {
    /// Mean pixel intensity in [0,1], averaged over the three channels.
    pub fn mean_intensity(&self) -> f64 {
        let mut total = 0.0;
        for ch in &self.bins {
            for (bin, &freq) in ch.iter().enumerate() {
                total += bin as f64 / 255.0 * freq;
            }
        }
        total / self.bins.len() as f64
    }

    /// CSV: header `bin,r,g,b`, one row per bin.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("bin,r,g,b\n");
        for bin in 0..256 {
            out.push_str(&format!(
                "{bin},{:.9},{:.9},{:.9}\n",
                self.bins[0][bin], self.bins[1][bin], self.bins[2][bin]
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub fn average_color_histogram(manifest: &Manifest) -> Result<ColorHistogram> {
    if manifest.is_empty() {
        return Err(Error::invalid("histogram of an empty manifest"));
    }
    let mut bins = vec![[0.0f64; 256]; 3];
    for entry in &manifest.entries {
        let img = formats::read_ppm(&manifest.image_path(entry))?;
        let pixels = (img.shape[0] * img.shape[1]) as f64;
        let mut counts = [[0u32; 256]; 3];
        for (i, &v) in img.data.iter().enumerate() {
            let bin = (v * 255.0).round().clamp(0.0, 255.0) as usize;
            counts[i % 3][bin] += 1;
        }
        for c in 0..3 {
            for b in 0..256 {
                bins[c][b] += counts[c][b] as f64 / pixels;
            }
        }
    }
    let n = manifest.len() as f64;
    for ch in bins.iter_mut() {
        for v in ch.iter_mut() {
            *v /= n;
        }
    }
    Ok(ColorHistogram { bins })
}

/// Run the detector over every image in a manifest and score it. Decoding
/// uses the evaluation confidence floor; NMS runs before matching.
pub fn evaluate_detector(
    net: &mut DetectorNet,
    manifest: &Manifest,
    iou_thresh: f64,
) -> Result<APReport> {
    let classes = net.config.classes;
    let mut per_image_dets = Vec::with_capacity(manifest.len());
    let mut per_image_gts = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        let img = formats::read_ppm(&manifest.image_path(entry))?;
        let pred = net.forward(&img)?;
        let dets = decode_predictions(&pred, classes, EVAL_CONF_FLOOR)?;
        per_image_dets.push(nms(&dets, NMS_IOU_THRESH));
        per_image_gts.push(formats::read_annotations(
            &manifest.annotation_path(entry),
            classes,
        )?);
    }
    mean_average_precision(&per_image_dets, &per_image_gts, iou_thresh, classes)
}
