//! Box matching and FROC analysis.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::PixelBounds;

/// IoU threshold for counting a prediction as a hit.
pub const DEFAULT_IOU: f64 = 0.2;
/// Operating point used for the sensitivity term of the NODE21 score.
pub const SEN_FP_RATE: f64 = 0.25;

/// Axis-aligned box in continuous pixel coordinates (`x_max`, `y_max`
/// exclusive); `score` is set on predictions only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Box {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            score: None,
        }
    }

    pub fn scored(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    /// Box covering every pixel of inclusive pixel bounds.
    pub fn from_bounds(b: &PixelBounds) -> Self {
        Self::new(
            b.x_min as f64,
            b.y_min as f64,
            (b.x_max + 1) as f64,
            (b.y_max + 1) as f64,
        )
    }

    pub fn is_valid(&self) -> bool {
        self.x_max > self.x_min && self.y_max > self.y_min
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
            score: self.score,
        }
    }

    pub fn intersection(&self, other: &Box) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn score_or_zero(&self) -> f64 {
        self.score.unwrap_or(0.0)
    }
}

/// Intersection over union; 0 for non-overlapping boxes.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let inter = a.intersection(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Predictions and ground truth of one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: String,
    pub predictions: Vec<Box>,
    pub ground_truths: Vec<Box>,
}

/// Matching outcome of one image at fixed thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub predictions: Vec<Box>,
    pub ground_truths: Vec<Box>,
    /// One entry per ground truth.
    pub detected: Vec<bool>,
    pub true_positives: usize,
    pub false_positives: usize,
}

impl DetectionRecord {
    pub fn missed(&self) -> impl Iterator<Item = (usize, &Box)> {
        self.ground_truths
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.detected[*i])
    }
}

fn by_score_desc(preds: &[Box]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score_or_zero()
            .partial_cmp(&preds[a].score_or_zero())
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// Greedy matching in descending score order. Returns, for each prediction
/// in that order, its index and the ground truth it claimed.
fn greedy(preds: &[Box], gts: &[Box], iou_thresh: f64) -> Vec<(usize, Option<usize>)> {
    let mut taken = alloc::vec![false; gts.len()];
    by_score_desc(preds)
        .into_iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let o = iou(&preds[p], gt);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            (p, best.map(|(j, _)| j))
        })
        .collect()
}

/// Labels each ground truth as detected or missed using predictions with
/// score ≥ `conf_thresh`.
pub fn match_detections(
    image: &ImageDetections,
    iou_thresh: f64,
    conf_thresh: f64,
) -> DetectionRecord {
    let kept: Vec<Box> = image
        .predictions
        .iter()
        .filter(|p| p.score_or_zero() >= conf_thresh)
        .copied()
        .collect();
    let mut detected = alloc::vec![false; image.ground_truths.len()];
    let mut fp = 0;
    for (_, m) in greedy(&kept, &image.ground_truths, iou_thresh) {
        match m {
            Some(j) => detected[j] = true,
            None => fp += 1,
        }
    }
    DetectionRecord {
        image_id: image.image_id.clone(),
        predictions: image.predictions.clone(),
        ground_truths: image.ground_truths.clone(),
        true_positives: detected.iter().filter(|&&d| d).count(),
        detected,
        false_positives: fp,
    }
}

/// One operating point of the FROC curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub fps_per_image: f64,
    pub sensitivity: f64,
    /// Lowest score admitted at this point (`+inf` for the origin).
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocSummary {
    pub curve: Vec<FrocPoint>,
    pub auc: f64,
    pub sen_at_0_25: f64,
    pub node21_score: f64,
    pub fp_max: f64,
}

/// NODE21 combination `0.75·AUC + 0.25·Sen`.
pub fn node21_score(auc: f64, sen: f64) -> f64 {
    0.75 * auc + 0.25 * sen
}

/// The sensitivity implied by a reported AUC and NODE21 score.
pub fn sensitivity_from_score(auc: f64, score: f64) -> f64 {
    (score - 0.75 * auc) / 0.25
}

/// FROC curve obtained by sweeping the confidence threshold over every
/// prediction score. Predictions with equal scores enter together.
pub fn froc_curve(images: &[ImageDetections], iou_thresh: f64) -> Result<Vec<FrocPoint>> {
    let n_gt: usize = images.iter().map(|r| r.ground_truths.len()).sum();
    if n_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    if images.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    // greedy matching is prefix-consistent: the matches at a threshold are
    // the first steps of the full greedy pass
    let mut events: Vec<(f64, bool)> = Vec::new();
    for img in images {
        for (p, m) in greedy(&img.predictions, &img.ground_truths, iou_thresh) {
            events.push((img.predictions[p].score_or_zero(), m.is_some()));
        }
    }
    events.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let n_img = images.len() as f64;
    let mut curve = alloc::vec![FrocPoint {
        fps_per_image: 0.0,
        sensitivity: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let s = events[i].0;
        while i < events.len() && events[i].0 == s {
            if events[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(FrocPoint {
            fps_per_image: fp as f64 / n_img,
            sensitivity: tp as f64 / n_gt as f64,
            threshold: s,
        });
    }
    Ok(curve)
}

/// Linear interpolation of sensitivity at `fps`, flat beyond the last point.
pub fn sensitivity_at(curve: &[FrocPoint], fps: f64) -> f64 {
    let mut left = curve[0];
    for p in curve {
        if p.fps_per_image <= fps {
            left = *p;
        } else {
            let t = (fps - left.fps_per_image) / (p.fps_per_image - left.fps_per_image);
            return left.sensitivity + t * (p.sensitivity - left.sensitivity);
        }
    }
    left.sensitivity
}

/// Trapezoidal area under the curve on `[0, fp_max]`, divided by `fp_max`.
pub fn normalized_auc(curve: &[FrocPoint], fp_max: f64) -> f64 {
    let mut area = 0.0;
    let mut prev = (0.0, curve[0].sensitivity);
    for p in &curve[1..] {
        if prev.0 >= fp_max {
            break;
        }
        let (x1, y1) = if p.fps_per_image > fp_max {
            (fp_max, sensitivity_at(curve, fp_max))
        } else {
            (p.fps_per_image, p.sensitivity)
        };
        area += (x1 - prev.0) * (prev.1 + y1) / 2.0;
        prev = (x1, y1);
    }
    if prev.0 < fp_max {
        area += (fp_max - prev.0) * prev.1;
    }
    area / fp_max
}

pub fn froc_summary(
    images: &[ImageDetections],
    iou_thresh: f64,
    fp_max: f64,
) -> Result<FrocSummary> {
    if !(fp_max > 0.0) {
        return Err(Error::InvalidArgument("fp_max must be positive".into()));
    }
    let curve = froc_curve(images, iou_thresh)?;
    let auc = normalized_auc(&curve, fp_max);
    let sen = sensitivity_at(&curve, SEN_FP_RATE);
    Ok(FrocSummary {
        auc,
        sen_at_0_25: sen,
        node21_score: node21_score(auc, sen),
        curve,
        fp_max,
    })
}

/// Lowest score threshold whose operating point stays at or below `fps`
/// false positives per image (`+inf` when even the top score exceeds it).
pub fn threshold_at_fp_rate(images: &[ImageDetections], iou_thresh: f64, fps: f64) -> Result<f64> {
    let curve = froc_curve(images, iou_thresh)?;
    Ok(curve
        .iter()
        .filter(|p| p.fps_per_image <= fps)
        .map(|p| p.threshold)
        .fold(f64::INFINITY, f64::min))
}
