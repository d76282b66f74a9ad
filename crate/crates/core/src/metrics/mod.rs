//! Detection-to-ground-truth matching, average precision and operating
//! points.
//!
//! Matching runs once over every detection. Greedy matching in descending
//! confidence order is prefix-stable, so the TP/FP label of a detection does
//! not depend on the confidence threshold applied afterwards; every
//! threshold-dependent quantity is computed by filtering one [`MatchResult`].

mod curves;
mod predictions;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{ClassTable, GroundTruthSet};
use crate::decode::Detection;

pub use curves::{confidence_curves, parse_curve_csv, sweep_points, ClassCurve, CurvePoint, CurveMetric, CurveSeries, Curves};
pub use predictions::{read_predictions, write_predictions, PredictionRecord, Predictions};
pub use report::{evaluate, render_report, table_row, ClassReport, DetectorReport, EvalConfig, EvaluationReport, RenderedReport, TABLE_HEADER};

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("predictions reference image {0:?} which is not in the ground truth")]
    UnknownImage(String),
    #[error("predictions line {line}: {reason}")]
    Predictions { line: usize, reason: String },
    #[error("curve csv: {0}")]
    Csv(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetMatch {
    /// Index into the image's prediction list.
    pub det_index: usize,
    pub class_id: u32,
    pub confidence: f64,
    /// Index into the image's ground-truth records.
    pub gt_index: Option<usize>,
    /// IoU with the matched ground truth, or the best same-class IoU seen
    /// when unmatched.
    pub iou: f64,
}

impl DetMatch {
    pub fn is_tp(&self) -> bool {
        self.gt_index.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMatches {
    pub image_id: String,
    pub matches: Vec<DetMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub iou_threshold: f64,
    pub classes: ClassTable,
    pub images: Vec<ImageMatches>,
    /// Ground-truth objects per class id across all images.
    pub gt_counts: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, other: Counts) -> Counts {
        Counts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }
}

impl Counts {
    pub fn prf(&self) -> Prf {
        Prf::from_counts(*self)
    }
}

/// Precision, recall and F1 at one operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Precision with no detections and recall with no ground truth are
    /// both vacuously 1.
    pub fn from_counts(c: Counts) -> Self {
        let precision = if c.tp + c.fp == 0 {
            1.0
        } else {
            c.tp as f64 / (c.tp + c.fp) as f64
        };
        let recall = if c.tp + c.fn_ == 0 {
            1.0
        } else {
            c.tp as f64 / (c.tp + c.fn_) as f64
        };
        Self {
            precision,
            recall,
            f1: f1_score(precision, recall),
        }
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Greedily matches detections to same-class ground truth per image.
///
/// Detections are visited in descending confidence (input order on ties);
/// each takes the unmatched ground truth of highest IoU if that IoU reaches
/// `iou_match`. Ground-truth images without predictions contribute only
/// false negatives.
pub fn match_detections(
    preds: &BTreeMap<String, Vec<Detection>>,
    gts: &GroundTruthSet,
    iou_match: f64,
) -> Result<MatchResult, MetricsError> {
    if let Some(unknown) = preds.keys().find(|id| !gts.images.contains_key(*id)) {
        return Err(MetricsError::UnknownImage(unknown.clone()));
    }
    let mut gt_counts: BTreeMap<u32, usize> = gts.classes.iter().map(|c| (c.id, 0)).collect();
    let mut images = Vec::new();
    for (image_id, ann) in &gts.images {
        for r in &ann.records {
            *gt_counts.entry(r.class.id).or_default() += 1;
        }
        let dets = match preds.get(image_id) {
            Some(d) => d.as_slice(),
            None => &[],
        };
        let gt_boxes: Vec<_> = ann.records.iter().map(|r| (r.class.id, r.pixel_box(ann.size))).collect();
        let mut taken = vec![false; gt_boxes.len()];

        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));

        let mut matches = Vec::with_capacity(dets.len());
        for i in order {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (gi, (class_id, gbox)) in gt_boxes.iter().enumerate() {
                if *class_id != d.class_id || taken[gi] {
                    continue;
                }
                let iou = d.bbox.iou(gbox);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            let (gt_index, iou) = match best {
                Some((gi, iou)) if iou >= iou_match => {
                    taken[gi] = true;
                    (Some(gi), iou)
                }
                Some((_, iou)) => (None, iou),
                None => (None, 0.0),
            };
            matches.push(DetMatch {
                det_index: i,
                class_id: d.class_id,
                confidence: d.confidence,
                gt_index,
                iou,
            });
        }
        images.push(ImageMatches {
            image_id: image_id.clone(),
            matches,
        });
    }
    Ok(MatchResult {
        iou_threshold: iou_match,
        classes: gts.classes.clone(),
        images,
        gt_counts,
    })
}

impl MatchResult {
    /// All matches of one class ranked by descending confidence; ties keep
    /// image then per-image order.
    pub fn ranked(&self, class_id: u32) -> Vec<DetMatch> {
        let mut all: Vec<DetMatch> = self
            .images
            .iter()
            .flat_map(|im| im.matches.iter().copied())
            .filter(|m| m.class_id == class_id)
            .collect();
        all.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        all
    }

    pub fn gt_count(&self, class_id: u32) -> usize {
        self.gt_counts.get(&class_id).copied().unwrap_or(0)
    }

    /// Class ids that appear in the table, the ground truth or the
    /// detections.
    pub fn class_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.gt_counts.keys().copied().collect();
        for im in &self.images {
            ids.extend(im.matches.iter().map(|m| m.class_id));
        }
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn class_name(&self, class_id: u32) -> String {
        self.classes
            .name(class_id)
            .map_or_else(|| format!("class{class_id}"), str::to_string)
    }

    pub fn counts(&self, class_id: u32, tau: f64) -> Counts {
        let (mut tp, mut fp) = (0, 0);
        for m in self.images.iter().flat_map(|im| &im.matches) {
            if m.class_id == class_id && m.confidence >= tau {
                if m.is_tp() {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        Counts {
            tp,
            fp,
            fn_: self.gt_count(class_id) - tp,
        }
    }
}

/// All-point interpolated AP: the sum over recall steps of the recall
/// increment times the maximum precision at any rank with at least that
/// recall. `None` when the class has no ground truth.
pub fn average_precision(matches: &MatchResult, class_id: u32) -> Option<f64> {
    let n_gt = matches.gt_count(class_id);
    if n_gt == 0 {
        return None;
    }
    let ranked = matches.ranked(class_id);
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (k, m) in ranked.iter().enumerate() {
        tp += m.is_tp() as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap.clamp(0.0, 1.0))
}

/// Mean of the defined per-class APs; classes without ground truth are
/// skipped with a warning.
pub fn mean_average_precision(matches: &MatchResult) -> Option<f64> {
    let mut aps = Vec::new();
    for id in matches.class_ids() {
        match average_precision(matches, id) {
            Some(ap) => aps.push(ap),
            None => log::warn!("class {} has no ground truth; excluded from mAP", matches.class_name(id)),
        }
    }
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassOperatingPoint {
    pub class_id: u32,
    pub counts: Counts,
    pub prf: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub per_class: Vec<ClassOperatingPoint>,
    /// Pooled counts across classes.
    pub micro: Prf,
    pub micro_counts: Counts,
    /// Unweighted mean over classes with ground truth.
    pub macro_avg: Prf,
}

pub fn operating_point(matches: &MatchResult, tau: f64) -> OperatingPoint {
    let per_class: Vec<ClassOperatingPoint> = matches
        .class_ids()
        .into_iter()
        .map(|class_id| {
            let counts = matches.counts(class_id, tau);
            ClassOperatingPoint {
                class_id,
                counts,
                prf: counts.prf(),
            }
        })
        .collect();
    let micro_counts = per_class.iter().fold(Counts::default(), |acc, c| acc + c.counts);
    let defined: Vec<&ClassOperatingPoint> = per_class
        .iter()
        .filter(|c| matches.gt_count(c.class_id) > 0)
        .collect();
    let macro_avg = if defined.is_empty() {
        micro_counts.prf()
    } else {
        let n = defined.len() as f64;
        Prf {
            precision: defined.iter().map(|c| c.prf.precision).sum::<f64>() / n,
            recall: defined.iter().map(|c| c.prf.recall).sum::<f64>() / n,
            f1: defined.iter().map(|c| c.prf.f1).sum::<f64>() / n,
        }
    };
    OperatingPoint {
        threshold: tau,
        per_class,
        micro: micro_counts.prf(),
        micro_counts,
        macro_avg,
    }
}
