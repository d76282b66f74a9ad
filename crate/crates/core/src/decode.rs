//! Raw detector head decoding, confidence thresholding and per-class NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::ClassTable;
use crate::geometry::{ImageSize, PixelBox};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("head layout error: {0}")]
    Layout(String),
    #[error("negative distance {value} at grid {grid} cell ({gx}, {gy})")]
    NegativeDistance {
        grid: usize,
        gx: u32,
        gy: u32,
        value: f32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLayout {
    /// Offsets relative to grid cells and anchor boxes (v5 family).
    AnchorGrid,
    /// Distances from the cell-centre anchor point (v8 family).
    AnchorFree,
}

/// One detection scale of a head.
///
/// `data` is row-major `[anchor][gy][gx][channel]` for anchor-grid heads
/// (channels = 4 box + 1 objectness + C classes) and `[gy][gx][channel]`
/// for anchor-free heads (channels = 4 distances + C classes).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrid {
    pub stride: u32,
    pub grid_w: u32,
    pub grid_h: u32,
    /// Anchor sizes in input pixels; empty for anchor-free heads.
    pub anchors: Vec<(f64, f64)>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawHeadOutput {
    pub layout: HeadLayout,
    pub input_size: ImageSize,
    pub grids: Vec<HeadGrid>,
}

impl RawHeadOutput {
    pub fn channels(&self, num_classes: usize) -> usize {
        match self.layout {
            HeadLayout::AnchorGrid => 5 + num_classes,
            HeadLayout::AnchorFree => 4 + num_classes,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), DecodeError> {
        let channels = self.channels(num_classes);
        for (i, g) in self.grids.iter().enumerate() {
            if g.stride * g.grid_w != self.input_size.width || g.stride * g.grid_h != self.input_size.height {
                return Err(DecodeError::Layout(format!(
                    "grid {i}: stride {} x {}x{} does not cover input {}",
                    g.stride, g.grid_w, g.grid_h, self.input_size
                )));
            }
            let anchors = match self.layout {
                HeadLayout::AnchorGrid if g.anchors.is_empty() => {
                    return Err(DecodeError::Layout(format!("grid {i}: anchor-grid head without anchors")))
                }
                HeadLayout::AnchorFree if !g.anchors.is_empty() => {
                    return Err(DecodeError::Layout(format!("grid {i}: anchor-free head with anchors")))
                }
                HeadLayout::AnchorGrid => g.anchors.len(),
                HeadLayout::AnchorFree => 1,
            };
            let expected = anchors * (g.grid_w * g.grid_h) as usize * channels;
            if g.data.len() != expected {
                return Err(DecodeError::Layout(format!(
                    "grid {i}: {} values, expected {expected} ({channels} channels for {num_classes} classes)",
                    g.data.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: u32,
    pub confidence: f64,
    pub bbox: PixelBox,
}

/// A decoded prediction before clamping, kept for inspection and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawPrediction {
    pub grid: usize,
    pub gx: u32,
    pub gy: u32,
    pub anchor: Option<usize>,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
    pub class_index: usize,
}

impl RawPrediction {
    fn into_detection(self, input: ImageSize, classes: &ClassTable) -> Detection {
        let bbox = PixelBox {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
        .clamp_to(input.width as f64, input.height as f64);
        Detection {
            class_id: classes.at(self.class_index).map_or(self.class_index as u32, |c| c.id),
            confidence: self.confidence,
            bbox,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn argmax(scores: &[f32]) -> (usize, f32) {
    scores
        .iter()
        .copied()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, s)| if s > best.1 { (i, s) } else { best })
}

pub fn anchor_grid_predictions(raw: &RawHeadOutput, num_classes: usize) -> Result<Vec<RawPrediction>, DecodeError> {
    if raw.layout != HeadLayout::AnchorGrid {
        return Err(DecodeError::Layout("expected an anchor-grid head".into()));
    }
    raw.validate(num_classes)?;
    let channels = raw.channels(num_classes);
    let mut out = Vec::new();
    for (gi, g) in raw.grids.iter().enumerate() {
        let stride = g.stride as f64;
        let cells = (g.grid_w * g.grid_h) as usize;
        for (ai, &(aw, ah)) in g.anchors.iter().enumerate() {
            for cell in 0..cells {
                let gx = (cell % g.grid_w as usize) as u32;
                let gy = (cell / g.grid_w as usize) as u32;
                let base = (ai * cells + cell) * channels;
                let v = &g.data[base..base + channels];
                let (class_index, best) = argmax(&v[5..]);
                let sx = 2.0 * sigmoid(v[0] as f64);
                let sy = 2.0 * sigmoid(v[1] as f64);
                let sw = 2.0 * sigmoid(v[2] as f64);
                let sh = 2.0 * sigmoid(v[3] as f64);
                out.push(RawPrediction {
                    grid: gi,
                    gx,
                    gy,
                    anchor: Some(ai),
                    cx: (sx - 0.5 + gx as f64) * stride,
                    cy: (sy - 0.5 + gy as f64) * stride,
                    w: sw * sw * aw,
                    h: sh * sh * ah,
                    confidence: sigmoid(v[4] as f64) * sigmoid(best as f64),
                    class_index,
                });
            }
        }
    }
    Ok(out)
}

pub fn anchor_free_predictions(raw: &RawHeadOutput, num_classes: usize) -> Result<Vec<RawPrediction>, DecodeError> {
    if raw.layout != HeadLayout::AnchorFree {
        return Err(DecodeError::Layout("expected an anchor-free head".into()));
    }
    raw.validate(num_classes)?;
    let channels = raw.channels(num_classes);
    let mut out = Vec::new();
    for (gi, g) in raw.grids.iter().enumerate() {
        let stride = g.stride as f64;
        for cell in 0..(g.grid_w * g.grid_h) as usize {
            let gx = (cell % g.grid_w as usize) as u32;
            let gy = (cell / g.grid_w as usize) as u32;
            let v = &g.data[cell * channels..(cell + 1) * channels];
            if let Some(&value) = v[..4].iter().find(|d| **d < 0.0) {
                return Err(DecodeError::NegativeDistance { grid: gi, gx, gy, value });
            }
            let (l, t, r, b) = (v[0] as f64, v[1] as f64, v[2] as f64, v[3] as f64);
            let (ax, ay) = (gx as f64 + 0.5, gy as f64 + 0.5);
            let (x1, y1) = ((ax - l) * stride, (ay - t) * stride);
            let (x2, y2) = ((ax + r) * stride, (ay + b) * stride);
            let (class_index, best) = argmax(&v[4..]);
            out.push(RawPrediction {
                grid: gi,
                gx,
                gy,
                anchor: None,
                cx: (x1 + x2) / 2.0,
                cy: (y1 + y2) / 2.0,
                w: x2 - x1,
                h: y2 - y1,
                confidence: sigmoid(best as f64),
                class_index,
            });
        }
    }
    Ok(out)
}

pub fn decode_anchor_grid(raw: &RawHeadOutput, classes: &ClassTable) -> Result<Vec<Detection>, DecodeError> {
    Ok(anchor_grid_predictions(raw, classes.len())?
        .into_iter()
        .map(|p| p.into_detection(raw.input_size, classes))
        .collect())
}

pub fn decode_anchor_free(raw: &RawHeadOutput, classes: &ClassTable) -> Result<Vec<Detection>, DecodeError> {
    Ok(anchor_free_predictions(raw, classes.len())?
        .into_iter()
        .map(|p| p.into_detection(raw.input_size, classes))
        .collect())
}

pub fn decode(raw: &RawHeadOutput, classes: &ClassTable) -> Result<Vec<Detection>, DecodeError> {
    match raw.layout {
        HeadLayout::AnchorGrid => decode_anchor_grid(raw, classes),
        HeadLayout::AnchorFree => decode_anchor_free(raw, classes),
    }
}

/// Keeps detections with `confidence >= tau`, in input order.
pub fn threshold_confidence(cands: Vec<Detection>, tau: f64) -> Vec<Detection> {
    cands.into_iter().filter(|d| d.confidence >= tau).collect()
}

/// Descending confidence, then smaller area, then input order.
pub fn detection_order(a: (usize, &Detection), b: (usize, &Detection)) -> Ordering {
    b.1.confidence
        .total_cmp(&a.1.confidence)
        .then_with(|| a.1.bbox.area().total_cmp(&b.1.bbox.area()))
        .then_with(|| a.0.cmp(&b.0))
}

/// Greedy per-class non-maximum suppression.
///
/// A box is suppressed when its IoU with an already kept box of the same
/// class exceeds `iou_thresh`. Output is in [`detection_order`].
pub fn nms(cands: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    nms_indices(cands, iou_thresh).into_iter().map(|i| cands[i]).collect()
}

/// Indices into `cands` of the boxes [`nms`] keeps, in output order.
pub fn nms_indices(cands: &[Detection], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| detection_order((a, &cands[a]), (b, &cands[b])));

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &cands[i];
        let suppressed = kept
            .iter()
            .any(|&k| cands[k].class_id == d.class_id && cands[k].bbox.iou(&d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}
