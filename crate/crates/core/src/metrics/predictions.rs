//! JSON-lines predictions interchange: one detection per line, so external
//! detectors can be scored without running inference here.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::decode::Detection;
use crate::geometry::PixelBox;

/// Source-pixel detections keyed by image id.
pub type Predictions = BTreeMap<String, Vec<Detection>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub class_id: u32,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

impl PredictionRecord {
    pub fn new(image_id: &str, d: &Detection) -> Self {
        Self {
            image_id: image_id.to_string(),
            class_id: d.class_id,
            confidence: d.confidence,
            bbox: d.bbox.as_array(),
        }
    }
}

/// Serializes predictions in key order, detections in list order.
pub fn write_predictions(preds: &Predictions) -> String {
    let mut out = String::new();
    for (image_id, dets) in preds {
        for d in dets {
            out.push_str(&serde_json::to_string(&PredictionRecord::new(image_id, d)).expect("record serializes"));
            out.push('\n');
        }
    }
    out
}

/// Images listed in `known_images` appear in the result even when they have
/// no detection lines.
pub fn read_predictions(text: &str, known_images: &[String]) -> Result<Predictions, MetricsError> {
    let mut preds: Predictions = known_images.iter().map(|id| (id.clone(), Vec::new())).collect();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| MetricsError::Predictions { line: i + 1, reason };
        let r: PredictionRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(err(format!("confidence {} outside [0, 1]", r.confidence)));
        }
        let [x1, y1, x2, y2] = r.bbox;
        let bbox = PixelBox::new(x1, y1, x2, y2).map_err(|e| err(e.to_string()))?;
        preds.entry(r.image_id).or_default().push(Detection {
            class_id: r.class_id,
            confidence: r.confidence,
            bbox,
        });
    }
    Ok(preds)
}
