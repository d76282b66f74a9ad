use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    average_precision, confidence_curves, match_detections, mean_average_precision, operating_point, Curves,
    MetricsError, Predictions, Prf,
};
use crate::annotations::GroundTruthSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub match_iou: f64,
    pub confidence_threshold: f64,
    pub curve_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            match_iou: super::DEFAULT_MATCH_IOU,
            confidence_threshold: crate::DEFAULT_CONFIDENCE,
            curve_samples: 101,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: u32,
    pub name: String,
    pub gt_count: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub model: String,
    pub map: Option<f64>,
    /// Micro-averaged (pooled counts) operating point.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_avg: Prf,
    pub per_class: Vec<ClassReport>,
    pub curves: Curves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub match_iou: f64,
    pub confidence_threshold: f64,
    pub ap_method: String,
    pub detectors: Vec<DetectorReport>,
}

impl EvaluationReport {
    pub fn new(dataset: impl Into<String>, config: &EvalConfig) -> Self {
        Self {
            dataset: dataset.into(),
            match_iou: config.match_iou,
            confidence_threshold: config.confidence_threshold,
            ap_method: "all-point".into(),
            detectors: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn evaluate(
    model: &str,
    preds: &Predictions,
    gts: &GroundTruthSet,
    config: &EvalConfig,
) -> Result<DetectorReport, MetricsError> {
    let matches = match_detections(preds, gts, config.match_iou)?;
    let op = operating_point(&matches, config.confidence_threshold);
    let per_class = op
        .per_class
        .iter()
        .map(|c| ClassReport {
            class_id: c.class_id,
            name: matches.class_name(c.class_id),
            gt_count: matches.gt_count(c.class_id),
            ap: average_precision(&matches, c.class_id),
            tp: c.counts.tp,
            fp: c.counts.fp,
            fn_: c.counts.fn_,
            precision: c.prf.precision,
            recall: c.prf.recall,
            f1: c.prf.f1,
        })
        .collect();
    Ok(DetectorReport {
        model: model.to_string(),
        map: mean_average_precision(&matches),
        precision: op.micro.precision,
        recall: op.micro.recall,
        f1: op.micro.f1,
        macro_avg: op.macro_avg,
        per_class,
        curves: confidence_curves(&matches, config.curve_samples)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub table: String,
    /// `(file name, contents)` for each curve CSV.
    pub csv_files: Vec<(String, String)>,
}

impl RenderedReport {
    pub fn write_to(&self, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let table = dir.join("report.txt");
        std::fs::write(&table, &self.table)?;
        written.push(table);
        for (name, body) in &self.csv_files {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            written.push(p);
        }
        Ok(written)
    }
}

pub const TABLE_HEADER: &str = "| Model | mAP | Precision | Recall | F1 score |\n|---|---|---|---|---|\n";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

pub fn table_row(d: &DetectorReport) -> String {
    format!(
        "| {} | {} | {:.4} | {:.4} | {:.4} |",
        d.model,
        cell(d.map),
        d.precision,
        d.recall,
        d.f1
    )
}

fn file_slug(model: &str) -> String {
    model
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

pub fn render_report(report: &EvaluationReport) -> RenderedReport {
    let mut table = String::from(TABLE_HEADER);
    let mut csv_files = Vec::new();
    for d in &report.detectors {
        let _ = writeln!(table, "{}", table_row(d));
        for s in d.curves.series() {
            csv_files.push((format!("{}_{}_curve.csv", file_slug(&d.model), s.metric.as_str()), s.to_csv()));
        }
    }
    RenderedReport { table, csv_files }
}
