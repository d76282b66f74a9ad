use serde::{Deserialize, Serialize};

use super::{Counts, MatchResult, MetricsError, Prf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveMetric {
    Precision,
    Recall,
    F1,
}

impl CurveMetric {
    pub const ALL: [CurveMetric; 3] = [CurveMetric::Precision, CurveMetric::Recall, CurveMetric::F1];

    pub fn as_str(self) -> &'static str {
        match self {
            CurveMetric::Precision => "precision",
            CurveMetric::Recall => "recall",
            CurveMetric::F1 => "f1",
        }
    }

    fn pick(self, p: &Prf) -> f64 {
        match self {
            CurveMetric::Precision => p.precision,
            CurveMetric::Recall => p.recall,
            CurveMetric::F1 => p.f1,
        }
    }
}

impl std::str::FromStr for CurveMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CurveMetric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub confidence: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCurve {
    /// Class name, or `all` for the pooled aggregate.
    pub class: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub metric: CurveMetric,
    pub series: Vec<ClassCurve>,
}

impl CurveSeries {
    pub fn aggregate(&self) -> Option<&ClassCurve> {
        self.series.iter().find(|c| c.class == AGGREGATE)
    }

    /// CSV with header `confidence,class,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["confidence", "class", "metric", "value"]).expect("in-memory write");
        for c in &self.series {
            for p in &c.points {
                w.write_record([
                    p.confidence.to_string(),
                    c.class.clone(),
                    self.metric.as_str().to_string(),
                    p.value.to_string(),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

pub(crate) const AGGREGATE: &str = "all";

/// Confidence-swept precision, recall and F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub precision: CurveSeries,
    pub recall: CurveSeries,
    pub f1: CurveSeries,
    /// Smallest swept confidence from which aggregate precision stays at 1.
    pub precision_saturation: Option<f64>,
}

impl Curves {
    pub fn series(&self) -> [&CurveSeries; 3] {
        [&self.precision, &self.recall, &self.f1]
    }
}

/// Sweep grid `i / (samples - 1)` merged with every distinct detection
/// confidence in `[0, 1]`, strictly increasing.
pub fn sweep_points(matches: &MatchResult, samples: usize) -> Vec<f64> {
    let mut pts: Vec<f64> = (0..samples).map(|i| i as f64 / (samples - 1) as f64).collect();
    pts.extend(
        matches
            .images
            .iter()
            .flat_map(|im| im.matches.iter().map(|m| m.confidence))
            .filter(|c| (0.0..=1.0).contains(c)),
    );
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

/// Per-class confidences of true and false positives, sorted ascending, for
/// counting detections at or above a threshold by binary search.
struct ClassScores {
    class_id: u32,
    tp: Vec<f64>,
    fp: Vec<f64>,
    n_gt: usize,
}

impl ClassScores {
    fn counts(&self, tau: f64) -> Counts {
        let at_least = |v: &[f64]| v.len() - v.partition_point(|c| *c < tau);
        let tp = at_least(&self.tp);
        Counts {
            tp,
            fp: at_least(&self.fp),
            fn_: self.n_gt - tp,
        }
    }
}

pub fn confidence_curves(matches: &MatchResult, samples: usize) -> Result<Curves, MetricsError> {
    if samples < 2 {
        return Err(MetricsError::InvalidArgument(format!("curve samples must be >= 2, got {samples}")));
    }
    let sweep = sweep_points(matches, samples);
    let scores: Vec<ClassScores> = matches
        .class_ids()
        .into_iter()
        .map(|class_id| {
            let ranked = matches.ranked(class_id);
            let mut tp: Vec<f64> = ranked.iter().filter(|m| m.is_tp()).map(|m| m.confidence).collect();
            let mut fp: Vec<f64> = ranked.iter().filter(|m| !m.is_tp()).map(|m| m.confidence).collect();
            tp.sort_by(f64::total_cmp);
            fp.sort_by(f64::total_cmp);
            ClassScores {
                class_id,
                tp,
                fp,
                n_gt: matches.gt_count(class_id),
            }
        })
        .collect();

    // [class index or aggregate][sweep index]
    let mut prf_rows: Vec<(String, Vec<Prf>)> = Vec::with_capacity(scores.len() + 1);
    let mut pooled = vec![Counts::default(); sweep.len()];
    for s in &scores {
        let row = sweep
            .iter()
            .zip(pooled.iter_mut())
            .map(|(&tau, pool)| {
                let c = s.counts(tau);
                *pool = *pool + c;
                c.prf()
            })
            .collect();
        prf_rows.push((matches.class_name(s.class_id), row));
    }
    let aggregate: Vec<Prf> = pooled.iter().map(Counts::prf).collect();

    let precision_saturation = aggregate
        .iter()
        .rposition(|p| p.precision < 1.0)
        .map_or(Some(sweep[0]), |last_bad| sweep.get(last_bad + 1).copied());

    prf_rows.insert(0, (AGGREGATE.to_string(), aggregate));
    let build = |metric: CurveMetric| CurveSeries {
        metric,
        series: prf_rows
            .iter()
            .map(|(class, row)| ClassCurve {
                class: class.clone(),
                points: sweep
                    .iter()
                    .zip(row)
                    .map(|(&confidence, p)| CurvePoint {
                        confidence,
                        value: metric.pick(p),
                    })
                    .collect(),
            })
            .collect(),
    };
    Ok(Curves {
        precision: build(CurveMetric::Precision),
        recall: build(CurveMetric::Recall),
        f1: build(CurveMetric::F1),
        precision_saturation,
    })
}

#[derive(Debug, Deserialize)]
struct CurveRow {
    confidence: f64,
    class: String,
    metric: String,
    value: f64,
}

/// Parses one curve CSV back into a series; class order follows first
/// appearance.
pub fn parse_curve_csv(text: &str) -> Result<CurveSeries, MetricsError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| MetricsError::Csv(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["confidence", "class", "metric", "value"] {
        return Err(MetricsError::Csv(format!("unexpected header {headers:?}")));
    }
    let mut metric: Option<CurveMetric> = None;
    let mut series: Vec<ClassCurve> = Vec::new();
    for row in rdr.deserialize::<CurveRow>() {
        let row = row.map_err(|e| MetricsError::Csv(e.to_string()))?;
        let m: CurveMetric = row.metric.parse().map_err(MetricsError::Csv)?;
        match metric {
            None => metric = Some(m),
            Some(prev) if prev != m => {
                return Err(MetricsError::Csv(format!("mixed metrics {} and {}", prev.as_str(), m.as_str())))
            }
            Some(_) => {}
        }
        let point = CurvePoint {
            confidence: row.confidence,
            value: row.value,
        };
        match series.iter_mut().find(|c| c.class == row.class) {
            Some(c) => c.points.push(point),
            None => series.push(ClassCurve {
                class: row.class,
                points: vec![point],
            }),
        }
    }
    let metric = metric.ok_or_else(|| MetricsError::Csv("no rows".into()))?;
    Ok(CurveSeries { metric, series })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::{match_detections, Detection};
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    /// Four perfect detections at 0.9 plus one false positive at 0.5.
    fn one_fp_case() -> MatchResult {
        let boxes: Vec<_> = (0..4).map(|i| pb(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0)).collect();
        let g = gt_set(&[("a", boxes.iter().map(|b| (0, *b)).collect())]);
        let mut dets: Vec<Detection> = boxes.iter().map(|b| det(0, 0.9, *b)).collect();
        dets.push(det(0, 0.5, pb(0.0, 50.0, 10.0, 60.0)));
        let p: BTreeMap<String, Vec<Detection>> = [("a".to_string(), dets)].into_iter().collect();
        match_detections(&p, &g, 0.5).unwrap()
    }

    #[test]
    fn saturation_is_next_breakpoint_after_fp() {
        let m = one_fp_case();
        let c = confidence_curves(&m, 2).unwrap();
        // sweep {0, 0.5, 0.9, 1}
        assert_eq!(c.precision_saturation, Some(0.9));
        let c = confidence_curves(&m, 101).unwrap();
        assert_eq!(c.precision_saturation, Some(51.0 / 100.0));
    }

    #[test]
    fn perfect_detections_saturate_at_zero() {
        let boxes: Vec<_> = (0..3).map(|i| pb(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0)).collect();
        let g = gt_set(&[("a", boxes.iter().map(|b| (1, *b)).collect())]);
        let p = [("a".to_string(), boxes.iter().map(|b| det(1, 0.9, *b)).collect())].into_iter().collect();
        let m = match_detections(&p, &g, 0.5).unwrap();
        let c = confidence_curves(&m, 11).unwrap();
        assert_eq!(c.precision_saturation, Some(0.0));
        assert!(c.precision.aggregate().unwrap().points.iter().all(|p| p.value == 1.0));
    }

    #[test]
    fn fp_at_full_confidence_never_saturates() {
        let g = gt_set(&[("a", vec![])]);
        let p = [("a".to_string(), vec![det(0, 1.0, pb(0.0, 0.0, 5.0, 5.0))])].into_iter().collect();
        let m = match_detections(&p, &g, 0.5).unwrap();
        assert_eq!(confidence_curves(&m, 5).unwrap().precision_saturation, None);
    }

    #[test]
    fn rejects_single_sample() {
        assert!(confidence_curves(&one_fp_case(), 1).is_err());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let c = confidence_curves(&one_fp_case(), 7).unwrap();
        for s in c.series() {
            let text = s.to_csv();
            assert!(text.starts_with("confidence,class,metric,value\n"));
            assert_eq!(&parse_curve_csv(&text).unwrap(), s);
        }
        assert!(parse_curve_csv("a,b\n1,2\n").is_err());
    }

    proptest! {
        #[test]
        fn curve_shape(confs in proptest::collection::vec((0.0..=1.0f64, any::<bool>()), 1..20), samples in 2usize..50) {
            let boxes: Vec<_> = (0..confs.len()).map(|i| pb(i as f64 * 4.0, 0.0, i as f64 * 4.0 + 3.0, 3.0)).collect();
            let g = gt_set(&[("a", boxes.iter().map(|b| (2, *b)).collect())]);
            let dets = boxes.iter().zip(&confs).map(|(b, (c, hit))| {
                let bb = if *hit { *b } else { pb(b.x1, 50.0, b.x2, 53.0) };
                det(2, *c, bb)
            }).collect();
            let m = match_detections(&[("a".to_string(), dets)].into_iter().collect(), &g, 0.5).unwrap();
            let c = confidence_curves(&m, samples).unwrap();
            for s in c.series() {
                for cc in &s.series {
                    prop_assert!(cc.points.windows(2).all(|w| w[0].confidence < w[1].confidence));
                    prop_assert!(cc.points.iter().all(|p| (0.0..=1.0).contains(&p.value)));
                }
            }
            for cc in &c.recall.series {
                prop_assert!(cc.points.windows(2).all(|w| w[0].value >= w[1].value));
            }
            if let Some(sat) = c.precision_saturation {
                let agg = c.precision.aggregate().unwrap();
                prop_assert!(agg.points.iter().filter(|p| p.confidence >= sat).all(|p| p.value == 1.0));
            }
        }
    }
}
