//! Deterministic ground-truth-driven detector used when no trained weights
//! are available.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{BackendCapabilities, BackendOutput, DetectorBackend, InferenceError, OutputKind, PlanarImage, DEFAULT_INPUT_SIZE};
use crate::annotations::{DatasetManifest, GroundTruthSet, ParseMode};
use crate::decode::Detection;
use crate::geometry::{ImageSize, LetterboxTransform, NormalizedBox};
use crate::stream::FramePacket;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubParams {
    pub base_confidence: f64,
    pub miss_rate: f64,
    /// Expected spurious boxes per frame.
    pub false_positive_rate: f64,
    /// Box noise amplitude in normalized units; also perturbs confidence.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for StubParams {
    fn default() -> Self {
        Self {
            base_confidence: 0.9,
            miss_rate: 0.0,
            false_positive_rate: 0.0,
            jitter: 0.0,
            seed: 0,
        }
    }
}

impl StubParams {
    pub fn validate(&self) -> Result<(), InferenceError> {
        let bad = |m: String| Err(InferenceError::Configuration(m));
        if !(0.0..=1.0).contains(&self.base_confidence) {
            return bad(format!("base_confidence {} outside [0, 1]", self.base_confidence));
        }
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return bad(format!("miss_rate {} outside [0, 1]", self.miss_rate));
        }
        if !(self.false_positive_rate >= 0.0 && self.false_positive_rate.is_finite()) {
            return bad(format!("false_positive_rate {} must be >= 0", self.false_positive_rate));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad(format!("jitter {} must be >= 0", self.jitter));
        }
        Ok(())
    }
}

/// Stub config file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubDetectorConfig {
    /// Manifest whose labels drive the stub.
    pub ground_truth_source: PathBuf,
    #[serde(flatten)]
    pub params: StubParams,
    #[serde(default = "default_input_size")]
    pub input_size: ImageSize,
    #[serde(default = "default_model")]
    pub model: String,
}

fn default_input_size() -> ImageSize {
    DEFAULT_INPUT_SIZE
}

fn default_model() -> String {
    "stub".into()
}

/// Everything the stub decides for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct StubPlan {
    /// Per ground-truth record: emitted (`true`) or dropped.
    pub kept: Vec<bool>,
    /// `(class id, confidence, box)` in emission order: kept ground truth
    /// first, then false positives.
    pub boxes: Vec<(u32, f64, NormalizedBox)>,
    pub false_positives: usize,
}

#[derive(Debug, Clone)]
pub struct StubDetector {
    params: StubParams,
    ground_truth: GroundTruthSet,
    caps: BackendCapabilities,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

impl StubDetector {
    pub fn new(params: StubParams, ground_truth: GroundTruthSet, input_size: ImageSize, model: &str) -> Result<Self, InferenceError> {
        params.validate()?;
        input_size.validate()?;
        let caps = BackendCapabilities {
            input_size,
            output: OutputKind::Candidates,
            classes: ground_truth.classes.clone(),
            model: model.to_string(),
            concurrent: true,
        };
        Ok(Self {
            params,
            ground_truth,
            caps,
        })
    }

    pub fn from_config(config: &StubDetectorConfig) -> Result<Self, InferenceError> {
        let cfg_err = |e: &dyn std::fmt::Display| InferenceError::Configuration(e.to_string());
        let manifest = DatasetManifest::load(&config.ground_truth_source).map_err(|e| cfg_err(&e))?;
        let gts = manifest.load_ground_truth(ParseMode::Strict).map_err(|e| cfg_err(&e))?;
        Self::new(config.params, gts, config.input_size, &config.model)
    }

    pub fn params(&self) -> &StubParams {
        &self.params
    }

    pub fn ground_truth(&self) -> &GroundTruthSet {
        &self.ground_truth
    }

    fn rng(&self, image_id: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.params.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a(image_id))
    }

    /// Deterministic in `(seed, image_id)`. Each ground-truth record always
    /// consumes the same number of draws, so drop decisions are nested as
    /// `miss_rate` grows.
    pub fn plan(&self, image_id: &str) -> StubPlan {
        let p = &self.params;
        let mut rng = self.rng(image_id);
        let records = self.ground_truth.get(image_id).map_or(&[][..], |a| a.records.as_slice());
        let mut kept = Vec::with_capacity(records.len());
        let mut boxes = Vec::new();
        for r in records {
            let drop_draw: f64 = rng.random();
            let noise: [f64; 5] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
            let keep = drop_draw >= p.miss_rate;
            kept.push(keep);
            if !keep {
                continue;
            }
            let b = &r.bbox;
            let jittered = NormalizedBox {
                cx: (b.cx + p.jitter * noise[0]).clamp(0.0, 1.0),
                cy: (b.cy + p.jitter * noise[1]).clamp(0.0, 1.0),
                w: (b.w + p.jitter * noise[2]).clamp(0.0, 1.0),
                h: (b.h + p.jitter * noise[3]).clamp(0.0, 1.0),
            };
            let confidence = (p.base_confidence + p.jitter * noise[4]).clamp(0.0, 1.0);
            boxes.push((r.class.id, confidence, jittered));
        }
        let false_positives = if p.false_positive_rate > 0.0 {
            Poisson::new(p.false_positive_rate).map_or(0, |d| d.sample(&mut rng) as usize)
        } else {
            0
        };
        let ids = self.ground_truth.classes.ids();
        for _ in 0..false_positives {
            let class_id = ids[rng.random_range(0..ids.len())];
            let w: f64 = rng.random_range(0.02..0.2);
            let h: f64 = rng.random_range(0.02..0.2);
            let cx: f64 = rng.random_range(0.0..1.0);
            let cy: f64 = rng.random_range(0.0..1.0);
            let confidence = rng.random_range(0.0..=p.base_confidence);
            boxes.push((class_id, confidence, NormalizedBox { cx, cy, w, h }));
        }
        StubPlan {
            kept,
            boxes,
            false_positives,
        }
    }

    /// Candidates in source pixels of an image of the given size.
    pub fn stub_detect(&self, image_id: &str, size: ImageSize) -> Result<Vec<Detection>, InferenceError> {
        self.plan(image_id)
            .boxes
            .into_iter()
            .map(|(class_id, confidence, b)| {
                Ok(Detection {
                    class_id,
                    confidence,
                    bbox: b.to_pixel(size)?,
                })
            })
            .collect()
    }
}

impl DetectorBackend for StubDetector {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    fn infer(&self, frame: &FramePacket, _input: &PlanarImage, transform: &LetterboxTransform) -> Result<BackendOutput, InferenceError> {
        let dets = self.stub_detect(&frame.image_id, frame.size())?;
        Ok(BackendOutput::Candidates(
            dets.into_iter()
                .map(|d| Detection {
                    bbox: transform.forward(&d.bbox),
                    ..d
                })
                .collect(),
        ))
    }
}
