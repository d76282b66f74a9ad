//! Detector backends and the frame → detections path.
//!
//! A backend sees a letterboxed planar tensor and returns either a raw head
//! output (decoded here per layout) or ready-made candidates in detector
//! input space. [`detect`] then applies thresholding, NMS and maps boxes back to
//! source pixels.

mod model;
mod stub;

use std::sync::Arc;

use image::imageops::{self, FilterType};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::ClassTable;
use crate::decode::{self, DecodeError, Detection, HeadLayout, RawHeadOutput};
use crate::geometry::{letterbox_map, GeometryError, ImageSize, LetterboxTransform};
use crate::stream::{FrameDecodeError, FramePacket};

pub use model::{load_model_backend, ModelDescriptor};
pub use stub::{StubDetector, StubDetectorConfig, StubParams, StubPlan};

pub const DEFAULT_INPUT_SIZE: ImageSize = ImageSize::new(640, 640);
pub const DEFAULT_NMS_IOU: f64 = 0.45;
/// Letterbox padding, per channel, in `[0, 1]` units.
pub const PAD_VALUE: f32 = 114.0 / 255.0;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    FrameDecode(#[from] FrameDecodeError),
    #[error("backend {model}: {message}")]
    Backend { model: String, message: String },
    #[error("configuration: {0}")]
    Configuration(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// What a backend produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Raw(HeadLayout),
    /// Finished candidates in detector input space (test doubles).
    Candidates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendCapabilities {
    pub input_size: ImageSize,
    pub output: OutputKind,
    pub classes: ClassTable,
    pub model: String,
    /// `false` when calls must be serialized on one session.
    pub concurrent: bool,
}

#[derive(Debug, Clone)]
pub enum BackendOutput {
    Raw(RawHeadOutput),
    Candidates(Vec<Detection>),
}

/// Channel-planar RGB buffer (`[c][y][x]`) with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl PlanarImage {
    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let plane = (self.width * self.height) as usize;
        let i = (y * self.width + x) as usize;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }
}

pub trait DetectorBackend: Send + Sync {
    fn capabilities(&self) -> &BackendCapabilities;

    /// Must be deterministic: the same frame bytes give the same output.
    fn infer(
        &self,
        frame: &FramePacket,
        input: &PlanarImage,
        transform: &LetterboxTransform,
    ) -> Result<BackendOutput, InferenceError>;
}

/// Aspect-preserving resize with symmetric 114-gray padding.
pub fn preprocess(frame: &FramePacket, input_size: ImageSize) -> Result<(PlanarImage, LetterboxTransform), InferenceError> {
    let img = frame.data.decode()?;
    let src = ImageSize::new(img.width(), img.height());
    let t = LetterboxTransform::fit(src, input_size)?;
    let resized_size = t.resized_size();
    let resized;
    let content = if resized_size == src {
        img.as_ref()
    } else {
        resized = imageops::resize(img.as_ref(), resized_size.width, resized_size.height, FilterType::Triangle);
        &resized
    };

    let (w, h) = (input_size.width as usize, input_size.height as usize);
    let plane = w * h;
    let mut data = vec![PAD_VALUE; 3 * plane];
    let (ox, oy) = (t.pad_x as usize, t.pad_y as usize);
    let raw = content.as_raw();
    let cw = content.width() as usize;
    for y in 0..content.height() as usize {
        let row = &raw[y * cw * 3..(y + 1) * cw * 3];
        let base = (y + oy) * w + ox;
        for (x, px) in row.chunks_exact(3).enumerate() {
            data[base + x] = px[0] as f32 / 255.0;
            data[plane + base + x] = px[1] as f32 / 255.0;
            data[2 * plane + base + x] = px[2] as f32 / 255.0;
        }
    }
    Ok((
        PlanarImage {
            width: input_size.width,
            height: input_size.height,
            data,
        },
        t,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdStage {
    #[default]
    BeforeNms,
    AfterNms,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub confidence: f64,
    pub nms_iou: f64,
    pub threshold_stage: ThresholdStage,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            confidence: crate::DEFAULT_CONFIDENCE,
            nms_iou: DEFAULT_NMS_IOU,
            threshold_stage: ThresholdStage::BeforeNms,
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(InferenceError::Configuration(format!("confidence {} outside [0, 1]", self.confidence)));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(InferenceError::Configuration(format!("nms iou {} outside [0, 1]", self.nms_iou)));
        }
        Ok(())
    }
}

/// A backend bound to a class table and post-processing parameters.
#[derive(Clone)]
pub struct Detector {
    backend: Arc<dyn DetectorBackend>,
    params: DetectParams,
}

impl std::fmt::Debug for Detector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Detector")
            .field("model", &self.backend.capabilities().model)
            .field("params", &self.params)
            .finish()
    }
}

impl Detector {
    pub fn new(backend: Arc<dyn DetectorBackend>, classes: &ClassTable, params: DetectParams) -> Result<Self, InferenceError> {
        params.validate()?;
        let caps = backend.capabilities();
        if &caps.classes != classes {
            return Err(InferenceError::Configuration(format!(
                "backend {} class table {:?} does not match configured {:?}",
                caps.model,
                caps.classes.iter().map(|c| &c.name).collect::<Vec<_>>(),
                classes.iter().map(|c| &c.name).collect::<Vec<_>>(),
            )));
        }
        Ok(Self { backend, params })
    }

    pub fn capabilities(&self) -> &BackendCapabilities {
        self.backend.capabilities()
    }

    pub fn model(&self) -> &str {
        &self.backend.capabilities().model
    }

    pub fn params(&self) -> &DetectParams {
        &self.params
    }

    /// preprocess → backend → decode → threshold / NMS → source pixels.
    pub fn detect(&self, frame: &FramePacket) -> Result<Vec<Detection>, InferenceError> {
        let caps = self.backend.capabilities();
        let (input, transform) = preprocess(frame, caps.input_size)?;
        let candidates = match self.backend.infer(frame, &input, &transform)? {
            BackendOutput::Raw(raw) => decode::decode(&raw, &caps.classes)?,
            BackendOutput::Candidates(c) => c,
        };
        let p = &self.params;
        let kept = match p.threshold_stage {
            ThresholdStage::BeforeNms => decode::nms(&decode::threshold_confidence(candidates, p.confidence), p.nms_iou),
            ThresholdStage::AfterNms => decode::threshold_confidence(decode::nms(&candidates, p.nms_iou), p.confidence),
        };
        Ok(kept
            .into_iter()
            .map(|d| Detection {
                bbox: letterbox_map(&d.bbox, &transform),
                ..d
            })
            .collect())
    }
}

pub fn detect(
    frame: &FramePacket,
    backend: Arc<dyn DetectorBackend>,
    classes: &ClassTable,
    params: DetectParams,
) -> Result<Vec<Detection>, InferenceError> {
    Detector::new(backend, classes, params)?.detect(frame)
}
