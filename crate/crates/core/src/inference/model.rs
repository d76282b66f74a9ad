//! External model descriptors and the optional ONNX backend.
//!
//! Expected output tensors, one per stride in descriptor order:
//! anchor-grid heads `[1, A, H, W, 5 + C]`, anchor-free heads
//! `[1, 4 + C, H, W]` with the four distance channels already reduced to
//! expected values in stride units.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DetectorBackend, InferenceError, DEFAULT_INPUT_SIZE};
use crate::annotations::ClassTable;
use crate::decode::HeadLayout;
use crate::geometry::ImageSize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub model_path: PathBuf,
    pub layout: HeadLayout,
    #[serde(default = "default_input")]
    pub input_size: [u32; 2],
    pub strides: Vec<u32>,
    /// Per stride, anchor `[w, h]` pairs in input pixels. Anchor-grid only.
    #[serde(default)]
    pub anchors: Vec<Vec<[f64; 2]>>,
    pub classes: ClassTable,
    #[serde(default)]
    pub name: Option<String>,
    /// Serialize calls when the runtime session is not thread-safe.
    #[serde(default)]
    pub single_session: bool,
}

fn default_input() -> [u32; 2] {
    [DEFAULT_INPUT_SIZE.width, DEFAULT_INPUT_SIZE.height]
}

impl ModelDescriptor {
    pub fn load(path: &Path) -> Result<Self, InferenceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InferenceError::Configuration(format!("{}: {e}", path.display())))?;
        let mut d: ModelDescriptor = serde_json::from_str(&text)
            .map_err(|e| InferenceError::Configuration(format!("{}: {e}", path.display())))?;
        if d.model_path.is_relative() {
            if let Some(base) = path.parent() {
                d.model_path = base.join(&d.model_path);
            }
        }
        d.validate()?;
        Ok(d)
    }

    pub fn input(&self) -> ImageSize {
        ImageSize::new(self.input_size[0], self.input_size[1])
    }

    pub fn identity(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            self.model_path
                .file_stem()
                .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned())
        })
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        let bad = |m: String| Err(InferenceError::Configuration(m));
        let input = self.input().validate()?;
        if self.strides.is_empty() {
            return bad("descriptor lists no strides".into());
        }
        for &s in &self.strides {
            if s == 0 || input.width % s != 0 || input.height % s != 0 {
                return bad(format!("stride {s} does not divide input {input}"));
            }
        }
        match self.layout {
            HeadLayout::AnchorGrid if self.anchors.len() != self.strides.len() => bad(format!(
                "anchor-grid descriptor needs one anchor list per stride ({} strides, {} lists)",
                self.strides.len(),
                self.anchors.len()
            )),
            HeadLayout::AnchorGrid if self.anchors.iter().any(Vec::is_empty) => bad("empty anchor list".into()),
            HeadLayout::AnchorFree if !self.anchors.is_empty() => bad("anchor-free descriptor must not list anchors".into()),
            _ => Ok(()),
        }
    }
}

/// Loads the backend named by a descriptor.
pub fn load_model_backend(descriptor: &ModelDescriptor) -> Result<Arc<dyn DetectorBackend>, InferenceError> {
    descriptor.validate()?;
    #[cfg(feature = "onnx")]
    {
        Ok(Arc::new(onnx::OnnxBackend::load(descriptor)?))
    }
    #[cfg(not(feature = "onnx"))]
    {
        Err(InferenceError::Backend {
            model: descriptor.identity(),
            message: "ONNX support not compiled in (rebuild with --features onnx)".into(),
        })
    }
}

#[cfg(feature = "onnx")]
mod onnx {
    use tract_onnx::prelude::*;

    use super::super::{
        BackendCapabilities, BackendOutput, DetectorBackend, InferenceError, OutputKind, PlanarImage,
    };
    use super::ModelDescriptor;
    use crate::decode::{HeadGrid, HeadLayout, RawHeadOutput};
    use crate::geometry::LetterboxTransform;
    use crate::stream::FramePacket;

    type Plan = Arc<TypedRunnableModel>;

    pub struct OnnxBackend {
        plan: Plan,
        descriptor: ModelDescriptor,
        caps: BackendCapabilities,
    }

    impl OnnxBackend {
        pub fn load(d: &ModelDescriptor) -> Result<Self, InferenceError> {
            let err = |e: TractError| InferenceError::Backend {
                model: d.identity(),
                message: format!("{e:#}"),
            };
            let input = d.input();
            let plan = tract_onnx::onnx()
                .model_for_path(&d.model_path)
                .and_then(|m| m.with_input_fact(0, f32::fact([1, 3, input.height as usize, input.width as usize]).into()))
                .and_then(|m| m.into_optimized())
                .and_then(|m| m.into_runnable())
                .map_err(err)?;
            Ok(Self {
                plan,
                descriptor: d.clone(),
                caps: BackendCapabilities {
                    input_size: input,
                    output: OutputKind::Raw(d.layout),
                    classes: d.classes.clone(),
                    model: d.identity(),
                    concurrent: !d.single_session,
                },
            })
        }

        fn backend_err(&self, message: String) -> InferenceError {
            InferenceError::Backend {
                model: self.caps.model.clone(),
                message,
            }
        }
    }

    impl DetectorBackend for OnnxBackend {
        fn capabilities(&self) -> &BackendCapabilities {
            &self.caps
        }

        fn infer(&self, _frame: &FramePacket, input: &PlanarImage, _t: &LetterboxTransform) -> Result<BackendOutput, InferenceError> {
            let shape = [1, 3, input.height as usize, input.width as usize];
            let tensor = Tensor::from_shape(&shape, &input.data).map_err(|e| self.backend_err(format!("{e:#}")))?;
            let outputs = self
                .plan
                .run(tvec!(tensor.into()))
                .map_err(|e| self.backend_err(format!("{e:#}")))?;
            let d = &self.descriptor;
            if outputs.len() != d.strides.len() {
                return Err(self.backend_err(format!("{} outputs for {} strides", outputs.len(), d.strides.len())));
            }
            let c = d.classes.len();
            let mut grids = Vec::with_capacity(outputs.len());
            for (i, out) in outputs.iter().enumerate() {
                let stride = d.strides[i];
                let (gw, gh) = (input.width / stride, input.height / stride);
                let view = out.to_plain_array_view::<f32>().map_err(|e| self.backend_err(format!("{e:#}")))?;
                let data: Vec<f32> = match d.layout {
                    HeadLayout::AnchorGrid => {
                        let a = d.anchors[i].len();
                        let want = [1, a, gh as usize, gw as usize, 5 + c];
                        if view.shape() != want {
                            return Err(self.backend_err(format!("output {i} shape {:?}, expected {want:?}", view.shape())));
                        }
                        view.iter().copied().collect()
                    }
                    HeadLayout::AnchorFree => {
                        let want = [1, 4 + c, gh as usize, gw as usize];
                        if view.shape() != want {
                            return Err(self.backend_err(format!("output {i} shape {:?}, expected {want:?}", view.shape())));
                        }
                        // channel-first → [gy][gx][channel]
                        let v = view.into_shape_with_order((4 + c, gh as usize, gw as usize)).map_err(|e| self.backend_err(e.to_string()))?;
                        v.permuted_axes([1, 2, 0]).iter().copied().collect()
                    }
                };
                grids.push(HeadGrid {
                    stride,
                    grid_w: gw,
                    grid_h: gh,
                    anchors: d.anchors.get(i).map_or_else(Vec::new, |a| a.iter().map(|p| (p[0], p[1])).collect()),
                    data,
                });
            }
            Ok(BackendOutput::Raw(RawHeadOutput {
                layout: d.layout,
                input_size: self.caps.input_size,
                grids,
            }))
        }
    }
}
