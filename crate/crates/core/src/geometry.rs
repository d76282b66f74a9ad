//! Bounding-box conventions, letterbox transforms and intersection-over-union.
//!
//! Two box conventions are in play: label files store boxes as
//! normalized centre/size fractions of the image, while detectors and
//! evaluation work in pixel corners. [`BoundingBox`] carries the convention
//! tag so mixed inputs are caught at runtime; the concrete [`NormalizedBox`]
//! and [`PixelBox`] types are used directly wherever the convention is known
//! statically.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box convention mismatch: {left:?} vs {right:?}")]
    ConventionMismatch { left: Convention, right: Convention },
    #[error("invalid image dimensions {width}x{height}")]
    InvalidDimension { width: f64, height: f64 },
    #[error("invalid box: {0}")]
    InvalidBox(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Convention {
    NormalizedCenter,
    PixelCorner,
}

/// Image dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub const fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn validate(self) -> Result<Self, GeometryError> {
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidDimension {
                width: self.width as f64,
                height: self.height as f64,
            });
        }
        Ok(self)
    }
}

impl std::fmt::Display for ImageSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Centre/size box with every term a fraction of the image dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormalizedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        for (name, v) in [("cx", cx), ("cy", cy), ("w", w), ("h", h)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(GeometryError::InvalidBox(format!(
                    "{name} = {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Corners in unit image space, clamped to `[0, 1]`.
    fn unit_corners(&self) -> (f64, f64, f64, f64) {
        (
            (self.cx - self.w / 2.0).clamp(0.0, 1.0),
            (self.cy - self.h / 2.0).clamp(0.0, 1.0),
            (self.cx + self.w / 2.0).clamp(0.0, 1.0),
            (self.cy + self.h / 2.0).clamp(0.0, 1.0),
        )
    }

    /// Converts to pixel corners, clamping any extent past the image edge.
    pub fn to_pixel(&self, image: ImageSize) -> Result<PixelBox, GeometryError> {
        let image = image.validate()?;
        let (x1, y1, x2, y2) = self.unit_corners();
        let (w, h) = (image.width as f64, image.height as f64);
        Ok(PixelBox {
            x1: x1 * w,
            y1: y1 * h,
            x2: x2 * w,
            y2: y2 * h,
        })
    }

    pub fn iou(&self, other: &NormalizedBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.unit_corners();
        let (bx1, by1, bx2, by2) = other.unit_corners();
        corner_iou((ax1, ay1, ax2, ay2), (bx1, by1, bx2, by2))
    }
}

/// Corner box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl PixelBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let b = Self { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidBox(format!("non-finite corner in {b:?}")));
        }
        if x1 > x2 || y1 > y2 {
            return Err(GeometryError::InvalidBox(format!("inverted corners in {b:?}")));
        }
        if x1 < 0.0 || y1 < 0.0 {
            return Err(GeometryError::InvalidBox(format!("negative corner in {b:?}")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> PixelBox {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        PixelBox {
            x1,
            y1,
            x2: self.x2.clamp(x1, width),
            y2: self.y2.clamp(y1, height),
        }
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        corner_iou(
            (self.x1, self.y1, self.x2, self.y2),
            (other.x1, other.y1, other.x2, other.y2),
        )
    }

    /// Converts to a normalized centre box after clamping to the image.
    pub fn to_normalized(&self, image: ImageSize) -> Result<NormalizedBox, GeometryError> {
        let image = image.validate()?;
        let (w, h) = (image.width as f64, image.height as f64);
        let c = self.clamp_to(w, h);
        Ok(NormalizedBox {
            cx: (c.x1 + c.x2) / 2.0 / w,
            cy: (c.y1 + c.y2) / 2.0 / h,
            w: c.width() / w,
            h: c.height() / h,
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

fn corner_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let area = |(x1, y1, x2, y2): (f64, f64, f64, f64)| (x2 - x1).max(0.0) * (y2 - y1).max(0.0);
    let iw = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let ih = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A box tagged with its coordinate convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BoundingBox {
    NormalizedCenter(NormalizedBox),
    PixelCorner(PixelBox),
}

impl BoundingBox {
    pub fn convention(&self) -> Convention {
        match self {
            BoundingBox::NormalizedCenter(_) => Convention::NormalizedCenter,
            BoundingBox::PixelCorner(_) => Convention::PixelCorner,
        }
    }

    pub fn to_pixel(&self, image: ImageSize) -> Result<PixelBox, GeometryError> {
        match self {
            BoundingBox::NormalizedCenter(b) => b.to_pixel(image),
            BoundingBox::PixelCorner(b) => {
                let image = image.validate()?;
                Ok(b.clamp_to(image.width as f64, image.height as f64))
            }
        }
    }

    pub fn to_normalized(&self, image: ImageSize) -> Result<NormalizedBox, GeometryError> {
        match self {
            BoundingBox::NormalizedCenter(b) => Ok(*b),
            BoundingBox::PixelCorner(b) => b.to_normalized(image),
        }
    }
}

/// Intersection over union of two boxes sharing a convention.
///
/// Zero-area pairs (union of zero) give 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64, GeometryError> {
    match (a, b) {
        (BoundingBox::PixelCorner(a), BoundingBox::PixelCorner(b)) => Ok(a.iou(b)),
        (BoundingBox::NormalizedCenter(a), BoundingBox::NormalizedCenter(b)) => Ok(a.iou(b)),
        _ => Err(GeometryError::ConventionMismatch {
            left: a.convention(),
            right: b.convention(),
        }),
    }
}

/// Aspect-preserving resize plus symmetric padding from a source frame into
/// a fixed detector input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub source_size: ImageSize,
    pub target_size: ImageSize,
}

impl LetterboxTransform {
    pub fn identity(size: ImageSize) -> Self {
        Self {
            scale: 1.0,
            pad_x: 0.0,
            pad_y: 0.0,
            source_size: size,
            target_size: size,
        }
    }

    /// Largest scale that fits `source` inside `target`, centred on whole
    /// pixel offsets.
    pub fn fit(source: ImageSize, target: ImageSize) -> Result<Self, GeometryError> {
        let source = source.validate()?;
        let target = target.validate()?;
        let (sw, sh) = (source.width as f64, source.height as f64);
        let scale = (target.width as f64 / sw).min(target.height as f64 / sh);
        let (rw, rh) = Self::scaled_dims(source, target, scale);
        Ok(Self {
            scale,
            pad_x: ((target.width - rw) / 2) as f64,
            pad_y: ((target.height - rh) / 2) as f64,
            source_size: source,
            target_size: target,
        })
    }

    fn scaled_dims(source: ImageSize, target: ImageSize, scale: f64) -> (u32, u32) {
        let rw = ((source.width as f64 * scale).round() as u32).clamp(1, target.width);
        let rh = ((source.height as f64 * scale).round() as u32).clamp(1, target.height);
        (rw, rh)
    }

    /// Size of the resized image content before padding.
    pub fn resized_size(&self) -> ImageSize {
        let (w, h) = Self::scaled_dims(self.source_size, self.target_size, self.scale);
        ImageSize::new(w, h)
    }

    /// Maps a source-space box into target (detector input) space.
    pub fn forward(&self, b: &PixelBox) -> PixelBox {
        PixelBox {
            x1: b.x1 * self.scale + self.pad_x,
            y1: b.y1 * self.scale + self.pad_y,
            x2: b.x2 * self.scale + self.pad_x,
            y2: b.y2 * self.scale + self.pad_y,
        }
        .clamp_to(self.target_size.width as f64, self.target_size.height as f64)
    }

    /// Maps a target-space box back to source pixels, clamped to the source.
    pub fn inverse(&self, b: &PixelBox) -> PixelBox {
        PixelBox {
            x1: (b.x1 - self.pad_x) / self.scale,
            y1: (b.y1 - self.pad_y) / self.scale,
            x2: (b.x2 - self.pad_x) / self.scale,
            y2: (b.y2 - self.pad_y) / self.scale,
        }
        .clamp_to(self.source_size.width as f64, self.source_size.height as f64)
    }
}

/// Maps a detector-input box back into source-frame pixels.
pub fn letterbox_map(b: &PixelBox, t: &LetterboxTransform) -> PixelBox {
    t.inverse(b)
}
