use std::sync::Arc;

use image::RgbImage;

use crate::geometry::ImageSize;

/// Pixel payload of a frame. Encoded frames are decoded lazily by the
/// detection workers so the reader thread stays cheap.
#[derive(Debug, Clone)]
pub enum FrameData {
    Rgb(Arc<RgbImage>),
    Encoded(Arc<Vec<u8>>),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("frame decode failed: {0}")]
pub struct FrameDecodeError(pub String);

impl FrameData {
    pub fn decode(&self) -> Result<Arc<RgbImage>, FrameDecodeError> {
        match self {
            FrameData::Rgb(img) => Ok(Arc::clone(img)),
            FrameData::Encoded(bytes) => image::load_from_memory(bytes)
                .map(|img| Arc::new(img.to_rgb8()))
                .map_err(|e| FrameDecodeError(e.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FramePacket {
    pub frame_index: u64,
    /// Milliseconds from stream start.
    pub timestamp_ms: u64,
    pub source_id: String,
    /// Dataset key of the frame; file stem for directory sources.
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub data: FrameData,
}

impl FramePacket {
    pub fn from_rgb(source_id: &str, image_id: &str, frame_index: u64, timestamp_ms: u64, img: RgbImage) -> Self {
        Self {
            frame_index,
            timestamp_ms,
            source_id: source_id.to_string(),
            image_id: image_id.to_string(),
            width: img.width(),
            height: img.height(),
            data: FrameData::Rgb(Arc::new(img)),
        }
    }

    pub fn size(&self) -> ImageSize {
        ImageSize::new(self.width, self.height)
    }
}
