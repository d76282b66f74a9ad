//! Frame sources, frame extraction and the real-time detection pipeline.

mod broadcast;
mod extract;
mod frame;
mod pipeline;
mod queue;
mod sinks;
mod source;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::ClassTable;
use crate::decode::Detection;

pub use broadcast::{broadcast_events, BroadcastConfig, BroadcastHandle, BroadcastSink};
pub use extract::{extract_frames, extract_from_source, extraction_indices};
pub use frame::{FrameData, FrameDecodeError, FramePacket};
pub use pipeline::{run_pipeline, Backpressure, EventSink, LiveStats, Pipeline, PipelineConfig, PipelineError};
pub use queue::{FrameQueue, PushOutcome};
pub use sinks::{AnnotatedFrameSink, CollectSink, JsonLinesSink};
pub use source::{open_source, DirectorySource, FfmpegSource, FrameSource, MemorySource, SourceMeta};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("frame interval {0} s must be > 0")]
    InvalidInterval(f64),
    #[error("source: {0}")]
    Source(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventDetection {
    pub class: String,
    /// Rounded to four decimals.
    pub confidence: f64,
    /// Pixel corners `[x1, y1, x2, y2]`.
    #[serde(rename = "box")]
    pub bbox: [i64; 4],
}

/// One processed frame as delivered to sinks and network clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub source_id: String,
    pub frame_index: u64,
    pub timestamp_ms: u64,
    pub latency_ms: u64,
    pub model: String,
    pub detections: Vec<EventDetection>,
}

impl DetectionEvent {
    /// `detections` must already be sorted by descending confidence.
    pub fn new(frame: &FramePacket, detections: &[Detection], classes: &ClassTable, model: &str, latency_ms: u64) -> Self {
        Self {
            source_id: frame.source_id.clone(),
            frame_index: frame.frame_index,
            timestamp_ms: frame.timestamp_ms,
            latency_ms,
            model: model.to_string(),
            detections: detections
                .iter()
                .map(|d| EventDetection {
                    class: classes
                        .name(d.class_id)
                        .map_or_else(|| d.class_id.to_string(), str::to_string),
                    confidence: (d.confidence * 1e4).round() / 1e4,
                    bbox: d.bbox.as_array().map(|v| v.round() as i64),
                })
                .collect(),
        }
    }

    /// One LF-terminated JSON object.
    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("event serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkFailure {
    pub sink: String,
    pub frame_index: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineStats {
    pub frames_in: u64,
    pub frames_processed: u64,
    /// Queue evictions only.
    pub frames_dropped: u64,
    /// Frames whose pixels could not be decoded.
    pub frames_failed: u64,
    pub in_flight: u64,
    pub achieved_fps: f64,
    pub elapsed_ms: u64,
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    pub latency_p99_ms: f64,
    pub sink_failures: Vec<SinkFailure>,
}

/// Nearest-rank percentile of integer samples; 0 for no samples.
pub fn latency_percentile(samples: &[u64], pct: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1] as f64
}
