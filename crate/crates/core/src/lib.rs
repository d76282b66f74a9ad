//! Detection post-processing, evaluation and live streaming for
//! underwater net-pen inspection footage.

pub mod annotations;
pub mod cli;
pub mod decode;
pub mod geometry;
pub mod inference;
pub mod metrics;
pub mod stream;

pub const DEFAULT_CONFIDENCE: f64 = 0.3;
pub const DEFAULT_NMS_IOU: f64 = inference::DEFAULT_NMS_IOU;
pub const DEFAULT_MATCH_IOU: f64 = metrics::DEFAULT_MATCH_IOU;
pub const DEFAULT_INTERVAL_S: f64 = 5.0;
pub const DEFAULT_SPLIT_RATIO: f64 = 0.9;
pub const DEFAULT_QUEUE_CAPACITY: usize = 4;
