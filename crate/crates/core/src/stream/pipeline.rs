use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::queue::{FrameQueue, PushOutcome};
use super::{latency_percentile, DetectionEvent, FramePacket, FrameSource, PipelineStats, SinkFailure, StreamError};
use crate::decode::Detection;
use crate::inference::{Detector, InferenceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backpressure {
    /// Evict the oldest queued frame when the queue is full.
    #[default]
    DropOldest,
    /// Stall the reader until a worker frees a slot.
    Block,
}

impl FromStr for Backpressure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "drop-oldest" | "drop_oldest" => Ok(Self::DropOldest),
            "block" => Ok(Self::Block),
            other => Err(format!("unknown backpressure policy {other:?} (expected drop-oldest or block)")),
        }
    }
}

impl std::fmt::Display for Backpressure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DropOldest => "drop-oldest",
            Self::Block => "block",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub queue_capacity: usize,
    pub backpressure: Backpressure,
    /// Ignored (forced to 1) for backends that are not thread-safe.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            queue_capacity: crate::DEFAULT_QUEUE_CAPACITY,
            backpressure: Backpressure::DropOldest,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get().min(4)),
        }
    }
}

pub trait EventSink: Send {
    fn name(&self) -> &str;

    fn emit(&mut self, event: &DetectionEvent, frame: &FramePacket) -> std::io::Result<()>;

    fn finish(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Counters readable while a pipeline runs.
#[derive(Debug, Default)]
pub struct LiveStats {
    frames_in: AtomicU64,
    frames_processed: AtomicU64,
    frames_dropped: AtomicU64,
    frames_failed: AtomicU64,
}

impl LiveStats {
    pub fn frames_in(&self) -> u64 {
        self.frames_in.load(Ordering::SeqCst)
    }

    pub fn frames_processed(&self) -> u64 {
        self.frames_processed.load(Ordering::SeqCst)
    }

    pub fn frames_dropped(&self) -> u64 {
        self.frames_dropped.load(Ordering::SeqCst)
    }

    pub fn frames_failed(&self) -> u64 {
        self.frames_failed.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("detector failed on frame {frame_index}: {source}")]
    Backend {
        frame_index: u64,
        #[source]
        source: InferenceError,
        stats: Box<PipelineStats>,
    },
    #[error("frame source failed: {source}")]
    Source {
        #[source]
        source: StreamError,
        stats: Box<PipelineStats>,
    },
}

impl PipelineError {
    /// Statistics up to the failure, if the pipeline started.
    pub fn stats(&self) -> Option<&PipelineStats> {
        match self {
            Self::Config(_) => None,
            Self::Backend { stats, .. } | Self::Source { stats, .. } => Some(stats),
        }
    }
}

type WorkItem = (FramePacket, Instant);
type WorkResult = (u64, FramePacket, Instant, Result<Vec<Detection>, InferenceError>);

pub struct Pipeline {
    config: PipelineConfig,
    live: Arc<LiveStats>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        if config.queue_capacity == 0 {
            return Err(PipelineError::Config("queue capacity must be at least 1".into()));
        }
        if config.workers == 0 {
            return Err(PipelineError::Config("worker count must be at least 1".into()));
        }
        Ok(Self {
            config,
            live: Arc::default(),
        })
    }

    pub fn live_stats(&self) -> Arc<LiveStats> {
        Arc::clone(&self.live)
    }

    /// Runs until the source is exhausted or the detector fails. Events
    /// reach every sink in frame order. A sink that errors is detached and
    /// the failure recorded; the pipeline keeps going.
    pub fn run(
        &self,
        source: &mut dyn FrameSource,
        detector: &Detector,
        mut sinks: Vec<Box<dyn EventSink>>,
    ) -> Result<PipelineStats, PipelineError> {
        let workers = if detector.capabilities().concurrent {
            self.config.workers
        } else {
            1
        };
        let queue: FrameQueue<WorkItem> = FrameQueue::new(self.config.queue_capacity, self.config.backpressure);
        let abort = AtomicBool::new(false);
        let source_error: Mutex<Option<StreamError>> = Mutex::new(None);
        let live = &*self.live;
        let classes = &detector.capabilities().classes;
        let model = detector.model().to_string();
        let started = Instant::now();

        let mut latencies: Vec<u64> = Vec::new();
        let mut sink_failures: Vec<SinkFailure> = Vec::new();
        let mut backend_error: Option<(u64, InferenceError)> = None;

        std::thread::scope(|scope| {
            let (tx, rx) = mpsc::sync_channel::<WorkResult>(workers * 2);

            scope.spawn(|| {
                while !abort.load(Ordering::SeqCst) {
                    match source.next_frame() {
                        Ok(Some(frame)) => {
                            live.frames_in.fetch_add(1, Ordering::SeqCst);
                            match queue.push((frame, Instant::now())) {
                                PushOutcome::Accepted => {}
                                PushOutcome::Evicted(_) => {
                                    live.frames_dropped.fetch_add(1, Ordering::SeqCst);
                                }
                                PushOutcome::Closed(_) => break,
                            }
                        }
                        Ok(None) => break,
                        Err(e) => {
                            log::error!("frame source failed: {e}");
                            *source_error.lock().unwrap() = Some(e);
                            break;
                        }
                    }
                }
                queue.close();
            });

            for _ in 0..workers {
                let tx = tx.clone();
                let queue = &queue;
                scope.spawn(move || {
                    while let Some((ticket, (frame, captured))) = queue.pop() {
                        let result = detector.detect(&frame);
                        let fatal = matches!(&result, Err(e) if !matches!(e, InferenceError::FrameDecode(_)));
                        if tx.send((ticket, frame, captured, result)).is_err() || fatal {
                            queue.abort();
                            break;
                        }
                    }
                });
            }
            drop(tx);

            let mut pending: BTreeMap<u64, WorkResult> = BTreeMap::new();
            let mut next_ticket = 0u64;
            for msg in rx {
                pending.insert(msg.0, msg);
                while let Some((_, frame, captured, result)) = pending.remove(&next_ticket) {
                    next_ticket += 1;
                    if backend_error.is_some() {
                        continue;
                    }
                    match result {
                        Ok(dets) => {
                            let latency = captured.elapsed().as_millis() as u64;
                            let event = DetectionEvent::new(&frame, &dets, classes, &model, latency);
                            latencies.push(latency);
                            sinks.retain_mut(|sink| match sink.emit(&event, &frame) {
                                Ok(()) => true,
                                Err(e) => {
                                    log::warn!("detaching sink {}: {e}", sink.name());
                                    sink_failures.push(SinkFailure {
                                        sink: sink.name().to_string(),
                                        frame_index: frame.frame_index,
                                        error: e.to_string(),
                                    });
                                    false
                                }
                            });
                            live.frames_processed.fetch_add(1, Ordering::SeqCst);
                        }
                        Err(InferenceError::FrameDecode(e)) => {
                            log::warn!("frame {}: {e}", frame.frame_index);
                            live.frames_failed.fetch_add(1, Ordering::SeqCst);
                        }
                        Err(e) => {
                            log::error!("detector failed on frame {}: {e}", frame.frame_index);
                            abort.store(true, Ordering::SeqCst);
                            queue.abort();
                            backend_error = Some((frame.frame_index, e));
                        }
                    }
                }
            }
        });

        for sink in &mut sinks {
            if let Err(e) = sink.finish() {
                sink_failures.push(SinkFailure {
                    sink: sink.name().to_string(),
                    frame_index: live.frames_in().saturating_sub(1),
                    error: e.to_string(),
                });
            }
        }

        let elapsed = started.elapsed();
        let processed = live.frames_processed();
        let stats = PipelineStats {
            frames_in: live.frames_in(),
            frames_processed: processed,
            frames_dropped: live.frames_dropped(),
            frames_failed: live.frames_failed(),
            in_flight: live.frames_in() - processed - live.frames_dropped() - live.frames_failed(),
            achieved_fps: if elapsed.as_secs_f64() > 0.0 {
                processed as f64 / elapsed.as_secs_f64()
            } else {
                0.0
            },
            elapsed_ms: elapsed.as_millis() as u64,
            latency_p50_ms: latency_percentile(&latencies, 50.0),
            latency_p95_ms: latency_percentile(&latencies, 95.0),
            latency_p99_ms: latency_percentile(&latencies, 99.0),
            sink_failures,
        };
        if let Some((frame_index, source)) = backend_error {
            return Err(PipelineError::Backend {
                frame_index,
                source,
                stats: Box::new(stats),
            });
        }
        if let Some(source) = source_error.into_inner().unwrap() {
            return Err(PipelineError::Source {
                source,
                stats: Box::new(stats),
            });
        }
        Ok(stats)
    }
}

pub fn run_pipeline(
    source: &mut dyn FrameSource,
    detector: &Detector,
    sinks: Vec<Box<dyn EventSink>>,
    config: PipelineConfig,
) -> Result<PipelineStats, PipelineError> {
    Pipeline::new(config)?.run(source, detector, sinks)
}
