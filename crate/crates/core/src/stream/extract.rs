use std::path::Path;

use crate::annotations::{ClassTable, DatasetManifest, ManifestEntry};

use super::source::open_source;
use super::{FrameSource, StreamError};

/// Frame indices `round(k · interval · fps)` below `frame_count`, strictly
/// increasing.
pub fn extraction_indices(frame_count: u64, fps: f64, interval_s: f64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut k = 0u64;
    loop {
        let idx = (k as f64 * interval_s * fps).round() as u64;
        k += 1;
        if idx >= frame_count {
            return out;
        }
        if out.last().is_none_or(|&last| idx > last) {
            out.push(idx);
        }
    }
}

/// Writes every `interval_s`-th second of `source` as `<source>_<index>.png`
/// and returns an unlabelled manifest (label paths point at the sibling
/// `.txt` files an annotator will create).
pub fn extract_from_source(
    source: &mut dyn FrameSource,
    interval_s: f64,
    out_dir: &Path,
    classes: &ClassTable,
) -> Result<DatasetManifest, StreamError> {
    if !(interval_s > 0.0 && interval_s.is_finite()) {
        return Err(StreamError::InvalidInterval(interval_s));
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| StreamError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let step = interval_s * source.fps();
    let mut entries = Vec::new();
    let mut k = 0u64;
    let mut next_target = 0u64;
    let mut index = 0u64;
    loop {
        if index == next_target {
            let Some(frame) = source.next_frame()? else { break };
            let img = frame
                .data
                .decode()
                .map_err(|e| StreamError::Source(format!("frame {index}: {e}")))?;
            let stem = format!("{}_{}", source.source_id(), frame.frame_index);
            let image_path = out_dir.join(format!("{stem}.png"));
            img.save(&image_path)
                .map_err(|e| StreamError::Source(format!("{}: {e}", image_path.display())))?;
            entries.push(ManifestEntry {
                image_id: stem.clone(),
                label_path: out_dir.join(format!("{stem}.txt")),
                image_path,
                width: img.width(),
                height: img.height(),
            });
            while next_target <= index {
                k += 1;
                next_target = (k as f64 * step).round() as u64;
            }
        } else if !source.skip_frame()? {
            break;
        }
        index += 1;
    }
    Ok(DatasetManifest {
        entries,
        classes: classes.clone(),
    })
}

/// Opens `video` (frame directory or ffmpeg-decodable input) and extracts
/// frames from it.
pub fn extract_frames(
    video: &Path,
    interval_s: f64,
    out_dir: &Path,
    fps: Option<f64>,
    classes: &ClassTable,
) -> Result<DatasetManifest, StreamError> {
    if !(interval_s > 0.0 && interval_s.is_finite()) {
        return Err(StreamError::InvalidInterval(interval_s));
    }
    let mut source = open_source(video, fps)?;
    extract_from_source(source.as_mut(), interval_s, out_dir, classes)
}
