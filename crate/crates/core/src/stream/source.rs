use std::io::{BufReader, Cursor, Read};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Stdio};
use std::sync::Arc;

use image::{ImageReader, RgbImage};
use serde::Deserialize;

use super::{FrameData, FramePacket, StreamError};

pub trait FrameSource: Send {
    fn source_id(&self) -> &str;

    fn fps(&self) -> f64;

    /// `Ok(None)` at end of stream.
    fn next_frame(&mut self) -> Result<Option<FramePacket>, StreamError>;

    /// Advances past one frame without producing it; `false` at end.
    fn skip_frame(&mut self) -> Result<bool, StreamError> {
        Ok(self.next_frame()?.is_some())
    }
}

impl<S: FrameSource + ?Sized> FrameSource for Box<S> {
    fn source_id(&self) -> &str {
        (**self).source_id()
    }

    fn fps(&self) -> f64 {
        (**self).fps()
    }

    fn next_frame(&mut self) -> Result<Option<FramePacket>, StreamError> {
        (**self).next_frame()
    }

    fn skip_frame(&mut self) -> Result<bool, StreamError> {
        (**self).skip_frame()
    }
}

pub(crate) fn timestamp_ms(frame_index: u64, fps: f64) -> u64 {
    (frame_index as f64 * 1000.0 / fps).round() as u64
}

/// Optional `frames.json` next to a frame directory.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct SourceMeta {
    pub fps: Option<f64>,
    pub source_id: Option<String>,
}

const META_FILE: &str = "frames.json";

/// PNG/JPEG image sequence, ordered by file name with numeric runs compared
/// as numbers. Image ids are file stems.
pub struct DirectorySource {
    source_id: String,
    fps: f64,
    files: Vec<PathBuf>,
    next: usize,
}

fn natural_key(name: &str) -> Vec<(String, u128)> {
    let mut parts = Vec::new();
    let mut text = String::new();
    let mut digits = String::new();
    for ch in name.chars() {
        if ch.is_ascii_digit() {
            digits.push(ch);
        } else {
            if !digits.is_empty() {
                parts.push((std::mem::take(&mut text), digits.parse().unwrap_or(u128::MAX)));
                digits.clear();
            }
            text.push(ch);
        }
    }
    parts.push((text, digits.parse().unwrap_or(0)));
    parts
}

impl DirectorySource {
    pub fn open(dir: &Path, fps: Option<f64>) -> Result<Self, StreamError> {
        let io = |source| StreamError::Io {
            path: dir.to_path_buf(),
            source,
        };
        let meta_path = dir.join(META_FILE);
        let meta: SourceMeta = if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(io)?;
            serde_json::from_str(&text).map_err(|e| StreamError::Source(format!("{}: {e}", meta_path.display())))?
        } else {
            SourceMeta::default()
        };
        let fps = fps
            .or(meta.fps)
            .ok_or_else(|| StreamError::Source(format!("{}: frame rate unknown (pass --fps or add {META_FILE})", dir.display())))?;
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(StreamError::Source(format!("invalid frame rate {fps}")));
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort_by_cached_key(|p| natural_key(&p.file_name().unwrap_or_default().to_string_lossy()));
        let source_id = meta.source_id.unwrap_or_else(|| {
            dir.file_name()
                .map_or_else(|| "source".into(), |n| n.to_string_lossy().into_owned())
        });
        Ok(Self {
            source_id,
            fps,
            files,
            next: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

impl FrameSource for DirectorySource {
    fn source_id(&self) -> &str {
        &self.source_id
    }

    fn fps(&self) -> f64 {
        self.fps
    }

    fn next_frame(&mut self) -> Result<Option<FramePacket>, StreamError> {
        let Some(path) = self.files.get(self.next).cloned() else {
            return Ok(None);
        };
        let index = self.next as u64;
        self.next += 1;
        let bytes = std::fs::read(&path).map_err(|source| StreamError::Io {
            path: path.clone(),
            source,
        })?;
        let (width, height) = ImageReader::new(Cursor::new(&bytes))
            .with_guessed_format()
            .ok()
            .and_then(|r| r.into_dimensions().ok())
            .ok_or_else(|| StreamError::Source(format!("{}: unreadable image header", path.display())))?;
        Ok(Some(FramePacket {
            frame_index: index,
            timestamp_ms: timestamp_ms(index, self.fps),
            source_id: self.source_id.clone(),
            image_id: path
                .file_stem()
                .map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
            width,
            height,
            data: FrameData::Encoded(Arc::new(bytes)),
        }))
    }

    fn skip_frame(&mut self) -> Result<bool, StreamError> {
        if self.next < self.files.len() {
            self.next += 1;
            Ok(true)
        } else {
            Ok(false)
        }
    }
}

/// Pre-decoded frames held in memory.
pub struct MemorySource {
    source_id: String,
    fps: f64,
    frames: std::vec::IntoIter<(String, Arc<RgbImage>)>,
    next_index: u64,
}

impl MemorySource {
    pub fn new(source_id: &str, fps: f64, frames: Vec<(String, Arc<RgbImage>)>) -> Self {
        Self {
            source_id: source_id.to_string(),
            fps,
            frames: frames.into_iter(),
            next_index: 0,
        }
    }

    /// `count` frames sharing one image, ids `<source>_<index>`.
    pub fn repeat(source_id: &str, fps: f64, image: RgbImage, count: usize) -> Self {
        let img = Arc::new(image);
        let frames = (0..count).map(|i| (format!("{source_id}_{i}"), Arc::clone(&img))).collect();
        Self::new(source_id, fps, frames)
    }
}

impl FrameSource for MemorySource {
    fn source_id(&self) -> &str {
        &self.source_id
    }

    fn fps(&self) -> f64 {
        self.fps
    }

    fn next_frame(&mut self) -> Result<Option<FramePacket>, StreamError> {
        Ok(self.frames.next().map(|(image_id, img)| {
            let index = self.next_index;
            self.next_index += 1;
            FramePacket {
                frame_index: index,
                timestamp_ms: timestamp_ms(index, self.fps),
                source_id: self.source_id.clone(),
                image_id,
                width: img.width(),
                height: img.height(),
                data: FrameData::Rgb(img),
            }
        }))
    }
}

/// Video file or network stream decoded by an external `ffmpeg` process
/// into raw RGB24 frames.
pub struct FfmpegSource {
    source_id: String,
    fps: f64,
    width: u32,
    height: u32,
    child: Child,
    stdout: BufReader<ChildStdout>,
    next_index: u64,
}

#[derive(Deserialize)]
struct ProbeOutput {
    streams: Vec<ProbeStream>,
}

#[derive(Deserialize)]
struct ProbeStream {
    width: u32,
    height: u32,
    r_frame_rate: String,
}

fn parse_rate(r: &str) -> Option<f64> {
    match r.split_once('/') {
        Some((n, d)) => {
            let (n, d): (f64, f64) = (n.parse().ok()?, d.parse().ok()?);
            (d != 0.0).then_some(n / d)
        }
        None => r.parse().ok(),
    }
}

impl FfmpegSource {
    pub fn open(input: &str, fps_override: Option<f64>) -> Result<Self, StreamError> {
        Self::open_with(input, fps_override, "ffmpeg", "ffprobe")
    }

    pub fn open_with(input: &str, fps_override: Option<f64>, ffmpeg: &str, ffprobe: &str) -> Result<Self, StreamError> {
        let src_err = |m: String| StreamError::Source(format!("{input}: {m}"));
        let probe = Command::new(ffprobe)
            .args(["-v", "error", "-select_streams", "v:0", "-show_entries", "stream=width,height,r_frame_rate", "-of", "json", input])
            .output()
            .map_err(|e| src_err(format!("cannot run {ffprobe}: {e}")))?;
        if !probe.status.success() {
            return Err(src_err(String::from_utf8_lossy(&probe.stderr).trim().to_string()));
        }
        let parsed: ProbeOutput = serde_json::from_slice(&probe.stdout).map_err(|e| src_err(e.to_string()))?;
        let stream = parsed.streams.first().ok_or_else(|| src_err("no video stream".into()))?;
        let fps = fps_override
            .or_else(|| parse_rate(&stream.r_frame_rate))
            .filter(|f| *f > 0.0)
            .ok_or_else(|| src_err(format!("unknown frame rate {:?}", stream.r_frame_rate)))?;
        let mut child = Command::new(ffmpeg)
            .args(["-v", "error", "-i", input, "-f", "rawvideo", "-pix_fmt", "rgb24", "-"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| src_err(format!("cannot run {ffmpeg}: {e}")))?;
        let stdout = child.stdout.take().ok_or_else(|| src_err("no decoder stdout".into()))?;
        let source_id = Path::new(input)
            .file_stem()
            .map_or_else(|| "stream".into(), |s| s.to_string_lossy().into_owned());
        Ok(Self {
            source_id,
            fps,
            width: stream.width,
            height: stream.height,
            child,
            stdout: BufReader::new(stdout),
            next_index: 0,
        })
    }

    fn read_raw(&mut self) -> Result<Option<Vec<u8>>, StreamError> {
        let mut buf = vec![0u8; self.width as usize * self.height as usize * 3];
        let mut filled = 0;
        while filled < buf.len() {
            match self.stdout.read(&mut buf[filled..]) {
                Ok(0) if filled == 0 => return Ok(None),
                Ok(0) => return Err(StreamError::Source("truncated frame from decoder".into())),
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(StreamError::Source(e.to_string())),
            }
        }
        Ok(Some(buf))
    }
}

impl FrameSource for FfmpegSource {
    fn source_id(&self) -> &str {
        &self.source_id
    }

    fn fps(&self) -> f64 {
        self.fps
    }

    fn next_frame(&mut self) -> Result<Option<FramePacket>, StreamError> {
        let Some(buf) = self.read_raw()? else {
            return Ok(None);
        };
        let img = RgbImage::from_raw(self.width, self.height, buf)
            .ok_or_else(|| StreamError::Source("frame size mismatch".into()))?;
        let index = self.next_index;
        self.next_index += 1;
        Ok(Some(FramePacket::from_rgb(
            &self.source_id,
            &format!("{}_{index}", self.source_id),
            index,
            timestamp_ms(index, self.fps),
            img,
        )))
    }

    fn skip_frame(&mut self) -> Result<bool, StreamError> {
        let skipped = self.read_raw()?.is_some();
        if skipped {
            self.next_index += 1;
        }
        Ok(skipped)
    }
}

impl Drop for FfmpegSource {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Frame directories are read directly; anything else goes through ffmpeg.
pub fn open_source(input: &Path, fps: Option<f64>) -> Result<Box<dyn FrameSource>, StreamError> {
    if input.is_dir() {
        Ok(Box::new(DirectorySource::open(input, fps)?))
    } else {
        Ok(Box::new(FfmpegSource::open(&input.to_string_lossy(), fps)?))
    }
}
