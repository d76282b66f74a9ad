use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::Rgb;

use super::{DetectionEvent, EventSink, FramePacket};

/// Appends one JSON line per event.
pub struct JsonLinesSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLinesSink {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl EventSink for JsonLinesSink {
    fn name(&self) -> &str {
        "jsonl"
    }

    fn emit(&mut self, event: &DetectionEvent, _frame: &FramePacket) -> std::io::Result<()> {
        self.out.write_all(event.to_json_line().as_bytes())
    }

    fn finish(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

const PALETTE: [Rgb<u8>; 6] = [
    Rgb([0, 200, 0]),
    Rgb([230, 30, 30]),
    Rgb([30, 80, 240]),
    Rgb([240, 200, 0]),
    Rgb([200, 0, 200]),
    Rgb([0, 200, 200]),
];

/// Writes each frame as PNG with its boxes drawn, plus the event as a JSON
/// sidecar of the same stem.
pub struct AnnotatedFrameSink {
    dir: PathBuf,
    classes: Vec<String>,
}

impl AnnotatedFrameSink {
    pub fn create(dir: &Path, class_names: &[&str]) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            classes: class_names.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn colour(&self, class: &str) -> Rgb<u8> {
        let i = self.classes.iter().position(|c| c == class).unwrap_or(self.classes.len());
        PALETTE[i % PALETTE.len()]
    }
}

fn draw_rect(img: &mut image::RgbImage, b: [i64; 4], colour: Rgb<u8>, thickness: i64) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    if w == 0 || h == 0 {
        return;
    }
    let x1 = b[0].clamp(0, w - 1);
    let y1 = b[1].clamp(0, h - 1);
    let x2 = b[2].clamp(0, w - 1);
    let y2 = b[3].clamp(0, h - 1);
    for t in 0..thickness {
        for x in x1..=x2 {
            for y in [y1 + t, y2 - t] {
                if (0..h).contains(&y) {
                    img.put_pixel(x as u32, y as u32, colour);
                }
            }
        }
        for y in y1..=y2 {
            for x in [x1 + t, x2 - t] {
                if (0..w).contains(&x) {
                    img.put_pixel(x as u32, y as u32, colour);
                }
            }
        }
    }
}

impl EventSink for AnnotatedFrameSink {
    fn name(&self) -> &str {
        "annotated-frames"
    }

    fn emit(&mut self, event: &DetectionEvent, frame: &FramePacket) -> std::io::Result<()> {
        let mut img = frame
            .data
            .decode()
            .map_err(std::io::Error::other)?
            .as_ref()
            .clone();
        let thickness = (img.width().max(img.height()) as i64 / 320).max(1);
        for d in &event.detections {
            draw_rect(&mut img, d.bbox, self.colour(&d.class), thickness);
        }
        let stem = format!("{}_{:06}", event.source_id, event.frame_index);
        img.save(self.dir.join(format!("{stem}.png")))
            .map_err(std::io::Error::other)?;
        std::fs::write(self.dir.join(format!("{stem}.json")), event.to_json_line())
    }
}

/// Keeps every event in memory; the returned handle reads them.
pub struct CollectSink {
    events: Arc<Mutex<Vec<DetectionEvent>>>,
}

impl CollectSink {
    pub fn new() -> (Self, Arc<Mutex<Vec<DetectionEvent>>>) {
        let events = Arc::new(Mutex::new(Vec::new()));
        (
            Self {
                events: Arc::clone(&events),
            },
            events,
        )
    }
}

impl EventSink for CollectSink {
    fn name(&self) -> &str {
        "collect"
    }

    fn emit(&mut self, event: &DetectionEvent, _frame: &FramePacket) -> std::io::Result<()> {
        self.events.lock().unwrap().push(event.clone());
        Ok(())
    }
}
