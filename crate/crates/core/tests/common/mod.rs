#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread::JoinHandle;

use aquanet::annotations::{ClassTable, DatasetManifest, GroundTruthRecord, ManifestEntry};
use aquanet::geometry::NormalizedBox;
use aquanet::stream::DetectionEvent;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FULL_HD: (u32, u32) = (1920, 1080);

/// Up to six boxes per image, one per cell of a 3×2 grid, so no two boxes
/// overlap and NMS never removes a ground-truth-aligned detection.
pub fn random_labels(rng: &mut ChaCha8Rng, image_id: &str, classes: &ClassTable) -> Vec<GroundTruthRecord> {
    let mut cells: Vec<usize> = (0..6).collect();
    let k = rng.random_range(1..=6);
    for i in 0..k {
        let j = rng.random_range(i..6);
        cells.swap(i, j);
    }
    cells[..k]
        .iter()
        .map(|&c| {
            let (cw, ch) = (1.0 / 3.0, 0.5);
            let (x0, y0) = ((c % 3) as f64 * cw, (c / 3) as f64 * ch);
            let w = cw * rng.random_range(0.3..0.9);
            let h = ch * rng.random_range(0.3..0.9);
            let cx = x0 + w / 2.0 + rng.random_range(0.0..(cw - w));
            let cy = y0 + h / 2.0 + rng.random_range(0.0..(ch - h));
            GroundTruthRecord {
                image_id: image_id.to_string(),
                class: classes.at(rng.random_range(0..classes.len())).unwrap().clone(),
                bbox: NormalizedBox::new(cx, cy, w, h).unwrap(),
            }
        })
        .collect()
}

/// Writes `n` label files plus `manifest.json` into `dir`. Images are not
/// written; see [`write_images`].
pub fn write_dataset(dir: &Path, n: usize, size: (u32, u32), seed: u64) -> PathBuf {
    let ids: Vec<String> = (0..n).map(|i| format!("net_{i:04}")).collect();
    write_labelled(dir, &ids, size, seed)
}

/// Random non-overlapping labels for the given ids, and a manifest pointing
/// at `<id>.png` / `<id>.txt` next to it.
pub fn write_labelled(dir: &Path, ids: &[String], size: (u32, u32), seed: u64) -> PathBuf {
    let classes = ClassTable::net_defects();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(ids.len());
    for id in ids {
        let labels = random_labels(&mut rng, id, &classes);
        std::fs::write(dir.join(format!("{id}.txt")), aquanet::annotations::serialize_label_file(&labels)).unwrap();
        entries.push(ManifestEntry {
            image_id: id.clone(),
            image_path: format!("{id}.png").into(),
            label_path: format!("{id}.txt").into(),
            width: size.0,
            height: size.1,
        });
    }
    let manifest = DatasetManifest::new(entries, classes).unwrap();
    let path = dir.join("manifest.json");
    std::fs::write(&path, manifest.to_json()).unwrap();
    path
}

pub fn solid_image(w: u32, h: u32, shade: u8) -> RgbImage {
    RgbImage::from_pixel(w, h, Rgb([20, 60u8.wrapping_add(shade), 90]))
}

pub fn write_images(dir: &Path, ids: &[String], size: (u32, u32)) {
    for (i, id) in ids.iter().enumerate() {
        solid_image(size.0, size.1, i as u8).save(dir.join(format!("{id}.png"))).unwrap();
    }
}

/// `count` small PNG frames named `<prefix>_<index>.png` plus `frames.json`.
pub fn write_frame_dir(dir: &Path, prefix: &str, count: usize, fps: f64, size: (u32, u32)) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        solid_image(size.0, size.1, i as u8).save(dir.join(format!("{prefix}_{i}.png"))).unwrap();
    }
    std::fs::write(dir.join("frames.json"), format!(r#"{{"fps": {fps}, "source_id": "{prefix}"}}"#)).unwrap();
}

pub fn write_stub_config(path: &Path, manifest: &Path, miss_rate: f64, fp_rate: f64, jitter: f64, seed: u64, model: &str) {
    let v = serde_json::json!({
        "ground_truth_source": manifest,
        "base_confidence": 0.9,
        "miss_rate": miss_rate,
        "false_positive_rate": fp_rate,
        "jitter": jitter,
        "seed": seed,
        "model": model,
    });
    std::fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

pub fn aquanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aquanet"))
        .args(args)
        .env_remove("AQUANET_CONFIG")
        .output()
        .expect("run aquanet")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Reads LF-delimited events until the server closes the connection.
pub fn spawn_reader(stream: TcpStream) -> JoinHandle<Vec<DetectionEvent>> {
    std::thread::spawn(move || {
        BufReader::new(stream)
            .lines()
            .map(|l| serde_json::from_str(&l.expect("utf-8 line")).expect("event json"))
            .collect()
    })
}
