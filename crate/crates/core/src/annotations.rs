//! YOLO TXT labels, dataset manifests and train/test splitting.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ImageSize, NormalizedBox, PixelBox};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabelError {
    #[error("{image_id}: line {line}: {reason}")]
    Parse {
        image_id: String,
        line: usize,
        reason: String,
    },
    #[error("{image_id}: line {line}: unknown class id {class_id}")]
    UnknownClass {
        image_id: String,
        line: usize,
        class_id: u32,
    },
}

impl LabelError {
    pub fn line(&self) -> usize {
        match self {
            LabelError::Parse { line, .. } | LabelError::UnknownClass { line, .. } => *line,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split ratio {0} outside (0, 1)")]
    InvalidRatio(f64),
    #[error("duplicate image id {0:?}")]
    DuplicateImage(String),
    #[error("invalid class table: {0}")]
    ClassTable(String),
    #[error("image {image_id:?} has invalid size {size}")]
    InvalidSize { image_id: String, size: ImageSize },
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassId {
    pub id: u32,
    pub name: String,
}

/// Bijective id ↔ name mapping of detection classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassId>", into = "Vec<ClassId>")]
pub struct ClassTable {
    classes: Vec<ClassId>,
}

impl ClassTable {
    pub fn new(classes: Vec<ClassId>) -> Result<Self, DatasetError> {
        let mut ids = HashSet::new();
        let mut names = HashSet::new();
        for c in &classes {
            if !ids.insert(c.id) {
                return Err(DatasetError::ClassTable(format!("duplicate id {}", c.id)));
            }
            if !names.insert(c.name.as_str()) {
                return Err(DatasetError::ClassTable(format!("duplicate name {:?}", c.name)));
            }
        }
        let mut classes = classes;
        classes.sort_by_key(|c| c.id);
        Ok(Self { classes })
    }

    /// plant / hole / plastic as ids 0 / 1 / 2.
    pub fn net_defects() -> Self {
        let classes = ["plant", "hole", "plastic"]
            .iter()
            .enumerate()
            .map(|(i, n)| ClassId {
                id: i as u32,
                name: (*n).to_string(),
            })
            .collect();
        Self { classes }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassId> {
        self.classes.iter()
    }

    pub fn get(&self, id: u32) -> Option<&ClassId> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.get(id).map(|c| c.name.as_str())
    }

    pub fn by_name(&self, name: &str) -> Option<&ClassId> {
        self.classes.iter().find(|c| c.name == name)
    }

    /// Class at position `index` in id order; detector heads emit scores in
    /// this order.
    pub fn at(&self, index: usize) -> Option<&ClassId> {
        self.classes.get(index)
    }

    pub fn ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.id).collect()
    }
}

impl Default for ClassTable {
    fn default() -> Self {
        Self::net_defects()
    }
}

impl TryFrom<Vec<ClassId>> for ClassTable {
    type Error = DatasetError;

    fn try_from(v: Vec<ClassId>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ClassTable> for Vec<ClassId> {
    fn from(t: ClassTable) -> Self {
        t.classes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub image_id: String,
    pub class: ClassId,
    pub bbox: NormalizedBox,
}

impl GroundTruthRecord {
    pub fn pixel_box(&self, image: ImageSize) -> PixelBox {
        // image sizes are validated when the manifest is loaded
        self.bbox
            .to_pixel(image)
            .unwrap_or(PixelBox { x1: 0.0, y1: 0.0, x2: 0.0, y2: 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

/// Records parsed from one label file plus any lines skipped in lenient mode.
#[derive(Debug, Default)]
pub struct ParsedLabels {
    pub records: Vec<GroundTruthRecord>,
    pub skipped: Vec<LabelError>,
}

fn parse_line(
    line: &str,
    line_no: usize,
    image_id: &str,
    classes: &ClassTable,
) -> Result<GroundTruthRecord, LabelError> {
    let err = |reason: String| LabelError::Parse {
        image_id: image_id.to_string(),
        line: line_no,
        reason,
    };
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(err(format!("expected 5 fields, found {}", fields.len())));
    }
    let class_id: u32 = fields[0]
        .parse()
        .map_err(|_| err(format!("class id {:?} is not a non-negative integer", fields[0])))?;
    let mut coords = [0f64; 4];
    for (slot, (name, text)) in coords
        .iter_mut()
        .zip(["cx", "cy", "w", "h"].iter().zip(&fields[1..]))
    {
        let v: f64 = text
            .parse()
            .map_err(|_| err(format!("{name} {text:?} is not a number")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(err(format!("{name} = {v} outside [0, 1]")));
        }
        *slot = v;
    }
    let class = classes.get(class_id).cloned().ok_or(LabelError::UnknownClass {
        image_id: image_id.to_string(),
        line: line_no,
        class_id,
    })?;
    Ok(GroundTruthRecord {
        image_id: image_id.to_string(),
        class,
        bbox: NormalizedBox {
            cx: coords[0],
            cy: coords[1],
            w: coords[2],
            h: coords[3],
        },
    })
}

/// Parses a YOLO TXT label file; the first malformed line aborts the parse.
pub fn parse_label_file(
    text: &str,
    image_id: &str,
    classes: &ClassTable,
) -> Result<Vec<GroundTruthRecord>, LabelError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1, image_id, classes))
        .collect()
}

/// Like [`parse_label_file`] but skips malformed lines and reports them.
pub fn parse_label_file_lenient(text: &str, image_id: &str, classes: &ClassTable) -> ParsedLabels {
    let mut out = ParsedLabels::default();
    for (i, l) in text.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        match parse_line(l, i + 1, image_id, classes) {
            Ok(r) => out.records.push(r),
            Err(e) => out.skipped.push(e),
        }
    }
    out
}

pub fn parse_labels(
    text: &str,
    image_id: &str,
    classes: &ClassTable,
    mode: ParseMode,
) -> Result<ParsedLabels, LabelError> {
    match mode {
        ParseMode::Strict => Ok(ParsedLabels {
            records: parse_label_file(text, image_id, classes)?,
            skipped: Vec::new(),
        }),
        ParseMode::Lenient => Ok(parse_label_file_lenient(text, image_id, classes)),
    }
}

pub fn serialize_label_file(records: &[GroundTruthRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let b = &r.bbox;
        let _ = writeln!(out, "{} {:.6} {:.6} {:.6} {:.6}", r.class.id, b.cx, b.cy, b.w, b.h);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub width: u32,
    pub height: u32,
}

impl ManifestEntry {
    pub fn size(&self) -> ImageSize {
        ImageSize::new(self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub classes: ClassTable,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, classes: ClassTable) -> Result<Self, DatasetError> {
        let m = Self { entries, classes };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(DatasetError::DuplicateImage(e.image_id.clone()));
            }
            if e.size().validate().is_err() {
                return Err(DatasetError::InvalidSize {
                    image_id: e.image_id.clone(),
                    size: e.size(),
                });
            }
        }
        Ok(())
    }

    pub fn entry(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.image_id.clone()).collect()
    }

    /// Loads a manifest JSON; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if let Some(base) = path.parent() {
            for e in &mut m.entries {
                if e.image_path.is_relative() {
                    e.image_path = base.join(&e.image_path);
                }
                if e.label_path.is_relative() {
                    e.label_path = base.join(&e.label_path);
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Reads and parses every label file. Missing files are an error in
    /// strict mode and an empty label set in lenient mode.
    pub fn load_ground_truth(&self, mode: ParseMode) -> Result<GroundTruthSet, DatasetError> {
        let mut images = BTreeMap::new();
        let mut skipped = Vec::new();
        for e in &self.entries {
            let text = match std::fs::read_to_string(&e.label_path) {
                Ok(t) => t,
                Err(err) if mode == ParseMode::Lenient && err.kind() == std::io::ErrorKind::NotFound => {
                    log::warn!("{}: label file missing, treating as unannotated", e.label_path.display());
                    String::new()
                }
                Err(source) => {
                    return Err(DatasetError::Io {
                        path: e.label_path.clone(),
                        source,
                    })
                }
            };
            let parsed = parse_labels(&text, &e.image_id, &self.classes, mode)?;
            skipped.extend(parsed.skipped);
            images.insert(
                e.image_id.clone(),
                ImageAnnotations {
                    size: e.size(),
                    records: parsed.records,
                },
            );
        }
        for s in &skipped {
            log::warn!("skipped label line: {s}");
        }
        Ok(GroundTruthSet {
            classes: self.classes.clone(),
            images,
            skipped,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageAnnotations {
    pub size: ImageSize,
    pub records: Vec<GroundTruthRecord>,
}

/// Ground truth for a set of images keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct GroundTruthSet {
    pub classes: ClassTable,
    pub images: BTreeMap<String, ImageAnnotations>,
    pub skipped: Vec<LabelError>,
}

impl GroundTruthSet {
    pub fn new(classes: ClassTable) -> Self {
        Self {
            classes,
            images: BTreeMap::new(),
            skipped: Vec::new(),
        }
    }

    pub fn insert(&mut self, image_id: impl Into<String>, size: ImageSize, records: Vec<GroundTruthRecord>) {
        self.images.insert(image_id.into(), ImageAnnotations { size, records });
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageAnnotations> {
        self.images.get(image_id)
    }

    /// Keeps only the listed images.
    pub fn restrict_to(&self, ids: &[String]) -> GroundTruthSet {
        let keep: HashSet<&str> = ids.iter().map(String::as_str).collect();
        GroundTruthSet {
            classes: self.classes.clone(),
            images: self
                .images
                .iter()
                .filter(|(k, _)| keep.contains(k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            skipped: Vec::new(),
        }
    }

    pub fn total_objects(&self) -> usize {
        self.images.values().map(|a| a.records.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    #[default]
    Random,
    /// First `floor(ratio·N)` entries in manifest order train, rest test.
    Sequential,
}

impl std::str::FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(SplitMode::Random),
            "sequential" => Ok(SplitMode::Sequential),
            other => Err(format!("unknown split mode {other:?} (random|sequential)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub seed: u64,
    pub ratio: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitResult {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("split serializes");
        s.push('\n');
        s
    }
}

/// Number of training images for `n` entries; the epsilon absorbs
/// representation error such as `0.29 * 100 = 28.999…`.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

pub fn split_dataset(
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
    mode: SplitMode,
) -> Result<SplitResult, DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidRatio(ratio));
    }
    if manifest.entries.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let mut ids = manifest.ids();
    if mode == SplitMode::Random {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
    }
    let n_train = train_count(ids.len(), ratio);
    let test = ids.split_off(n_train);
    Ok(SplitResult {
        seed,
        ratio,
        train: ids,
        test,
    })
}
