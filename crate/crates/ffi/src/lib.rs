//! C ABI over the box geometry, NMS and evaluation routines.
//!
//! Every function returns an [`AquanetStatus`]; on failure a description is
//! available from [`aquanet_last_error_message`] on the same thread.
//! Evaluators are opaque handles released with [`aquanet_evaluator_free`];
//! strings returned by the library are released with [`aquanet_string_free`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use aquanet::annotations::{ClassTable, GroundTruthRecord, GroundTruthSet};
use aquanet::decode::{nms_indices, Detection};
use aquanet::geometry::{ImageSize, PixelBox};
use aquanet::metrics::{evaluate, match_detections, mean_average_precision, operating_point, EvalConfig, Predictions};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AquanetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownImage = 3,
    BufferTooSmall = 4,
    Internal = 5,
}

/// Pixel-corner box.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AquanetBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AquanetDetection {
    pub class_id: u32,
    pub confidence: f64,
    pub bbox: AquanetBox,
}

/// Micro-averaged operating point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AquanetOperatingPoint {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_count: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

fn fail(status: AquanetStatus, msg: impl Into<String>) -> AquanetStatus {
    set_error(msg);
    status
}

fn guarded(f: impl FnOnce() -> AquanetStatus) -> AquanetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == AquanetStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(AquanetStatus::Internal, "internal panic"),
    }
}

fn to_pixel(b: &AquanetBox) -> Result<PixelBox, AquanetStatus> {
    PixelBox::new(b.x1, b.y1, b.x2, b.y2).map_err(|e| fail(AquanetStatus::InvalidArgument, e.to_string()))
}

fn to_detection(d: &AquanetDetection) -> Result<Detection, AquanetStatus> {
    if !(0.0..=1.0).contains(&d.confidence) {
        return Err(fail(AquanetStatus::InvalidArgument, format!("confidence {} outside [0, 1]", d.confidence)));
    }
    Ok(Detection {
        class_id: d.class_id,
        confidence: d.confidence,
        bbox: to_pixel(&d.bbox)?,
    })
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, AquanetStatus> {
    if p.is_null() {
        return Err(fail(AquanetStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(AquanetStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(AquanetStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

/// Message for the most recent failed call on this thread; empty after a
/// successful call. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn aquanet_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Intersection over union of two pixel-corner boxes.
///
/// # Safety
/// `a`, `b` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn aquanet_iou(a: *const AquanetBox, b: *const AquanetBox, out: *mut f64) -> AquanetStatus {
    guarded(|| {
        non_null!(a, b, out);
        let a = tri!(to_pixel(&*a));
        let b = tri!(to_pixel(&*b));
        *out = a.iou(&b);
        AquanetStatus::Ok
    })
}

/// Per-class greedy NMS. Writes indices of kept detections, highest
/// confidence first, to `keep` and their number to `keep_len`. When
/// `keep_capacity` is too small, `keep_len` receives the required size and
/// `BufferTooSmall` is returned.
///
/// # Safety
/// `detections` must point to `count` values (may be null when `count` is
/// 0); `keep` must have room for `keep_capacity` values.
#[no_mangle]
pub unsafe extern "C" fn aquanet_nms(
    detections: *const AquanetDetection,
    count: usize,
    iou_threshold: f64,
    keep: *mut usize,
    keep_capacity: usize,
    keep_len: *mut usize,
) -> AquanetStatus {
    guarded(|| {
        non_null!(keep_len);
        if count > 0 && detections.is_null() {
            return fail(AquanetStatus::NullPointer, "detections is null");
        }
        if !(0.0..=1.0).contains(&iou_threshold) {
            return fail(AquanetStatus::InvalidArgument, format!("iou threshold {iou_threshold} outside [0, 1]"));
        }
        let raw = if count == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(detections, count)
        };
        let dets: Vec<Detection> = tri!(raw.iter().map(to_detection).collect());
        let kept = nms_indices(&dets, iou_threshold);
        *keep_len = kept.len();
        if kept.len() > keep_capacity {
            return fail(AquanetStatus::BufferTooSmall, format!("need room for {} indices", kept.len()));
        }
        if !kept.is_empty() {
            non_null!(keep);
            std::ptr::copy_nonoverlapping(kept.as_ptr(), keep, kept.len());
        }
        AquanetStatus::Ok
    })
}

/// Accumulates ground truth and detections for scoring.
pub struct AquanetEvaluator {
    classes: ClassTable,
    images: BTreeMap<String, (ImageSize, Vec<GroundTruthRecord>)>,
    predictions: Predictions,
}

impl AquanetEvaluator {
    fn ground_truth(&self) -> GroundTruthSet {
        let mut gts = GroundTruthSet::new(self.classes.clone());
        for (id, (size, records)) in &self.images {
            gts.insert(id.clone(), *size, records.clone());
        }
        gts
    }

    fn predictions(&self) -> Predictions {
        let mut p: Predictions = self.images.keys().map(|k| (k.clone(), Vec::new())).collect();
        for (k, v) in &self.predictions {
            p.insert(k.clone(), v.clone());
        }
        p
    }
}

/// New evaluator over the plant / hole / plastic class table. Never null.
#[no_mangle]
pub extern "C" fn aquanet_evaluator_new() -> *mut AquanetEvaluator {
    Box::into_raw(Box::new(AquanetEvaluator {
        classes: ClassTable::net_defects(),
        images: BTreeMap::new(),
        predictions: Predictions::new(),
    }))
}

/// # Safety
/// `ev` must come from [`aquanet_evaluator_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn aquanet_evaluator_free(ev: *mut AquanetEvaluator) {
    if !ev.is_null() {
        drop(Box::from_raw(ev));
    }
}

/// Registers an image. Re-registering keeps existing ground truth only if
/// the size is unchanged.
///
/// # Safety
/// `ev` must be a live evaluator and `image_id` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn aquanet_evaluator_add_image(
    ev: *mut AquanetEvaluator,
    image_id: *const c_char,
    width: u32,
    height: u32,
) -> AquanetStatus {
    guarded(|| {
        non_null!(ev);
        let ev = &mut *ev;
        let id = tri!(str_arg(image_id, "image_id"));
        let size = tri!(ImageSize::new(width, height)
            .validate()
            .map_err(|e| fail(AquanetStatus::InvalidArgument, e.to_string())));
        match ev.images.get_mut(id) {
            Some((s, _)) if *s == size => {}
            Some(entry) => *entry = (size, Vec::new()),
            None => {
                ev.images.insert(id.to_string(), (size, Vec::new()));
            }
        }
        AquanetStatus::Ok
    })
}

/// Adds a ground-truth box in source pixels to a registered image.
///
/// # Safety
/// `ev` must be a live evaluator, `image_id` a NUL-terminated string and
/// `bbox` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aquanet_evaluator_add_ground_truth(
    ev: *mut AquanetEvaluator,
    image_id: *const c_char,
    class_id: u32,
    bbox: *const AquanetBox,
) -> AquanetStatus {
    guarded(|| {
        non_null!(ev, bbox);
        let ev = &mut *ev;
        let id = tri!(str_arg(image_id, "image_id"));
        let Some(class) = ev.classes.get(class_id).cloned() else {
            return fail(AquanetStatus::InvalidArgument, format!("unknown class id {class_id}"));
        };
        let pb = tri!(to_pixel(&*bbox));
        let Some((size, records)) = ev.images.get_mut(id) else {
            return fail(AquanetStatus::UnknownImage, format!("image {id:?} not registered"));
        };
        let nb = tri!(pb
            .clamp_to(size.width as f64, size.height as f64)
            .to_normalized(*size)
            .map_err(|e| fail(AquanetStatus::InvalidArgument, e.to_string())));
        records.push(GroundTruthRecord {
            image_id: id.to_string(),
            class,
            bbox: nb,
        });
        AquanetStatus::Ok
    })
}

/// Adds a detection in source pixels to a registered image.
///
/// # Safety
/// `ev` must be a live evaluator, `image_id` a NUL-terminated string and
/// `detection` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aquanet_evaluator_add_detection(
    ev: *mut AquanetEvaluator,
    image_id: *const c_char,
    detection: *const AquanetDetection,
) -> AquanetStatus {
    guarded(|| {
        non_null!(ev, detection);
        let ev = &mut *ev;
        let id = tri!(str_arg(image_id, "image_id"));
        if !ev.images.contains_key(id) {
            return fail(AquanetStatus::UnknownImage, format!("image {id:?} not registered"));
        }
        let d = tri!(to_detection(&*detection));
        if ev.classes.get(d.class_id).is_none() {
            return fail(AquanetStatus::InvalidArgument, format!("unknown class id {}", d.class_id));
        }
        ev.predictions.entry(id.to_string()).or_default().push(d);
        AquanetStatus::Ok
    })
}

fn check_unit(v: f64, what: &str) -> Result<(), AquanetStatus> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(fail(AquanetStatus::InvalidArgument, format!("{what} {v} outside [0, 1]")))
    }
}

/// Micro precision / recall / F1 at confidence `tau` (inclusive).
///
/// # Safety
/// `ev` must be a live evaluator and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aquanet_evaluator_operating_point(
    ev: *const AquanetEvaluator,
    tau: f64,
    match_iou: f64,
    out: *mut AquanetOperatingPoint,
) -> AquanetStatus {
    guarded(|| {
        non_null!(ev, out);
        tri!(check_unit(tau, "tau"));
        tri!(check_unit(match_iou, "match iou"));
        let ev = &*ev;
        let m = tri!(match_detections(&ev.predictions(), &ev.ground_truth(), match_iou)
            .map_err(|e| fail(AquanetStatus::InvalidArgument, e.to_string())));
        let op = operating_point(&m, tau);
        *out = AquanetOperatingPoint {
            precision: op.micro.precision,
            recall: op.micro.recall,
            f1: op.micro.f1,
            tp: op.micro_counts.tp as u64,
            fp: op.micro_counts.fp as u64,
            fn_count: op.micro_counts.fn_ as u64,
        };
        AquanetStatus::Ok
    })
}

/// Mean all-point AP over classes with ground truth; NaN when no class
/// has any.
///
/// # Safety
/// `ev` must be a live evaluator and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aquanet_evaluator_map(ev: *const AquanetEvaluator, match_iou: f64, out: *mut f64) -> AquanetStatus {
    guarded(|| {
        non_null!(ev, out);
        tri!(check_unit(match_iou, "match iou"));
        let ev = &*ev;
        let m = tri!(match_detections(&ev.predictions(), &ev.ground_truth(), match_iou)
            .map_err(|e| fail(AquanetStatus::InvalidArgument, e.to_string())));
        *out = mean_average_precision(&m).unwrap_or(f64::NAN);
        AquanetStatus::Ok
    })
}

/// Full detector report as JSON. Release `*out` with
/// [`aquanet_string_free`].
///
/// # Safety
/// `ev` must be a live evaluator, `model` a NUL-terminated string and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aquanet_evaluator_report_json(
    ev: *const AquanetEvaluator,
    model: *const c_char,
    tau: f64,
    match_iou: f64,
    out: *mut *mut c_char,
) -> AquanetStatus {
    guarded(|| {
        non_null!(ev, out);
        let model = tri!(str_arg(model, "model"));
        tri!(check_unit(tau, "tau"));
        tri!(check_unit(match_iou, "match iou"));
        let ev = &*ev;
        let cfg = EvalConfig {
            match_iou,
            confidence_threshold: tau,
            ..EvalConfig::default()
        };
        let report = tri!(evaluate(model, &ev.predictions(), &ev.ground_truth(), &cfg)
            .map_err(|e| fail(AquanetStatus::InvalidArgument, e.to_string())));
        let json = match serde_json::to_string(&report) {
            Ok(j) => j,
            Err(e) => return fail(AquanetStatus::Internal, e.to_string()),
        };
        *out = CString::new(json).unwrap_or_default().into_raw();
        AquanetStatus::Ok
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn aquanet_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
