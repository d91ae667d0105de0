//! C ABI over the dualscreen detector and crop classifier.
//!
//! Every entry point returns a [`DsStatus`]. On failure a message describing
//! the error can be read with [`ds_last_error`] on the same thread. Models are
//! handed out as opaque pointers and must be released with the matching
//! `*_free` function. Images cross the boundary as tightly packed RGB8
//! buffers, row-major, `height * width * 3` bytes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dualscreen::classifier::ClassifierModel;
use dualscreen::data::{Image, ImageRecord, ObjectClass};
use dualscreen::detector::{Detection, DetectorModel};
use dualscreen::eval::{screen_detections, CropClassifier, PipelineConfig};
use dualscreen::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    Shape = 6,
    Data = 7,
    Numeric = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

impl From<&Error> for DsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => DsStatus::Config,
            Error::InvalidArgument(_) => DsStatus::InvalidArgument,
            Error::Io { .. } | Error::Image { .. } | Error::MissingImage { .. } => DsStatus::Io,
            Error::Checkpoint(_) | Error::Json(_) => DsStatus::Checkpoint,
            Error::Shape { .. } => DsStatus::Shape,
            Error::Divergence { .. } => DsStatus::Numeric,
            Error::Parse { .. } | Error::Validation(_) => DsStatus::Data,
        }
    }
}

/// A trained object detector.
pub struct DsDetector {
    model: DetectorModel,
}

/// A trained crop classifier.
pub struct DsClassifier {
    model: ClassifierModel,
}

/// One detected object. Box corners are in pixels, `x_max`/`y_max` exclusive.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DsDetection {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    /// Index into the class list, see `ds_class_name`.
    pub class_id: u32,
    pub score: f64,
}

/// A detection together with the classifier's verdict on its crop.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DsScreenedDetection {
    pub detection: DsDetection,
    pub anomalous: bool,
    /// Probability of the anomalous class.
    pub anomaly_score: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsScreenConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// Detections scoring below this are not classified.
    pub screening_threshold: f64,
    /// Fraction of the box size added on every side before cropping.
    pub pad_fraction: f64,
}

impl From<&Detection> for DsDetection {
    fn from(d: &Detection) -> Self {
        Self {
            x_min: d.bbox.x_min,
            y_min: d.bbox.y_min,
            x_max: d.bbox.x_max,
            y_max: d.bbox.y_max,
            class_id: d.object_class.code() as u32,
            score: d.score,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(message));
}

fn fail(status: DsStatus, message: impl Into<String>) -> DsStatus {
    set_last_error(message.into());
    status
}

fn fail_with(e: &Error) -> DsStatus {
    fail(DsStatus::from(e), e.to_string())
}

/// Runs `f`, turning a panic into `DsStatus::Panic`.
fn guard(f: impl FnOnce() -> DsStatus) -> DsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(DsStatus::Panic, format!("panic: {message}"))
        }
    }
}

/// Message for the most recent failure on the calling thread, or NULL if
/// nothing has failed yet. The pointer stays valid until the next failing call
/// on this thread.
#[no_mangle]
pub extern "C" fn ds_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ds_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Number of object classes the detector knows.
#[no_mangle]
pub extern "C" fn ds_class_count() -> u32 {
    ObjectClass::COUNT as u32
}

/// Static name of class `class_id`, or NULL when out of range.
#[no_mangle]
pub extern "C" fn ds_class_name(class_id: u32) -> *const c_char {
    const NAMES: [&CStr; ObjectClass::COUNT] = [c"bottle", c"hairdryer", c"iron", c"toaster", c"mobile", c"laptop"];
    NAMES.get(class_id as usize).map_or(ptr::null(), |n| n.as_ptr())
}

/// Default thresholds of the screening pipeline.
#[no_mangle]
pub extern "C" fn ds_screen_config_default() -> DsScreenConfig {
    let d = PipelineConfig::default();
    DsScreenConfig {
        score_threshold: d.score_threshold,
        nms_threshold: d.nms_threshold,
        screening_threshold: d.screening_threshold,
        pad_fraction: d.pad_fraction,
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, DsStatus> {
    if path.is_null() {
        return Err(fail(DsStatus::NullPointer, "path is NULL"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(DsStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

unsafe fn image_arg(pixels: *const u8, width: u32, height: u32) -> Result<Image, DsStatus> {
    if pixels.is_null() {
        return Err(fail(DsStatus::NullPointer, "pixel buffer is NULL"));
    }
    if width == 0 || height == 0 {
        return Err(fail(DsStatus::InvalidArgument, format!("empty image {width}x{height}")));
    }
    let (w, h) = (width as usize, height as usize);
    let bytes = std::slice::from_raw_parts(pixels, h * w * 3);
    let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
    Image::new(h, w, data).map_err(|e| fail_with(&e))
}

fn record(image: Image) -> ImageRecord {
    ImageRecord {
        id: String::new(),
        image,
        annotations: Vec::new(),
    }
}

/// Copies as many items as fit and stores the total in `count`.
unsafe fn write_out<T: Copy>(items: &[T], out: *mut T, capacity: usize, count: *mut usize) -> DsStatus {
    *count = items.len();
    let n = items.len().min(capacity);
    if n > 0 {
        ptr::copy_nonoverlapping(items.as_ptr(), out, n);
    }
    if items.len() > capacity {
        return fail(
            DsStatus::BufferTooSmall,
            format!("{} results do not fit in a buffer of {capacity}", items.len()),
        );
    }
    DsStatus::Ok
}

fn unit(name: &str, v: f64) -> Result<(), DsStatus> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(fail(DsStatus::InvalidArgument, format!("{name} must lie in [0, 1], got {v}")))
    }
}

/// Loads a detector checkpoint. On success `*out` receives a handle that must
/// be released with `ds_detector_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_detector_load(path: *const c_char, out: *mut *mut DsDetector) -> DsStatus {
    guard(|| {
        if out.is_null() {
            return fail(DsStatus::NullPointer, "out is NULL");
        }
        *out = ptr::null_mut();
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match DetectorModel::load(path) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(DsDetector { model }));
                DsStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Releases a detector. NULL is ignored.
///
/// # Safety
/// `detector` must come from `ds_detector_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ds_detector_free(detector: *mut DsDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Detects objects in an RGB8 image. Detections come out in descending score
/// order. `*count` receives the total number found; when it exceeds
/// `capacity`, the first `capacity` are written and `DS_STATUS_BUFFER_TOO_SMALL`
/// is returned.
///
/// # Safety
/// `pixels` must hold `height * width * 3` bytes, `out` room for `capacity`
/// detections (may be NULL when `capacity` is 0) and `count` must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ds_detector_detect(
    detector: *const DsDetector,
    pixels: *const u8,
    width: u32,
    height: u32,
    score_threshold: f64,
    nms_threshold: f64,
    out: *mut DsDetection,
    capacity: usize,
    count: *mut usize,
) -> DsStatus {
    guard(|| {
        if detector.is_null() || count.is_null() || (out.is_null() && capacity > 0) {
            return fail(DsStatus::NullPointer, "detector, out or count is NULL");
        }
        if let Err(s) = unit("score_threshold", score_threshold).and(unit("nms_threshold", nms_threshold)) {
            return s;
        }
        let image = match image_arg(pixels, width, height) {
            Ok(i) => i,
            Err(s) => return s,
        };
        let dets: Vec<DsDetection> = (*detector)
            .model
            .detect(&record(image), score_threshold, nms_threshold)
            .iter()
            .map(DsDetection::from)
            .collect();
        write_out(&dets, out, capacity, count)
    })
}

/// Loads a classifier checkpoint. On success `*out` receives a handle that
/// must be released with `ds_classifier_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_classifier_load(path: *const c_char, out: *mut *mut DsClassifier) -> DsStatus {
    guard(|| {
        if out.is_null() {
            return fail(DsStatus::NullPointer, "out is NULL");
        }
        *out = ptr::null_mut();
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match ClassifierModel::load(path) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(DsClassifier { model }));
                DsStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Releases a classifier. NULL is ignored.
///
/// # Safety
/// `classifier` must come from `ds_classifier_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ds_classifier_free(classifier: *mut DsClassifier) {
    if !classifier.is_null() {
        drop(Box::from_raw(classifier));
    }
}

/// Patch size the classifier expects.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ds_classifier_input_size(
    classifier: *const DsClassifier,
    width: *mut u32,
    height: *mut u32,
) -> DsStatus {
    guard(|| {
        if classifier.is_null() || width.is_null() || height.is_null() {
            return fail(DsStatus::NullPointer, "classifier, width or height is NULL");
        }
        let (h, w) = (*classifier).model.input_size();
        *width = w as u32;
        *height = h as u32;
        DsStatus::Ok
    })
}

/// Classifies one RGB8 patch of exactly the classifier's input size.
///
/// # Safety
/// `pixels` must hold `height * width * 3` bytes; the output pointers must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn ds_classifier_classify(
    classifier: *const DsClassifier,
    pixels: *const u8,
    width: u32,
    height: u32,
    anomalous: *mut bool,
    anomaly_score: *mut f64,
) -> DsStatus {
    guard(|| {
        if classifier.is_null() || anomalous.is_null() || anomaly_score.is_null() {
            return fail(DsStatus::NullPointer, "classifier or an output pointer is NULL");
        }
        let patch = match image_arg(pixels, width, height) {
            Ok(i) => i,
            Err(s) => return s,
        };
        match (*classifier).model.classify(&patch) {
            Ok((label, score)) => {
                *anomalous = label.is_anomalous();
                *anomaly_score = score;
                DsStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Full two-stage screening of one RGB8 image: detect, crop every detection
/// scoring at least `screening_threshold`, classify the crop. Only screened
/// detections are reported. `config` may be NULL for the defaults. Output
/// buffer semantics match `ds_detector_detect`.
///
/// # Safety
/// As for `ds_detector_detect`; `classifier` must be a valid handle and
/// `config` NULL or valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ds_screen(
    detector: *const DsDetector,
    classifier: *const DsClassifier,
    pixels: *const u8,
    width: u32,
    height: u32,
    config: *const DsScreenConfig,
    out: *mut DsScreenedDetection,
    capacity: usize,
    count: *mut usize,
) -> DsStatus {
    guard(|| {
        if detector.is_null() || classifier.is_null() || count.is_null() || (out.is_null() && capacity > 0) {
            return fail(DsStatus::NullPointer, "detector, classifier, out or count is NULL");
        }
        let cfg = if config.is_null() { ds_screen_config_default() } else { *config };
        let pipeline = PipelineConfig {
            score_threshold: cfg.score_threshold,
            nms_threshold: cfg.nms_threshold,
            screening_threshold: cfg.screening_threshold,
            pad_fraction: cfg.pad_fraction,
            ..PipelineConfig::default()
        };
        if let Err(e) = pipeline.validate() {
            return fail(DsStatus::InvalidArgument, e.to_string());
        }
        let rec = match image_arg(pixels, width, height) {
            Ok(i) => record(i),
            Err(s) => return s,
        };
        let dets = (*detector).model.detect(&rec, pipeline.score_threshold, pipeline.nms_threshold);
        let screened = match screen_detections(&(*classifier).model, &rec, &dets, &pipeline) {
            Ok(s) => s,
            Err(e) => return fail_with(&e),
        };
        let rows: Vec<DsScreenedDetection> = screened
            .iter()
            .map(|s| DsScreenedDetection {
                detection: DsDetection::from(&s.detection),
                anomalous: s.anomaly.is_anomalous(),
                anomaly_score: s.anomaly_score,
            })
            .collect();
        write_out(&rows, out, capacity, count)
    })
}
