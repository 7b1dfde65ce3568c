//! C ABI over the `gridline` crate.
//!
//! Every function returns a [`GlStatus`]; on failure the message is kept in a
//! thread-local slot readable through [`gl_last_error`]. Strings handed out by
//! the library are released with [`gl_string_free`], handles with their own
//! `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gridline::anchors::{uniform_anchors, AnchorSet};
use gridline::data::{parse_annotations, AnnotationRecord, ImageSize, PolylineRecord, Raster};
use gridline::decode::{nms, NmsConfig};
use gridline::error::Error;
use gridline::geom::{cart_to_mr, mr_to_cart, split_polyline, Grid, Point2, Polyline, SegmentCart, SegmentMR, Space};
use gridline::matching::{hungarian, CostMatrix};
use gridline::metrics::{evaluate_records, record_classes, record_segments, RecordEval};
use gridline::model::{predict, ModelParams};

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    InvalidGeometry = 4,
    OutOfBounds = 5,
    ShapeMismatch = 6,
    NonFinite = 7,
    Parse = 8,
    Io = 9,
    Diverged = 10,
    Panic = 11,
}

/// Feature space of an anchor set.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlSpace {
    Cart = 0,
    Mr = 1,
    Mp = 2,
    Dir = 3,
}

impl From<GlSpace> for Space {
    fn from(s: GlSpace) -> Self {
        match s {
            GlSpace::Cart => Space::Cart,
            GlSpace::Mr => Space::Mr,
            GlSpace::Mp => Space::Mp,
            GlSpace::Dir => Space::Dir,
        }
    }
}

/// Opaque anchor set.
pub struct GlAnchorSet(AnchorSet);

/// Opaque trained model.
pub struct GlModel(ModelParams);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(GlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::OutOfBounds { .. } | Error::CellOutOfRange { .. } => GlStatus::OutOfBounds,
            Error::EmptyResult | Error::InvalidGeometry(_) => GlStatus::InvalidGeometry,
            Error::InvalidArgument(_) => GlStatus::InvalidArgument,
            Error::NonFinite { .. } => GlStatus::NonFinite,
            Error::ShapeMismatch(_) | Error::RepresentationMismatch { .. } => GlStatus::ShapeMismatch,
            Error::Diverged { .. } => GlStatus::Diverged,
            Error::Parse { .. } | Error::Json(_) => GlStatus::Parse,
            Error::Io { .. } => GlStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(GlStatus::Parse, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(msg));
}

fn guard(f: impl FnOnce() -> Outcome) -> GlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GlStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            GlStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(GlStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(GlStatus::InvalidArgument, msg.into())
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|e| Failure(GlStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn owned_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s).map(CString::into_raw).map_err(|e| invalid(e.to_string()))
}

fn segments_json(image: ImageSize, segs: &[gridline::geom::ImageSegment]) -> Result<String, Failure> {
    let rec = AnnotationRecord { image, polylines: segs.iter().map(PolylineRecord::from_segment).collect() };
    Ok(serde_json::to_string(&rec)?)
}

/// Message of the last failed call on this thread, or null. Owned by the
/// library and valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gl_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn gl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` is null or a string produced by this library that was not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Minimum-cost assignment of a row-major `rows x cols` cost matrix.
/// `row_to_col` receives `rows` entries, `-1` for unmatched rows.
///
/// # Safety
/// `costs` holds `rows * cols` doubles, `row_to_col` has room for `rows`
/// entries, `total_cost` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn gl_hungarian(
    costs: *const f64,
    rows: usize,
    cols: usize,
    row_to_col: *mut isize,
    total_cost: *mut f64,
) -> GlStatus {
    guard(|| {
        let n = rows.checked_mul(cols).ok_or_else(|| invalid("cost matrix size overflows"))?;
        let data = slice(costs, n, "costs")?.to_vec();
        let m = hungarian(&CostMatrix::new(rows, cols, data)?)?;
        if rows > 0 && row_to_col.is_null() {
            return Err(null("row_to_col"));
        }
        let map = if rows == 0 { &mut [][..] } else { std::slice::from_raw_parts_mut(row_to_col, rows) };
        map.fill(-1);
        for (r, c) in m.pairs {
            map[r] = c as isize;
        }
        if let Some(t) = total_cost.as_mut() {
            *t = m.total_cost;
        }
        Ok(())
    })
}

/// `[su, sv, eu, ev]` to `[mu, mv, du, dv]`.
///
/// # Safety
/// `cart` and `mr` point to four doubles each.
#[no_mangle]
pub unsafe extern "C" fn gl_cart_to_mr(cart: *const f64, mr: *mut f64) -> GlStatus {
    guard(|| {
        let c = slice(cart, 4, "cart")?;
        let r = cart_to_mr(SegmentCart { s: Point2::new(c[0], c[1]), e: Point2::new(c[2], c[3]) });
        let o = out(mr.cast::<[f64; 4]>(), "mr")?;
        *o = [r.m.u, r.m.v, r.d.u, r.d.v];
        Ok(())
    })
}

/// `[mu, mv, du, dv]` to `[su, sv, eu, ev]`; fails when an endpoint leaves the cell.
///
/// # Safety
/// `mr` and `cart` point to four doubles each.
#[no_mangle]
pub unsafe extern "C" fn gl_mr_to_cart(mr: *const f64, cart: *mut f64) -> GlStatus {
    guard(|| {
        let r = slice(mr, 4, "mr")?;
        let c = mr_to_cart(SegmentMR { m: Point2::new(r[0], r[1]), d: Point2::new(r[2], r[3]) })?;
        let o = out(cart.cast::<[f64; 4]>(), "cart")?;
        *o = [c.s.u, c.s.v, c.e.u, c.e.v];
        Ok(())
    })
}

/// Splits an image-space polyline of `n` `(u, v)` vertices into per-cell
/// segments, written to `out_json` as a JSON array. `label < 0` means
/// unlabeled.
///
/// # Safety
/// `points` holds `2 * n` doubles, `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn gl_split_polyline(
    points: *const f64,
    n: usize,
    label: isize,
    width: usize,
    height: usize,
    cell_size: usize,
    classes: usize,
    out_json: *mut *mut c_char,
) -> GlStatus {
    guard(|| {
        let out_json = out(out_json, "out_json")?;
        let flat = slice(points, n.checked_mul(2).ok_or_else(|| invalid("vertex count overflows"))?, "points")?;
        let pts = flat.chunks_exact(2).map(|p| Point2::new(p[0], p[1])).collect();
        let line = Polyline::new(pts, usize::try_from(label).ok())?;
        let grid = Grid::for_image(width, height, cell_size)?;
        let pieces = split_polyline(&line, &grid, classes)?;
        *out_json = owned_string(serde_json::to_string(&pieces)?)?;
        Ok(())
    })
}

/// Evenly spread anchors in `space`.
///
/// # Safety
/// `out_set` is writable.
#[no_mangle]
pub unsafe extern "C" fn gl_anchors_uniform(space: GlSpace, predictors: usize, out_set: *mut *mut GlAnchorSet) -> GlStatus {
    guard(|| {
        let o = out(out_set, "out_set")?;
        *o = Box::into_raw(Box::new(GlAnchorSet(uniform_anchors(space.into(), predictors)?)));
        Ok(())
    })
}

/// Anchor set from its JSON file format.
///
/// # Safety
/// `json` is a NUL-terminated string, `out_set` is writable.
#[no_mangle]
pub unsafe extern "C" fn gl_anchors_from_json(json: *const c_char, out_set: *mut *mut GlAnchorSet) -> GlStatus {
    guard(|| {
        let o = out(out_set, "out_set")?;
        let set: AnchorSet = serde_json::from_str(text(json, "json")?)?;
        *o = Box::into_raw(Box::new(GlAnchorSet(set)));
        Ok(())
    })
}

/// Number of anchors, 0 for a null handle.
///
/// # Safety
/// `set` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gl_anchors_len(set: *const GlAnchorSet) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// Anchor set as JSON.
///
/// # Safety
/// `set` is a live handle, `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn gl_anchors_to_json(set: *const GlAnchorSet, out_json: *mut *mut c_char) -> GlStatus {
    guard(|| {
        let s = set.as_ref().ok_or_else(|| null("set"))?;
        let o = out(out_json, "out_json")?;
        *o = owned_string(serde_json::to_string(&s.0)?)?;
        Ok(())
    })
}

/// # Safety
/// `set` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gl_anchors_free(set: *mut GlAnchorSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` is a NUL-terminated string, `out_model` is writable.
#[no_mangle]
pub unsafe extern "C" fn gl_model_load(path: *const c_char, out_model: *mut *mut GlModel) -> GlStatus {
    guard(|| {
        let o = out(out_model, "out_model")?;
        let params = ModelParams::load(Path::new(text(path, "path")?))?;
        *o = Box::into_raw(Box::new(GlModel(params)));
        Ok(())
    })
}

/// Model from checkpoint JSON text.
///
/// # Safety
/// `json` is a NUL-terminated string, `out_model` is writable.
#[no_mangle]
pub unsafe extern "C" fn gl_model_from_json(json: *const c_char, out_model: *mut *mut GlModel) -> GlStatus {
    guard(|| {
        let o = out(out_model, "out_model")?;
        *o = Box::into_raw(Box::new(GlModel(ModelParams::from_json(text(json, "json")?)?)));
        Ok(())
    })
}

/// Cell size in pixels, 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gl_model_cell_size(model: *const GlModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.cell_size)
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gl_model_free(model: *mut GlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the model on a row-major 8-bit raster and writes the segments with
/// confidence above `threshold` as one annotation record in JSON.
///
/// # Safety
/// `model` is a live handle, `pixels` holds `width * height` bytes,
/// `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn gl_model_predict(
    model: *const GlModel,
    pixels: *const u8,
    width: usize,
    height: usize,
    threshold: f64,
    out_json: *mut *mut c_char,
) -> GlStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let o = out(out_json, "out_json")?;
        let n = width.checked_mul(height).ok_or_else(|| invalid("raster size overflows"))?;
        let raster = Raster::from_pixels(width, height, slice(pixels, n, "pixels")?.to_vec())?;
        let grid = Grid::for_image(width, height, m.0.config.cell_size)?;
        let segs = predict(&m.0, &raster, &grid, threshold)?;
        *o = owned_string(segments_json(ImageSize { w: width, h: height }, &segs)?)?;
        Ok(())
    })
}

/// Suppresses duplicate segments of one annotation record with the default
/// tolerances for `cell_size`.
///
/// # Safety
/// `record_json` is a NUL-terminated string, `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn gl_nms(
    record_json: *const c_char,
    cell_size: usize,
    threshold: f64,
    out_json: *mut *mut c_char,
) -> GlStatus {
    guard(|| {
        let o = out(out_json, "out_json")?;
        let rec: AnnotationRecord = serde_json::from_str(text(record_json, "record_json")?)?;
        let cfg = NmsConfig { threshold, ..NmsConfig::for_cell_size(cell_size) };
        let classes = record_classes(std::slice::from_ref(&rec));
        let kept = nms(&record_segments(&rec, classes), &cfg)?;
        *o = owned_string(segments_json(rec.image, &kept)?)?;
        Ok(())
    })
}

/// Scores JSON-lines predictions against JSON-lines ground truth. `options_json`
/// may be null for defaults; the metrics report is written as JSON.
///
/// # Safety
/// String arguments are NUL-terminated, `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn gl_evaluate(
    predictions_jsonl: *const c_char,
    truth_jsonl: *const c_char,
    options_json: *const c_char,
    out_json: *mut *mut c_char,
) -> GlStatus {
    guard(|| {
        let o = out(out_json, "out_json")?;
        let preds = parse_annotations(text(predictions_jsonl, "predictions_jsonl")?)?;
        let truths = parse_annotations(text(truth_jsonl, "truth_jsonl")?)?;
        let opts: RecordEval =
            if options_json.is_null() { RecordEval::default() } else { serde_json::from_str(text(options_json, "options_json")?)? };
        let report = evaluate_records(&preds, &truths, &opts)?;
        *o = owned_string(serde_json::to_string(&report)?)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn message() -> String {
        unsafe { CStr::from_ptr(gl_last_error()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn panics_become_a_status() {
        let st = guard(|| panic!("boom"));
        assert_eq!(st, GlStatus::Panic);
        assert_eq!(message(), "panic: boom");
    }

    #[test]
    fn core_errors_map_to_their_codes() {
        let cases = [
            (Error::InvalidArgument("x".into()), GlStatus::InvalidArgument),
            (Error::EmptyResult, GlStatus::InvalidGeometry),
            (Error::CellOutOfRange { row: 9, col: 0, rows: 1, cols: 1 }, GlStatus::OutOfBounds),
            (Error::Parse { line: 3, message: "bad".into() }, GlStatus::Parse),
            (Error::Diverged { epoch: 1, detail: "nan".into() }, GlStatus::Diverged),
        ];
        for (e, want) in cases {
            let text = e.to_string();
            assert_eq!(guard(|| Err(e.into())), want);
            assert_eq!(message(), text);
        }
    }

    #[test]
    fn interior_nul_in_a_message_is_replaced() {
        set_error("a\0b".into());
        assert_eq!(message(), "a b");
    }
}
