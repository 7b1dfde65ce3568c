use std::ffi::{c_char, CStr, CString};
use std::ptr;

use gridline::data::{generate, AnnotationRecord, SceneConfig};
use gridline::metrics::MetricsReport;
use gridline::model::{ModelParams, TrainConfig};
use gridline_ffi::*;

fn take(s: *mut c_char) -> String {
    assert!(!s.is_null());
    let text = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_owned();
    unsafe { gl_string_free(s) };
    text
}

fn last_error() -> String {
    let p = gl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn brute_force(costs: &[f64], n: usize) -> f64 {
    fn go(costs: &[f64], n: usize, row: usize, used: &mut Vec<bool>) -> f64 {
        if row == n {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..n {
            if !used[c] {
                used[c] = true;
                best = best.min(costs[row * n + c] + go(costs, n, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    go(costs, n, 0, &mut vec![false; n])
}

#[test]
fn hungarian_matches_brute_force() {
    let costs = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
    let mut map = [0isize; 3];
    let mut total = 0.0;
    let st = unsafe { gl_hungarian(costs.as_ptr(), 3, 3, map.as_mut_ptr(), &mut total) };
    assert_eq!(st, GlStatus::Ok);
    assert_eq!(total, brute_force(&costs, 3));
    let picked: f64 = map.iter().enumerate().map(|(r, &c)| costs[r * 3 + c as usize]).sum();
    assert_eq!(picked, total);

    let wide = [1.0, 9.0, 9.0, 9.0, 9.0, 1.0];
    let mut map = [0isize; 3];
    let st = unsafe { gl_hungarian(wide.as_ptr(), 3, 2, map.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, GlStatus::Ok);
    assert_eq!(map.iter().filter(|&&c| c == -1).count(), 1);
}

#[test]
fn non_finite_costs_and_null_pointers_are_reported() {
    let costs = [f64::NAN];
    let mut map = [0isize; 1];
    assert_eq!(unsafe { gl_hungarian(costs.as_ptr(), 1, 1, map.as_mut_ptr(), ptr::null_mut()) }, GlStatus::NonFinite);
    assert!(last_error().contains("non-finite"));
    assert_eq!(unsafe { gl_hungarian(ptr::null(), 1, 1, map.as_mut_ptr(), ptr::null_mut()) }, GlStatus::NullPointer);
    assert!(last_error().contains("costs"));
}

#[test]
fn representation_conversions() {
    let cart = [0.25, 0.5, 0.75, 1.0];
    let mut mr = [0.0; 4];
    assert_eq!(unsafe { gl_cart_to_mr(cart.as_ptr(), mr.as_mut_ptr()) }, GlStatus::Ok);
    assert_eq!(mr, [0.5, 0.75, 0.5, 0.5]);
    let mut back = [0.0; 4];
    assert_eq!(unsafe { gl_mr_to_cart(mr.as_ptr(), back.as_mut_ptr()) }, GlStatus::Ok);
    assert_eq!(back, cart);

    let outside = [0.9, 0.5, 0.6, 0.0];
    assert_ne!(unsafe { gl_mr_to_cart(outside.as_ptr(), back.as_mut_ptr()) }, GlStatus::Ok);
    assert!(!last_error().is_empty());
}

#[test]
fn split_polyline_yields_one_piece_per_crossed_cell() {
    let pts = [0.0, 4.0, 16.0, 4.0];
    let mut out = ptr::null_mut();
    let st = unsafe { gl_split_polyline(pts.as_ptr(), 2, 0, 16, 8, 8, 1, &mut out) };
    assert_eq!(st, GlStatus::Ok);
    let pieces: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
    assert_eq!(pieces.as_array().unwrap().len(), 2);

    let outside = [0.0, 4.0, 40.0, 4.0];
    let st = unsafe { gl_split_polyline(outside.as_ptr(), 2, 0, 16, 8, 8, 1, &mut out) };
    assert_eq!(st, GlStatus::OutOfBounds);
}

#[test]
fn anchor_handles_round_trip_through_json() {
    let mut set = ptr::null_mut();
    assert_eq!(unsafe { gl_anchors_uniform(GlSpace::Dir, 4, &mut set) }, GlStatus::Ok);
    assert_eq!(unsafe { gl_anchors_len(set) }, 4);
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { gl_anchors_to_json(set, &mut json) }, GlStatus::Ok);
    let text = CString::new(take(json)).unwrap();
    unsafe { gl_anchors_free(set) };

    let mut again = ptr::null_mut();
    assert_eq!(unsafe { gl_anchors_from_json(text.as_ptr(), &mut again) }, GlStatus::Ok);
    assert_eq!(unsafe { gl_anchors_len(again) }, 4);
    unsafe { gl_anchors_free(again) };
    assert_eq!(unsafe { gl_anchors_len(ptr::null()) }, 0);

    let bad = CString::new("{").unwrap();
    assert_eq!(unsafe { gl_anchors_from_json(bad.as_ptr(), &mut again) }, GlStatus::Parse);
}

#[test]
fn zero_model_confidence_sits_at_one_half() {
    let params = ModelParams::zeros(TrainConfig::default().head()).unwrap();
    let json = CString::new(params.to_json().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { gl_model_from_json(json.as_ptr(), &mut model) }, GlStatus::Ok);
    assert_eq!(unsafe { gl_model_cell_size(model) }, 8);

    let pixels = vec![0u8; 32 * 16];
    let cells = 4 * 2;
    for (threshold, expected) in [(0.4, cells * 2), (0.6, 0)] {
        let mut out = ptr::null_mut();
        let st = unsafe { gl_model_predict(model, pixels.as_ptr(), 32, 16, threshold, &mut out) };
        assert_eq!(st, GlStatus::Ok, "{}", last_error());
        let rec: AnnotationRecord = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(rec.polylines.len(), expected);
    }
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { gl_model_predict(model, pixels.as_ptr(), 30, 16, 0.5, &mut out) }, GlStatus::ShapeMismatch);
    unsafe { gl_model_free(model) };
}

#[test]
fn model_load_reports_io_errors() {
    let path = CString::new("/nonexistent/checkpoint.json").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { gl_model_load(path.as_ptr(), &mut model) }, GlStatus::Io);
    assert!(last_error().contains("/nonexistent/checkpoint.json"));
}

#[test]
fn evaluating_truth_against_itself_is_perfect() {
    let scenes = generate(&SceneConfig::default(), 3).unwrap();
    let jsonl: String = scenes
        .iter()
        .map(|s| serde_json::to_string(&AnnotationRecord::from_scene(s)).unwrap() + "\n")
        .collect();
    let truth = CString::new(jsonl).unwrap();
    let grid = gridline::geom::Grid::for_image(64, 64, 8).unwrap();
    let preds: String = scenes
        .iter()
        .map(|s| {
            let t = gridline::geom::discretize(&s.truth, grid, 2).unwrap();
            let segs: Vec<_> = t.segments().map(|c| gridline::geom::cell_to_image(c, &grid).unwrap()).collect();
            let rec = AnnotationRecord {
                image: gridline::data::ImageSize { w: 64, h: 64 },
                polylines: segs.iter().map(gridline::data::PolylineRecord::from_segment).collect(),
            };
            serde_json::to_string(&rec).unwrap() + "\n"
        })
        .collect();
    let preds = CString::new(preds).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { gl_evaluate(preds.as_ptr(), truth.as_ptr(), ptr::null(), &mut out) }, GlStatus::Ok);
    let report: MetricsReport = serde_json::from_str(&take(out)).unwrap();
    assert_eq!(report.f1, 1.0);
    assert_eq!(report.mae_mp, Some(0.0));

    let coarse = CString::new(r#"{"cell_size": 16}"#).unwrap();
    let st = unsafe { gl_evaluate(preds.as_ptr(), truth.as_ptr(), coarse.as_ptr(), &mut out) };
    assert_eq!(st, GlStatus::OutOfBounds, "cell indices of an 8-px grid do not fit a 16-px grid");
    assert!(last_error().contains("outside the 4x4 grid"));
}

#[test]
fn nms_keeps_one_of_two_duplicates() {
    let rec = r#"{"image":{"w":16,"h":16},"polylines":[
        {"label":0,"points":[[1.0,1.0],[6.0,1.0]],"confidence":0.9},
        {"label":0,"points":[[1.2,1.1],[6.1,1.0]],"confidence":0.8}]}"#
        .replace('\n', "");
    let rec = CString::new(rec).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { gl_nms(rec.as_ptr(), 8, 0.5, &mut out) }, GlStatus::Ok);
    let kept: AnnotationRecord = serde_json::from_str(&take(out)).unwrap();
    assert_eq!(kept.polylines.len(), 1);
    assert_eq!(kept.polylines[0].confidence, Some(0.9));
}

#[test]
fn version_matches_the_package() {
    let v = unsafe { CStr::from_ptr(gl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
