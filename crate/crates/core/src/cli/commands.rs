use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::Serialize;

use super::{write_manifest, DiscretizeArgs, EvalArgs, GenArgs, GridArgs, NmsArgs, PredictArgs, RenderArgs, Settings, StitchArgs, TrainArgs, AnchorsArgs};
use crate::anchors::{kmeans_anchors, uniform_anchors, AnchorSet};
use crate::data::{
    generate_range, load_dataset, read_annotations, save_dataset, write_annotations, write_atomic, AnnotationRecord,
    PolylineRecord, Scene, SceneConfig,
};
use crate::decode::{nms, stitch, NmsConfig, NmsMode, StitchConfig};
use crate::error::{Error, Result};
use crate::geom::{
    discretize as discretize_truth, CellSegment, Geometry, Grid, GridTruth, ImageSegment, Representation, Space,
};
use crate::loss::LossWeights;
use crate::metrics::{evaluate_records, gate_curve_csv, record_classes, record_segments, RecordEval};
use crate::model::{history_csv, predict as model_predict, samples_from_scenes, train as train_model, Activation, Assignment, ModelParams, TrainConfig};

fn parse<T: std::str::FromStr<Err = Error>>(s: Option<String>) -> Result<Option<T>> {
    s.map(|s| s.parse()).transpose()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(value)?)
}

/// Resolves `--grid`/`--cell-size` for an image of the given size.
fn resolve_grid(settings: &mut Settings, g: &GridArgs, width: usize, height: usize) -> Result<Grid> {
    let cell_size = settings.get("cell_size", g.cell_size, 8)?;
    let grid = Grid::for_image(width, height, cell_size)?;
    if let Some(text) = settings.get_opt::<String>("grid", g.grid.clone())? {
        let (r, c) = text
            .split_once(['x', 'X'])
            .and_then(|(r, c)| Some((r.trim().parse::<usize>().ok()?, c.trim().parse::<usize>().ok()?)))
            .ok_or_else(|| Error::invalid(format!("--grid expects ROWSxCOLS, got {text:?}")))?;
        if (r, c) != (grid.rows, grid.cols) {
            return Err(Error::invalid(format!(
                "--grid {r}x{c} disagrees with {width}x{height} images in {cell_size}-px cells"
            )));
        }
    }
    Ok(grid)
}

fn parse_weights(s: &str) -> Result<LossWeights> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::invalid(format!("--weights {s:?}: {e}")))?;
    let [geom, conf1, conf0, class] = parts[..] else {
        return Err(Error::invalid(format!("--weights expects wg,wc1,wc0,wcl, got {s:?}")));
    };
    let w = LossWeights { geom, conf1, conf0, class };
    w.validate()?;
    Ok(w)
}

fn load_anchors(path: &Path) -> Result<AnchorSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// `None` for `dynamic`, otherwise the anchor file.
fn resolve_anchors(settings: &mut Settings, flag: Option<String>) -> Result<Option<AnchorSet>> {
    match settings.get("anchors", flag, "dynamic".to_string())?.as_str() {
        "dynamic" => Ok(None),
        path => load_anchors(Path::new(path)).map(Some),
    }
}

pub(super) fn gen(a: GenArgs, s: &mut Settings, argv: &[OsString]) -> Result<()> {
    let mut cfg: SceneConfig = s.get("scene", None, SceneConfig::default())?;
    cfg.seed = s.get("seed", a.seed, cfg.seed)?;
    cfg.width = s.get("width", a.width, cfg.width)?;
    cfg.height = s.get("height", a.height, cfg.height)?;
    cfg.classes = s.get("classes", a.classes, cfg.classes)?;
    let count = s.get("count", a.count, 100)?;
    let start = s.get("start", a.start, 0)?;
    s.record("scene", &cfg)?;
    let scenes = generate_range(&cfg, start, count)?;
    ensure_dir(&a.out)?;
    save_dataset(&a.out, &scenes)?;
    info!("wrote {count} scenes to {}", a.out.display());
    write_manifest("gen", argv, s, &a.out, std::slice::from_ref(&a.out))
}

#[derive(Serialize)]
struct CellDump {
    rows: usize,
    cols: usize,
    cell_size: usize,
    segments: Vec<CellSegment>,
}

pub(super) fn discretize(a: DiscretizeArgs, s: &mut Settings, argv: &[OsString]) -> Result<()> {
    let repr: Representation = s.get("representation", parse(a.representation)?, Representation::Mr)?;
    let classes = s.get("classes", a.classes, 2)?;
    let records = read_annotations(&a.annotations)?;
    let mut out = Vec::new();
    for r in &records {
        let grid = resolve_grid(s, &a.grid, r.image.w, r.image.h)?;
        let truth = discretize_truth(&r.polylines()?, grid, classes)?;
        let segments = truth
            .segments()
            .map(|seg| CellSegment { geometry: seg.geometry.in_repr(repr), ..seg.clone() })
            .collect();
        let dump = CellDump { rows: grid.rows, cols: grid.cols, cell_size: grid.cell_size, segments };
        serde_json::to_writer(&mut out, &dump)?;
        out.push(b'\n');
    }
    write_atomic(&a.out, &out)?;
    write_manifest("discretize", argv, s, &a.out, std::slice::from_ref(&a.out))
}

fn dataset_truths(scenes: &[Scene], settings: &mut Settings, g: &GridArgs, classes: usize) -> Result<Vec<GridTruth>> {
    scenes
        .iter()
        .map(|sc| {
            let grid = resolve_grid(settings, g, sc.raster.width, sc.raster.height)?;
            discretize_truth(&sc.truth, grid, classes)
        })
        .collect()
}

pub(super) fn anchors(a: AnchorsArgs, s: &mut Settings, argv: &[OsString]) -> Result<()> {
    let space: Space = s.get("space", parse(a.space)?, Space::Mr)?;
    let p = s.get("predictors", a.predictors, 8)?;
    let use_kmeans = s.flag("kmeans", a.kmeans)?;
    if use_kmeans && a.uniform {
        return Err(Error::invalid("--kmeans and --uniform are exclusive"));
    }
    let set = if use_kmeans {
        let dir = a.dataset.as_ref().ok_or_else(|| Error::invalid("--kmeans needs --dataset"))?;
        let seed = s.get("seed", a.seed, 0)?;
        let scenes = load_dataset(dir)?;
        let truths = dataset_truths(&scenes, s, &a.grid, 1)?;
        let geoms: Vec<Geometry> = truths.iter().flat_map(|t| t.segments().map(|g| g.geometry)).collect();
        kmeans_anchors(&geoms, p, space, seed)?
    } else {
        uniform_anchors(space, p)?
    };
    s.record("method", &if use_kmeans { "kmeans" } else { "uniform" })?;
    match &a.out {
        Some(path) => {
            write_json(path, &set)?;
            write_manifest("anchors", argv, s, path, std::slice::from_ref(path))
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&set)?);
            Ok(())
        }
    }
}

pub(super) fn train(a: TrainArgs, s: &mut Settings, argv: &[OsString]) -> Result<()> {
    let d = TrainConfig::default();
    let anchors = resolve_anchors(s, a.anchors)?;
    let predictors = s.get_opt("predictors", a.predictors)?;
    let predictors = match (&anchors, predictors) {
        (Some(set), Some(p)) if p != set.len() => {
            return Err(Error::invalid(format!("--predictors {p} but the anchor file has {}", set.len())))
        }
        (Some(set), _) => set.len(),
        (None, p) => p.unwrap_or(d.predictors),
    };
    let weights = match s.get_opt::<String>("weights", a.weights)? {
        Some(w) => parse_weights(&w)?,
        None => d.weights,
    };
    let cfg = TrainConfig {
        representation: s.get("representation", parse(a.representation)?, d.representation)?,
        assignment: match anchors {
            Some(anchors) => Assignment::Anchors { anchors },
            None => Assignment::Dynamic,
        },
        predictors,
        classes: s.get("classes", a.classes, d.classes)?,
        cell_size: s.get("cell_size", a.grid.cell_size, d.cell_size)?,
        hidden: s.get("hidden", a.hidden, d.hidden)?,
        geometry_activation: s.get("geometry_activation", parse::<Activation>(a.geometry_activation)?, d.geometry_activation)?,
        confidence_activation: s.get(
            "confidence_activation",
            parse::<Activation>(a.confidence_activation)?,
            d.confidence_activation,
        )?,
        weights,
        learning_rate: s.get("lr", a.lr, d.learning_rate)?,
        momentum: s.get("momentum", a.momentum, d.momentum)?,
        epochs: s.get("epochs", a.epochs, d.epochs)?,
        batch_size: s.get("batch_size", a.batch_size, d.batch_size)?,
        seed: s.get("seed", a.seed, d.seed)?,
        threads: s.get("threads", a.threads, d.threads)?,
        augment: s.flag("augment", a.augment)?,
        threshold: s.get("threshold", a.threshold, d.threshold)?,
    };
    cfg.validate()?;
    s.record("train_config", &cfg)?;
    let scenes = load_dataset(&a.dataset)?;
    for sc in &scenes {
        resolve_grid(s, &a.grid, sc.raster.width, sc.raster.height)?;
    }
    let train_set = samples_from_scenes(&scenes, cfg.cell_size, cfg.classes)?;
    let val_set = match &a.val {
        Some(dir) => samples_from_scenes(&load_dataset(dir)?, cfg.cell_size, cfg.classes)?,
        None => Vec::new(),
    };
    let outcome = train_model(&train_set, &val_set, &cfg)?;
    ensure_dir(&a.out)?;
    let (ckpt, best, hist) = (a.out.join("checkpoint.json"), a.out.join("best.json"), a.out.join("history.csv"));
    outcome.params.save(&ckpt)?;
    outcome.best.save(&best)?;
    write_atomic(&hist, history_csv(&outcome.history).as_bytes())?;
    s.record("best_epoch", &outcome.best_epoch)?;
    if let Some(last) = outcome.history.last() {
        println!("epochs {}  loss {:.5}  val F1 {:?}  best epoch {:?}", last.epoch, last.loss.total, last.val_f1, outcome.best_epoch);
    }
    write_manifest("train", argv, s, &a.out, &[ckpt, best, hist])
}

fn records_from_segments(image: crate::data::ImageSize, segs: &[ImageSegment]) -> AnnotationRecord {
    AnnotationRecord { image, polylines: segs.iter().map(PolylineRecord::from_segment).collect() }
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    if threads == 0 {
        return Err(Error::invalid("--threads must be positive"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

pub(super) fn predict(a: PredictArgs, s: &mut Settings, argv: &[OsString]) -> Result<()> {
    let params = ModelParams::load(&a.checkpoint)?;
    let threshold = s.get("threshold", a.threshold, 0.5)?;
    let use_nms = s.flag("nms", a.nms)?;
    let use_stitch = s.flag("stitch", a.stitch)?;
    let threads = s.get("threads", a.threads, 1)?;
    let scenes = load_dataset(&a.dataset)?;
    let cs = params.config.cell_size;
    let pool = thread_pool(threads)?;
    let records: Vec<Result<AnnotationRecord>> = pool.install(|| {
        scenes
            .par_iter()
            .map(|sc| {
                let grid = Grid::for_image(sc.raster.width, sc.raster.height, cs)?;
                let mut segs = model_predict(&params, &sc.raster, &grid, threshold)?;
                if use_nms {
                    segs = nms(&segs, &NmsConfig { threshold, ..NmsConfig::for_cell_size(cs) })?;
                }
                let image = crate::data::ImageSize { w: sc.raster.width, h: sc.raster.height };
                if use_stitch {
                    let lines = stitch(&segs, &StitchConfig::for_cell_size(cs))?;
                    Ok(AnnotationRecord { image, polylines: lines.iter().map(PolylineRecord::from_polyline).collect() })
                } else {
                    Ok(records_from_segments(image, &segs))
                }
            })
            .collect()
    });
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    write_annotations(&a.out, &records)?;
    write_manifest("predict", argv, s, &a.out, std::slice::from_ref(&a.out))
}

pub(super) fn nms_cmd(a: NmsArgs, s: &mut Settings, argv: &[OsString]) -> Result<()> {
    let d = NmsConfig::for_cell_size(s.get("cell_size", a.cell_size, 8)?);
    let mode = match s.get("mode", a.mode, "keepmax".to_string())?.as_str() {
        "keepmax" | "keep-max" | "max" => NmsMode::KeepMax,
        "average" | "avg" => NmsMode::Average,
        other => return Err(Error::invalid(format!("unknown NMS mode {other:?}"))),
    };
    let cfg = NmsConfig {
        position_eps: s.get("position_eps", a.position_eps, d.position_eps)?,
        angle_eps: s.get("angle_eps", a.angle_eps, d.angle_eps.to_degrees())?.to_radians(),
        mode,
        threshold: s.get("threshold", a.threshold, d.threshold)?,
    };
    let records = read_annotations(&a.input)?;
    let classes = record_classes(&records);
    let out = records
        .iter()
        .map(|r| Ok(records_from_segments(r.image, &nms(&record_segments(r, classes), &cfg)?)))
        .collect::<Result<Vec<_>>>()?;
    write_annotations(&a.out, &out)?;
    write_manifest("nms", argv, s, &a.out, std::slice::from_ref(&a.out))
}

pub(super) fn stitch_cmd(a: StitchArgs, s: &mut Settings, argv: &[OsString]) -> Result<()> {
    let d = StitchConfig::for_cell_size(s.get("cell_size", a.cell_size, 8)?);
    let cfg = StitchConfig {
        join_eps: s.get("join_eps", a.join_eps, d.join_eps)?,
        angle_eps: s.get("angle_eps", a.angle_eps, d.angle_eps.to_degrees())?.to_radians(),
    };
    let records = read_annotations(&a.input)?;
    let classes = record_classes(&records);
    let out = records
        .iter()
        .map(|r| {
            let lines = stitch(&record_segments(r, classes), &cfg)?;
            Ok(AnnotationRecord { image: r.image, polylines: lines.iter().map(PolylineRecord::from_polyline).collect() })
        })
        .collect::<Result<Vec<_>>>()?;
    write_annotations(&a.out, &out)?;
    write_manifest("stitch", argv, s, &a.out, std::slice::from_ref(&a.out))
}

/// Ground-truth records from a dataset directory or an annotation file.
fn truth_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    if path.is_dir() {
        Ok(load_dataset(path)?.iter().map(AnnotationRecord::from_scene).collect())
    } else {
        read_annotations(path)
    }
}

fn parse_radii(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|r| match r.trim() {
            "inf" => Ok(f64::INFINITY),
            x => x.parse::<f64>().map_err(|e| Error::invalid(format!("radius {x:?}: {e}"))),
        })
        .collect()
}

pub(super) fn eval(a: EvalArgs, s: &mut Settings, argv: &[OsString]) -> Result<()> {
    let preds = read_annotations(&a.predictions)?;
    let truths = truth_records(&a.truth)?;
    for tr in &truths {
        resolve_grid(s, &a.grid, tr.image.w, tr.image.h)?;
    }
    let d = RecordEval::default();
    let opts = RecordEval {
        cell_size: s.get("cell_size", a.grid.cell_size, d.cell_size)?,
        representation: s.get("representation", parse(a.representation)?, d.representation)?,
        anchors: resolve_anchors(s, a.anchors)?,
        predictors: s.get_opt("predictors", a.predictors)?,
        classes: s.get_opt("classes", a.classes)?,
        threshold: s.get("threshold", a.threshold, d.threshold)?,
        radii: match s.get_opt::<String>("radii", a.radii)? {
            Some(r) => parse_radii(&r)?,
            None => d.radii,
        },
    };
    let report = evaluate_records(&preds, &truths, &opts)?;
    let curve = report.gate_curve.clone().unwrap_or_default();

    ensure_dir(&a.out)?;
    let (json, table, csv) = (a.out.join("metrics.json"), a.out.join("table.txt"), a.out.join("gate.csv"));
    write_json(&json, &report)?;
    write_atomic(&table, report.table().as_bytes())?;
    write_atomic(&csv, gate_curve_csv(&curve).as_bytes())?;
    print!("{}", report.table());
    write_manifest("eval", argv, s, &a.out, &[json, table, csv])
}

pub(super) fn render(a: RenderArgs, s: &mut Settings, argv: &[OsString]) -> Result<()> {
    let records = read_annotations(&a.input)?;
    let rec = records
        .get(a.index)
        .ok_or_else(|| Error::invalid(format!("--index {} but the file has {} records", a.index, records.len())))?;
    let under = match &a.underlay {
        Some(p) => Some(
            truth_records(p)?
                .get(a.index)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("underlay has no record {}", a.index)))?,
        ),
        None => None,
    };
    let cell = s.get_opt("cell_size", a.grid.cell_size)?;
    let scale = s.get("scale", a.scale, 8.0)?;
    s.record("index", &a.index)?;
    let svg = super::render_svg(rec, under.as_ref(), cell, scale);
    write_atomic(&a.out, svg.as_bytes())?;
    let outputs: Vec<PathBuf> = vec![a.out.clone()];
    write_manifest("render", argv, s, &a.out, &outputs)
}
