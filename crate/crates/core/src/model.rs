//! The per-cell patch head, its training loop and inference.
//!
//! Every cell's `cell_size × cell_size` pixel patch passes through one
//! leaky-rectified hidden layer to `P · V` raw outputs, which are then
//! activated into geometry, a label distribution and a confidence.

use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{anchor_grid_assignment, AnchorSet};
use crate::data::{augment, write_atomic, Raster, Scene};
use crate::error::{Error, Result};
use crate::geom::{cell_to_image, discretize, mr_to_cart_unchecked, Grid, GridTruth, ImageSegment, Polyline, Representation};
use crate::loss::{loss_and_gradients, LossBreakdown, LossWeights};
use crate::matching::{dynamic_grid_assignment, GridAssignment};
use crate::metrics::{classify_outcomes, GateSweep, MetricsAccumulator, MetricsReport};
use crate::tensor::{values_per_predictor, GridTensor};

/// Negative-side slope of the hidden activation.
pub const LEAKY_SLOPE: f64 = 0.1;
/// Checkpoint format tag.
pub const CHECKPOINT_FORMAT: &str = "gridline-v1";
/// Anchor targets are kept this far inside the sigmoid range before inverting it.
const LOGIT_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    #[default]
    Sigmoid,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "li" => Ok(Activation::Linear),
            "sigmoid" | "si" => Ok(Activation::Sigmoid),
            _ => Err(Error::invalid(format!("unknown activation {s:?} (expected linear or sigmoid)"))),
        }
    }
}

/// Architecture of the head. With `anchors` set, geometry outputs are
/// offsets from the anchor of each predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub cell_size: usize,
    pub hidden: usize,
    pub predictors: usize,
    pub classes: usize,
    pub representation: Representation,
    pub geometry_activation: Activation,
    pub confidence_activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<AnchorSet>,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cell_size == 0 || self.hidden == 0 || self.predictors == 0 || self.classes == 0 {
            return Err(Error::invalid("cell size, hidden width, predictors and classes must be positive"));
        }
        if let Some(a) = &self.anchors {
            if a.len() != self.predictors {
                return Err(Error::invalid(format!(
                    "{} anchors given for {} predictors",
                    a.len(),
                    self.predictors
                )));
            }
        }
        Ok(())
    }

    pub fn inputs(&self) -> usize {
        self.cell_size * self.cell_size
    }

    pub fn outputs(&self) -> usize {
        self.predictors * values_per_predictor(self.classes)
    }

    pub fn num_params(&self) -> usize {
        let (i, h, o) = (self.inputs(), self.hidden, self.outputs());
        i * h + h + h * o + o
    }

    /// Value range of geometry coordinate `k` under the sigmoid activation.
    fn geometry_range(&self, k: usize) -> (f64, f64) {
        match (self.representation, k) {
            (Representation::Mr, 2 | 3) => (-1.0, 1.0),
            _ => (0.0, 1.0),
        }
    }

    /// Per predictor, the pre-activation shift applied to geometry outputs.
    fn geometry_shift(&self) -> Vec<[f64; 4]> {
        let Some(anchors) = &self.anchors else {
            return vec![[0.0; 4]; self.predictors];
        };
        (0..anchors.len())
            .map(|i| {
                let mr = anchors.geometry(i);
                let coords = match self.representation {
                    Representation::Mr => [mr.m.u, mr.m.v, mr.d.u, mr.d.v],
                    Representation::Cart => {
                        let c = mr_to_cart_unchecked(mr);
                        [c.s.u, c.s.v, c.e.u, c.e.v]
                    }
                };
                let mut shift = [0.0; 4];
                for k in 0..4 {
                    shift[k] = match self.geometry_activation {
                        Activation::Linear => coords[k],
                        Activation::Sigmoid => {
                            let (lo, hi) = self.geometry_range(k);
                            let t = ((coords[k] - lo) / (hi - lo)).clamp(LOGIT_MARGIN, 1.0 - LOGIT_MARGIN);
                            (t / (1.0 - t)).ln()
                        }
                    };
                }
                shift
            })
            .collect()
    }
}

/// Weights of the head in one flat vector laid out as
/// `w1 [inputs × hidden] | b1 [hidden] | w2 [outputs × hidden] | b2 [outputs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: HeadConfig,
    pub weights: Vec<f64>,
    pub seed: u64,
    shift: Vec<[f64; 4]>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config: HeadConfig,
    seed: u64,
    weights: Vec<f64>,
}

struct Layout {
    b1: usize,
    w2: usize,
    b2: usize,
}

impl ModelParams {
    /// Xavier-uniform weights and zero biases from `seed`.
    pub fn init(config: HeadConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        p.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, h, o) = (p.config.inputs(), p.config.hidden, p.config.outputs());
        let l = p.layout();
        let a1 = (6.0 / (i + h) as f64).sqrt();
        let a2 = (6.0 / (h + o) as f64).sqrt();
        for w in &mut p.weights[..l.b1] {
            *w = rng.gen_range(-a1..a1);
        }
        for w in &mut p.weights[l.w2..l.b2] {
            *w = rng.gen_range(-a2..a2);
        }
        Ok(p)
    }

    pub fn zeros(config: HeadConfig) -> Result<Self> {
        config.validate()?;
        let shift = config.geometry_shift();
        Ok(Self { weights: vec![0.0; config.num_params()], config, seed: 0, shift })
    }

    pub fn from_weights(config: HeadConfig, weights: Vec<f64>, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if weights.len() != p.weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "head needs {} weights, got {}",
                p.weights.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("checkpoint contains non-finite weights"));
        }
        p.weights = weights;
        p.seed = seed;
        Ok(p)
    }

    fn layout(&self) -> Layout {
        let (i, h, o) = (self.config.inputs(), self.config.hidden, self.config.outputs());
        Layout { b1: i * h, w2: i * h + h, b2: i * h + h + o * h }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            seed: self.seed,
            weights: self.weights.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("unsupported checkpoint format {:?}", c.format)));
        }
        Self::from_weights(c.config, c.weights, c.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Intermediate values of one cell, kept for backpropagation.
struct CellCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    raw: Vec<f64>,
}

fn check_raster(params: &ModelParams, raster: &Raster, grid: &Grid) -> Result<()> {
    let cs = params.config.cell_size;
    if grid.cell_size != cs || raster.width != grid.cols * cs || raster.height != grid.rows * cs {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} raster, {}x{} grid of {}-px cells, head expects {}-px cells",
            raster.width, raster.height, grid.rows, grid.cols, grid.cell_size, cs
        )));
    }
    Ok(())
}

fn cell_forward(params: &ModelParams, raster: &Raster, row: usize, col: usize) -> CellCache {
    let cfg = &params.config;
    let (cs, h, o) = (cfg.cell_size, cfg.hidden, cfg.outputs());
    let l = params.layout();
    let w = &params.weights;
    let mut x = Vec::with_capacity(cs * cs);
    for y in 0..cs {
        for xx in 0..cs {
            x.push(raster.get(col * cs + xx, row * cs + y) as f64 / 255.0);
        }
    }
    let mut pre = w[l.b1..l.w2].to_vec();
    for (j, &xj) in x.iter().enumerate() {
        if xj != 0.0 {
            let wj = &w[j * h..(j + 1) * h];
            for (p, &wjk) in pre.iter_mut().zip(wj) {
                *p += wjk * xj;
            }
        }
    }
    let hidden: Vec<f64> = pre.iter().map(|&p| if p > 0.0 { p } else { LEAKY_SLOPE * p }).collect();
    let raw: Vec<f64> = (0..o)
        .map(|k| {
            let wk = &w[l.w2 + k * h..l.w2 + (k + 1) * h];
            w[l.b2 + k] + wk.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    CellCache { x, pre, hidden, raw }
}

fn activate(params: &ModelParams, raw: &[f64], out: &mut [f64]) {
    let cfg = &params.config;
    let v = values_per_predictor(cfg.classes);
    for p in 0..cfg.predictors {
        let r = &raw[p * v..(p + 1) * v];
        let o = &mut out[p * v..(p + 1) * v];
        for k in 0..4 {
            let z = r[k] + params.shift[p][k];
            o[k] = match cfg.geometry_activation {
                Activation::Linear => z,
                Activation::Sigmoid => {
                    let (lo, hi) = cfg.geometry_range(k);
                    lo + (hi - lo) * sigmoid(z)
                }
            };
        }
        let labels = &r[4..4 + cfg.classes];
        let max = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (dst, &z) in o[4..4 + cfg.classes].iter_mut().zip(labels) {
            *dst = (z - max).exp();
            total += *dst;
        }
        for dst in &mut o[4..4 + cfg.classes] {
            *dst /= total;
        }
        let c = r[4 + cfg.classes];
        o[4 + cfg.classes] = match cfg.confidence_activation {
            Activation::Linear => c,
            Activation::Sigmoid => sigmoid(c),
        };
    }
}

/// `∂L/∂raw` of one cell from `∂L/∂out`.
fn activation_backward(params: &ModelParams, out: &[f64], g_out: &[f64], g_raw: &mut [f64]) {
    let cfg = &params.config;
    let v = values_per_predictor(cfg.classes);
    for p in 0..cfg.predictors {
        let (o, g) = (&out[p * v..(p + 1) * v], &g_out[p * v..(p + 1) * v]);
        let gr = &mut g_raw[p * v..(p + 1) * v];
        for k in 0..4 {
            gr[k] = match cfg.geometry_activation {
                Activation::Linear => g[k],
                Activation::Sigmoid => {
                    let (lo, hi) = cfg.geometry_range(k);
                    g[k] * (o[k] - lo) * (hi - o[k]) / (hi - lo)
                }
            };
        }
        let probs = &o[4..4 + cfg.classes];
        let dot: f64 = probs.iter().zip(&g[4..4 + cfg.classes]).map(|(a, b)| a * b).sum();
        for k in 0..cfg.classes {
            gr[4 + k] = probs[k] * (g[4 + k] - dot);
        }
        let c = 4 + cfg.classes;
        gr[c] = match cfg.confidence_activation {
            Activation::Linear => g[c],
            Activation::Sigmoid => g[c] * o[c] * (1.0 - o[c]),
        };
    }
}

fn forward_cached(params: &ModelParams, raster: &Raster, grid: &Grid) -> Result<(GridTensor, Vec<CellCache>)> {
    check_raster(params, raster, grid)?;
    let cfg = &params.config;
    let mut out = GridTensor::zeros(*grid, cfg.predictors, cfg.classes, cfg.representation);
    let mut caches = Vec::with_capacity(grid.num_cells());
    for cell in grid.cells() {
        let cache = cell_forward(params, raster, cell.row, cell.col);
        activate(params, &cache.raw, out.cell_block_mut(grid.flat_index(cell)));
        caches.push(cache);
    }
    Ok((out, caches))
}

/// Activated predictions for every cell.
pub fn forward(params: &ModelParams, raster: &Raster, grid: &Grid) -> Result<GridTensor> {
    forward_cached(params, raster, grid).map(|(t, _)| t)
}

/// Accumulates `∂L/∂weights` into `grad` given `∂L/∂out`.
fn backward(params: &ModelParams, caches: &[CellCache], out: &GridTensor, g_out: &GridTensor, grad: &mut [f64]) {
    let cfg = &params.config;
    let (h, o) = (cfg.hidden, cfg.outputs());
    let l = params.layout();
    let w = &params.weights;
    let mut g_raw = vec![0.0; o];
    let mut g_pre = vec![0.0; h];
    for (flat, cache) in caches.iter().enumerate() {
        let go = g_out.cell_block(flat);
        if go.iter().all(|&g| g == 0.0) {
            continue;
        }
        activation_backward(params, out.cell_block(flat), go, &mut g_raw);
        g_pre.iter_mut().for_each(|g| *g = 0.0);
        for (k, &gk) in g_raw.iter().enumerate() {
            if gk == 0.0 {
                continue;
            }
            grad[l.b2 + k] += gk;
            let wk = &w[l.w2 + k * h..l.w2 + (k + 1) * h];
            let gwk = &mut grad[l.w2 + k * h..l.w2 + (k + 1) * h];
            for j in 0..h {
                gwk[j] += gk * cache.hidden[j];
                g_pre[j] += gk * wk[j];
            }
        }
        for (g, &p) in g_pre.iter_mut().zip(&cache.pre) {
            if p <= 0.0 {
                *g *= LEAKY_SLOPE;
            }
        }
        for (gb, &g) in grad[l.b1..l.w2].iter_mut().zip(&g_pre) {
            *gb += g;
        }
        for (j, &xj) in cache.x.iter().enumerate() {
            if xj != 0.0 {
                for (gw, &g) in grad[j * h..(j + 1) * h].iter_mut().zip(&g_pre) {
                    *gw += g * xj;
                }
            }
        }
    }
}

/// Loss of one image under a fixed assignment and its gradient with
/// respect to every weight.
pub fn param_gradients(
    params: &ModelParams,
    raster: &Raster,
    truth: &GridTruth,
    assignment: &GridAssignment,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (out, caches) = forward_cached(params, raster, &truth.grid)?;
    let (loss, g_out) = loss_and_gradients(&out, truth, assignment, weights)?;
    let mut grad = vec![0.0; params.weights.len()];
    backward(params, &caches, &out, &g_out, &mut grad);
    Ok((loss, grad))
}

/// Assignment used for training and evaluation: fixed by anchors when the
/// head has them, otherwise recomputed from the predictions.
pub fn assignment_for(params: &ModelParams, preds: &GridTensor, truth: &GridTruth) -> Result<(GridAssignment, usize)> {
    match &params.config.anchors {
        Some(a) => Ok(anchor_grid_assignment(truth, a)),
        None => Ok((dynamic_grid_assignment(preds, truth)?, 0)),
    }
}

/// Confident predictions of one image in pixel coordinates, geometry clamped into each cell.
pub fn predict(params: &ModelParams, raster: &Raster, grid: &Grid, threshold: f64) -> Result<Vec<ImageSegment>> {
    let t = forward(params, raster, grid)?;
    Ok(grid
        .cells()
        .flat_map(|cell| (0..t.predictors).map(move |p| (cell, p)))
        .filter(|&(cell, p)| t.confidence(grid.flat_index(cell), p) > threshold)
        .map(|(cell, p)| t.image_segment(cell, p))
        .collect())
}

/// One training or evaluation image with its discretized ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub raster: Raster,
    pub polylines: Vec<Polyline>,
    pub truth: GridTruth,
}

impl Sample {
    pub fn from_scene(scene: &Scene, cell_size: usize, classes: usize) -> Result<Self> {
        let grid = Grid::for_image(scene.raster.width, scene.raster.height, cell_size)?;
        Ok(Self {
            raster: scene.raster.clone(),
            polylines: scene.truth.clone(),
            truth: discretize(&scene.truth, grid, classes)?,
        })
    }

    pub fn scene(&self, background: u8) -> Scene {
        Scene { raster: self.raster.clone(), truth: self.polylines.clone(), background }
    }
}

pub fn samples_from_scenes(scenes: &[Scene], cell_size: usize, classes: usize) -> Result<Vec<Sample>> {
    scenes.iter().map(|s| Sample::from_scene(s, cell_size, classes)).collect()
}

/// Retrieval report of a model on labelled samples, with a gate-sweep curve.
pub fn evaluate(params: &ModelParams, samples: &[Sample], threshold: f64, radii: &[f64]) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::default();
    let mut sweep = GateSweep::new(radii, threshold);
    let (mut dropped, mut gts) = (0usize, 0usize);
    for s in samples {
        let grid = s.truth.grid;
        let preds = forward(params, &s.raster, &grid)?;
        let (asg, d) = assignment_for(params, &preds, &s.truth)?;
        dropped += d;
        gts += s.truth.segment_count();
        acc.add(&classify_outcomes(&preds, &s.truth, &asg, threshold)?);
        if !radii.is_empty() {
            let image_preds: Vec<ImageSegment> = grid
                .cells()
                .flat_map(|c| (0..preds.predictors).map(move |p| (c, p)))
                .map(|(c, p)| preds.image_segment(c, p))
                .collect();
            let image_gts = s.truth.segments().map(|g| cell_to_image(g, &grid)).collect::<Result<Vec<_>>>()?;
            sweep.add_image(&image_preds, &image_gts);
        }
    }
    let mut report = acc.report();
    report.ma = if gts > 0 { dropped as f64 / gts as f64 } else { 0.0 };
    if !radii.is_empty() {
        report.gate_curve = Some(sweep.finish());
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Assignment {
    Dynamic,
    Anchors { anchors: AnchorSet },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub representation: Representation,
    pub assignment: Assignment,
    pub predictors: usize,
    pub classes: usize,
    pub cell_size: usize,
    pub hidden: usize,
    pub geometry_activation: Activation,
    pub confidence_activation: Activation,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub threads: usize,
    /// Random rotation and crop of every training image, redrawn each epoch.
    pub augment: bool,
    /// Confidence threshold for validation metrics.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            representation: Representation::Mr,
            assignment: Assignment::Dynamic,
            predictors: 2,
            classes: 2,
            cell_size: 8,
            hidden: 64,
            geometry_activation: Activation::Sigmoid,
            confidence_activation: Activation::Sigmoid,
            weights: LossWeights::default(),
            learning_rate: 1e-2,
            momentum: 0.9,
            epochs: 100,
            batch_size: 8,
            seed: 0,
            threads: 1,
            augment: false,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            cell_size: self.cell_size,
            hidden: self.hidden,
            predictors: self.predictors,
            classes: self.classes,
            representation: self.representation,
            geometry_activation: self.geometry_activation,
            confidence_activation: self.confidence_activation,
            anchors: match &self.assignment {
                Assignment::Dynamic => None,
                Assignment::Anchors { anchors } => Some(anchors.clone()),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.threads == 0 {
            return Err(Error::invalid("epochs, batch size and threads must be positive"));
        }
        self.weights.validate()?;
        self.head().validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-image loss over the training set.
    pub loss: LossBreakdown,
    pub val_f1: Option<f64>,
    pub val_mae_mp: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Parameters at the epoch with the highest validation F1.
    pub best: ModelParams,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// History as CSV with one row per epoch.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let opt = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v}"));
    let mut out = String::from("epoch,total,geom,conf,cls,val_f1,val_mae_mp,seconds\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.loss.total,
            r.loss.geom,
            r.loss.conf,
            r.loss.cls,
            opt(r.val_f1),
            opt(r.val_mae_mp),
            r.seconds
        ));
    }
    out
}

fn mix_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng.gen()
}

/// Mini-batch gradient descent with momentum.
///
/// Per-image gradients are computed on the worker pool and reduced in batch
/// order, so results do not depend on the thread count. Gradients are
/// averaged over the cells of a batch.
pub fn train(train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut params = ModelParams::init(cfg.head(), cfg.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let fixed: Option<Vec<GridAssignment>> = match (&params.config.anchors, cfg.augment) {
        (Some(a), false) => Some(train.iter().map(|s| anchor_grid_assignment(&s.truth, a).0).collect()),
        _ => None,
    };
    let mut velocity = vec![0.0; params.weights.len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_image = vec![LossBreakdown::default(); train.len()];
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = params.clone();
    let mut best_epoch = None;
    let mut best_f1 = f64::NEG_INFINITY;
    let started = Instant::now();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let step = |&i: &usize| -> Result<(usize, LossBreakdown, Vec<f64>)> {
                let sample = if cfg.augment {
                    let scene = augment(&train[i].scene(0), mix_seed(cfg.seed, epoch, i));
                    Some(Sample::from_scene(&scene, cfg.cell_size, cfg.classes)?)
                } else {
                    None
                };
                let s = sample.as_ref().unwrap_or(&train[i]);
                let (out, caches) = forward_cached(&params, &s.raster, &s.truth.grid)?;
                let asg = match &fixed {
                    Some(f) => f[i].clone(),
                    None => assignment_for(&params, &out, &s.truth)?.0,
                };
                let (mut loss, g_out) = loss_and_gradients(&out, &s.truth, &asg, &cfg.weights)?;
                loss.per_predictor.clear();
                let mut grad = vec![0.0; params.weights.len()];
                backward(&params, &caches, &out, &g_out, &mut grad);
                Ok((i, loss, grad))
            };
            let results: Vec<Result<(usize, LossBreakdown, Vec<f64>)>> =
                pool.install(|| batch.par_iter().map(step).collect());
            let mut grad = vec![0.0; params.weights.len()];
            let mut cells = 0;
            for r in results {
                let (i, loss, g) = r?;
                if !loss.total.is_finite() {
                    return Err(Error::Diverged { epoch, detail: format!("loss of image {i} is {}", loss.total) });
                }
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
                cells += train[i].truth.grid.num_cells();
                per_image[i] = loss;
            }
            let scale = 1.0 / cells as f64;
            for ((w, v), g) in params.weights.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v + g * scale;
                *w -= cfg.learning_rate * *v;
            }
            if let Some(bad) = params.weights.iter().position(|w| !w.is_finite()) {
                return Err(Error::Diverged { epoch, detail: format!("weight {bad} became non-finite") });
            }
        }

        let n = train.len() as f64;
        let mut loss = LossBreakdown::default();
        for l in &per_image {
            loss.total += l.total / n;
            loss.geom += l.geom / n;
            loss.conf += l.conf / n;
            loss.cls += l.cls / n;
        }
        let (val_f1, val_mae_mp) = if val.is_empty() {
            (None, None)
        } else {
            let r = evaluate(&params, val, cfg.threshold, &[])?;
            if r.f1 > best_f1 {
                best_f1 = r.f1;
                best = params.clone();
                best_epoch = Some(epoch);
            }
            (Some(r.f1), r.mae_mp)
        };
        let record = EpochRecord { epoch, loss, val_f1, val_mae_mp, seconds: started.elapsed().as_secs_f64() };
        debug!("epoch {epoch}: loss {:.5} val F1 {:?}", record.loss.total, record.val_f1);
        history.push(record);
    }
    if let Some(last) = history.last() {
        info!("trained {} epochs, final loss {:.5}, best epoch {:?}", cfg.epochs, last.loss.total, best_epoch);
    }
    if best_epoch.is_none() {
        best = params.clone();
    }
    Ok(TrainOutcome { params, best, best_epoch, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::uniform_anchors;
    use crate::data::{generate, SceneConfig};
    use crate::geom::Space;

    fn head(repr: Representation, geom: Activation) -> HeadConfig {
        HeadConfig {
            cell_size: 4,
            hidden: 4,
            predictors: 2,
            classes: 2,
            representation: repr,
            geometry_activation: geom,
            confidence_activation: Activation::Sigmoid,
            anchors: None,
        }
    }

    fn scene() -> Scene {
        let cfg = SceneConfig { width: 16, height: 16, ..Default::default() };
        generate(&cfg, 1).unwrap().remove(0)
    }

    #[test]
    fn zero_weights_give_half_confidence_and_uniform_labels() {
        let p = ModelParams::zeros(head(Representation::Mr, Activation::Linear)).unwrap();
        let s = scene();
        let grid = Grid::for_image(16, 16, 4).unwrap();
        let t = forward(&p, &s.raster, &grid).unwrap();
        assert_eq!(t.shape(), [4, 4, 2, 7]);
        for flat in 0..grid.num_cells() {
            for k in 0..2 {
                assert_eq!(t.confidence(flat, k), 0.5);
                assert_eq!(t.labels(flat, k), &[0.5, 0.5]);
            }
        }
    }

    #[test]
    fn raster_must_match_grid() {
        let p = ModelParams::zeros(head(Representation::Mr, Activation::Linear)).unwrap();
        let grid = Grid::for_image(16, 16, 4).unwrap();
        assert!(forward(&p, &Raster::filled(12, 16, 0), &grid).is_err());
    }

    #[test]
    fn sigmoid_anchor_shift_is_the_anchor_at_zero_weights() {
        let mut cfg = head(Representation::Mr, Activation::Sigmoid);
        cfg.anchors = Some(uniform_anchors(Space::Mr, 2).unwrap());
        let p = ModelParams::zeros(cfg.clone()).unwrap();
        let t = forward(&p, &Raster::filled(16, 16, 0), &Grid::for_image(16, 16, 4).unwrap()).unwrap();
        for k in 0..2 {
            let a = cfg.anchors.as_ref().unwrap().geometry(k);
            let g = t.geometry(0, k);
            assert!((g[0] - a.m.u).abs() < 1e-2 && (g[1] - a.m.v).abs() < 1e-2);
        }
    }

    fn fd_check(cfg: HeadConfig, seed: u64) {
        let s = scene();
        let sample = Sample::from_scene(&s, 4, 2).unwrap();
        let p = ModelParams::init(cfg, seed).unwrap();
        let out = forward(&p, &sample.raster, &sample.truth.grid).unwrap();
        let (asg, _) = assignment_for(&p, &out, &sample.truth).unwrap();
        let w = LossWeights::default();
        let (_, grad) = param_gradients(&p, &sample.raster, &sample.truth, &asg, &w).unwrap();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..40 {
            let i = rng.gen_range(0..p.weights.len());
            let mut plus = p.clone();
            plus.weights[i] += h;
            let mut minus = p.clone();
            minus.weights[i] -= h;
            let lp = param_gradients(&plus, &sample.raster, &sample.truth, &asg, &w).unwrap().0.total;
            let lm = param_gradients(&minus, &sample.raster, &sample.truth, &asg, &w).unwrap().0.total;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err < 1e-3 || (fd - grad[i]).abs() < 1e-7, "weight {i}: fd {fd} vs analytic {}", grad[i]);
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        fd_check(head(Representation::Mr, Activation::Sigmoid), 1);
        fd_check(head(Representation::Cart, Activation::Linear), 2);
        let mut anchored = head(Representation::Mr, Activation::Sigmoid);
        anchored.anchors = Some(uniform_anchors(Space::Mr, 2).unwrap());
        fd_check(anchored, 3);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let s = Sample::from_scene(&scene(), 4, 2).unwrap();
        let cfg = TrainConfig { cell_size: 4, hidden: 4, epochs: 3, learning_rate: 0.0, ..Default::default() };
        let out = train(std::slice::from_ref(&s), &[], &cfg).unwrap();
        assert_eq!(out.params, ModelParams::init(cfg.head(), cfg.seed).unwrap());
        assert!(out.history.windows(2).all(|w| w[0].loss == w[1].loss));
    }

    #[test]
    fn overfits_a_single_image() {
        let s = Sample::from_scene(&scene(), 4, 2).unwrap();
        let cfg = TrainConfig { cell_size: 4, hidden: 16, epochs: 13, batch_size: 1, ..Default::default() };
        let out = train(std::slice::from_ref(&s), &[], &cfg).unwrap();
        let losses: Vec<f64> = out.history.iter().map(|r| r.loss.total).collect();
        assert!(losses[3..].windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ModelParams::init(head(Representation::Cart, Activation::Linear), 9).unwrap();
        assert_eq!(ModelParams::from_json(&p.to_json().unwrap()).unwrap(), p);
        assert!(ModelParams::from_json(&p.to_json().unwrap().replace("gridline-v1", "v0")).is_err());
    }

    #[test]
    fn thresholds_bound_prediction_count() {
        let p = ModelParams::init(head(Representation::Mr, Activation::Sigmoid), 4).unwrap();
        let s = scene();
        let grid = Grid::for_image(16, 16, 4).unwrap();
        assert!(predict(&p, &s.raster, &grid, 1.0).unwrap().is_empty());
        assert_eq!(predict(&p, &s.raster, &grid, 0.0).unwrap().len(), 32);
    }

    #[test]
    fn training_is_thread_count_independent() {
        let scenes = generate(&SceneConfig { width: 16, height: 16, ..Default::default() }, 4).unwrap();
        let samples = samples_from_scenes(&scenes, 4, 2).unwrap();
        let cfg = TrainConfig { cell_size: 4, hidden: 8, epochs: 2, batch_size: 2, ..Default::default() };
        let a = train(&samples, &samples, &cfg).unwrap();
        let b = train(&samples, &samples, &TrainConfig { threads: 3, ..cfg }).unwrap();
        assert_eq!(a.params, b.params);
    }
}
