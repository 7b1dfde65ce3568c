//! Evaluation: confidence-gated retrieval counts, MAE columns, and circular
//! image-space gate sweeps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use log::warn;

use crate::anchors::{anchor_grid_assignment, AnchorSet};
use crate::data::AnnotationRecord;
use crate::error::{Error, Result};
use crate::geom::{
    cell_to_image, discretize, euclidean, image_point_to_cell, Geometry, Grid, GridTruth, ImageSegment, Representation,
    SegmentCart,
};
use crate::matching::{hungarian, CostMatrix, GridAssignment};
use crate::tensor::GridTensor;

/// Default positive-confidence threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Gate radii (pixels) swept by default.
pub const DEFAULT_GATE_RADII: [f64; 6] = [0.0, 2.0, 4.0, 8.0, 16.0, 32.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl OutcomeCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &OutcomeCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Recall, precision, F1 and accuracy; empty denominators yield 0.
pub fn retrieval_metrics(c: &OutcomeCounts) -> Retrieval {
    let recall = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    Retrieval { recall, precision, f1: f1_score(precision, recall), accuracy: ratio(c.tp + c.tn, c.total()) }
}

/// A true-positive prediction and its ground truth, both in image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedPair {
    pub pred: ImageSegment,
    pub gt: ImageSegment,
}

/// Outcome of classifying every predictor of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Classification {
    pub counts: OutcomeCounts,
    pub tp_pairs: Vec<MatchedPair>,
    /// Σ |conf − target| over all predictors (target 1 if assigned, else 0).
    pub conf_deviation_sum: f64,
    pub predictor_count: usize,
}

/// TP: assigned and confident; FN: assigned, not confident; FP: unassigned
/// and confident; TN otherwise. A predictor is confident when `conf > threshold`.
pub fn classify_outcomes(
    preds: &GridTensor,
    truth: &GridTruth,
    assignment: &GridAssignment,
    threshold: f64,
) -> Result<Classification> {
    if preds.grid != truth.grid {
        return Err(Error::ShapeMismatch("prediction and truth grids differ".into()));
    }
    if assignment.num_cells() != preds.grid.num_cells() || assignment.predictors != preds.predictors {
        return Err(Error::ShapeMismatch("assignment does not match prediction shape".into()));
    }
    let mut out = Classification::default();
    for (cell, gts) in truth.cells() {
        let flat = preds.grid.flat_index(cell);
        for p in 0..preds.predictors {
            let conf = preds.confidence(flat, p);
            let positive = conf > threshold;
            out.predictor_count += 1;
            match assignment.cell(flat)[p] {
                Some(gi) => {
                    let gt = gts.get(gi).ok_or_else(|| {
                        Error::invalid(format!("cell ({}, {}) has no gt {gi}", cell.row, cell.col))
                    })?;
                    out.conf_deviation_sum += (conf - 1.0).abs();
                    if positive {
                        out.counts.tp += 1;
                        out.tp_pairs.push(MatchedPair {
                            pred: preds.image_segment(cell, p),
                            gt: cell_to_image(gt, &truth.grid)?,
                        });
                    } else {
                        out.counts.fn_ += 1;
                    }
                }
                None => {
                    out.conf_deviation_sum += conf.abs();
                    if positive {
                        out.counts.fp += 1;
                    } else {
                        out.counts.tn += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Mean absolute errors; geometric columns in pixels, `None` when undefined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaeMetrics {
    /// Mean endpoint distance, averaged over start and end.
    pub mae_cart: Option<f64>,
    pub mae_mp: Option<f64>,
    pub mae_len: Option<f64>,
    pub cf_tp: Option<f64>,
    pub cf: Option<f64>,
}

/// Pools classifications of many images into one report.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    counts: OutcomeCounts,
    tp_pairs: usize,
    sum_cart: f64,
    sum_mp: f64,
    sum_len: f64,
    sum_cf_tp: f64,
    sum_cf: f64,
    predictors: usize,
}

impl MetricsAccumulator {
    pub fn add(&mut self, c: &Classification) {
        self.counts.merge(&c.counts);
        self.add_pairs(&c.tp_pairs);
        self.sum_cf += c.conf_deviation_sum;
        self.predictors += c.predictor_count;
    }

    fn add_pairs(&mut self, pairs: &[MatchedPair]) {
        for MatchedPair { pred, gt } in pairs {
            self.tp_pairs += 1;
            self.sum_cart += 0.5 * (pred.start.dist(gt.start) + pred.end.dist(gt.end));
            self.sum_mp += pred.midpoint().dist(gt.midpoint());
            self.sum_len += (pred.length() - gt.length()).abs();
            self.sum_cf_tp += (pred.confidence - 1.0).abs();
        }
    }

    pub fn counts(&self) -> OutcomeCounts {
        self.counts
    }

    pub fn mae(&self) -> MaeMetrics {
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        MaeMetrics {
            mae_cart: mean(self.sum_cart, self.tp_pairs),
            mae_mp: mean(self.sum_mp, self.tp_pairs),
            mae_len: mean(self.sum_len, self.tp_pairs),
            cf_tp: mean(self.sum_cf_tp, self.tp_pairs),
            cf: mean(self.sum_cf, self.predictors),
        }
    }

    pub fn report(&self) -> MetricsReport {
        let r = retrieval_metrics(&self.counts);
        let m = self.mae();
        MetricsReport {
            counts: self.counts,
            recall: r.recall,
            precision: r.precision,
            f1: r.f1,
            accuracy: r.accuracy,
            mae_cart: m.mae_cart,
            mae_mp: m.mae_mp,
            mae_len: m.mae_len,
            cf: m.cf,
            cf_tp: m.cf_tp,
            ma: 0.0,
            gate_curve: None,
        }
    }
}

/// MAE columns of one classification.
pub fn mae_metrics(c: &Classification) -> MaeMetrics {
    let mut acc = MetricsAccumulator::default();
    acc.add(c);
    acc.mae()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: OutcomeCounts,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub mae_cart: Option<f64>,
    pub mae_mp: Option<f64>,
    pub mae_len: Option<f64>,
    pub cf: Option<f64>,
    pub cf_tp: Option<f64>,
    /// Fraction of ground truth dropped by anchor collisions (0 for dynamic assignment).
    pub ma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_curve: Option<Vec<GatePoint>>,
}

impl MetricsReport {
    /// Aligned text table with the columns F1 Re Pr Acc Cf CfTP ‖·‖ MP L MA.
    pub fn table(&self) -> String {
        let opt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        let header = ["F1", "Re", "Pr", "Acc", "Cf", "CfTP", "‖·‖", "MP", "L", "MA"];
        let row = [
            format!("{:.2}", self.f1),
            format!("{:.2}", self.recall),
            format!("{:.2}", self.precision),
            format!("{:.2}", self.accuracy),
            opt(self.cf),
            opt(self.cf_tp),
            opt(self.mae_cart),
            opt(self.mae_mp),
            opt(self.mae_len),
            format!("{:.0}", self.ma * 100.0),
        ];
        let mut out = String::new();
        for h in header {
            let _ = write!(out, "{h:>7}");
        }
        out.push('\n');
        for v in row {
            let _ = write!(out, "{v:>7}");
        }
        out.push('\n');
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GatePoint {
    pub radius: f64,
    pub tp: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub cf: Option<f64>,
    pub cf_tp: Option<f64>,
    pub mae_mp: Option<f64>,
    pub mae_len: Option<f64>,
}

#[derive(Clone, Debug, Default)]
struct GateSums {
    tp: usize,
    positives: usize,
    gts: usize,
    preds: usize,
    sum_cf: f64,
    sum_cf_tp: f64,
    sum_mp: f64,
    sum_len: f64,
}

/// Circular midpoint gate in image pixels, accumulated over many images.
#[derive(Clone, Debug)]
pub struct GateSweep {
    radii: Vec<f64>,
    threshold: f64,
    sums: Vec<GateSums>,
}

impl GateSweep {
    pub fn new(radii: &[f64], threshold: f64) -> Self {
        Self { radii: radii.to_vec(), threshold, sums: vec![GateSums::default(); radii.len()] }
    }

    /// Greedy nearest-midpoint matching per radius: pairs are consumed in
    /// ascending distance (ties by prediction, then gt index), each side once.
    pub fn add_image(&mut self, preds: &[ImageSegment], gts: &[ImageSegment]) {
        let positives: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].confidence > self.threshold).collect();
        let mut pairs: Vec<(f64, usize, usize)> = positives
            .iter()
            .flat_map(|&pi| {
                let m = preds[pi].midpoint();
                gts.iter().enumerate().map(move |(gi, g)| (m.dist(g.midpoint()), pi, gi))
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        for (r, sums) in self.radii.iter().zip(self.sums.iter_mut()) {
            let mut pred_used = vec![false; preds.len()];
            let mut gt_used = vec![false; gts.len()];
            for &(d, pi, gi) in pairs.iter().take_while(|p| p.0 <= *r) {
                if pred_used[pi] || gt_used[gi] {
                    continue;
                }
                pred_used[pi] = true;
                gt_used[gi] = true;
                let (p, g) = (&preds[pi], &gts[gi]);
                sums.tp += 1;
                sums.sum_mp += d;
                sums.sum_len += (p.length() - g.length()).abs();
                sums.sum_cf_tp += (p.confidence - 1.0).abs();
            }
            sums.positives += positives.len();
            sums.gts += gts.len();
            sums.preds += preds.len();
            sums.sum_cf += preds
                .iter()
                .zip(&pred_used)
                .map(|(p, &tp)| (p.confidence - if tp { 1.0 } else { 0.0 }).abs())
                .sum::<f64>();
        }
    }

    pub fn finish(&self) -> Vec<GatePoint> {
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        self.radii
            .iter()
            .zip(&self.sums)
            .map(|(&radius, s)| {
                let recall = ratio(s.tp, s.gts);
                let precision = ratio(s.tp, s.positives);
                GatePoint {
                    radius,
                    tp: s.tp,
                    recall,
                    precision,
                    f1: f1_score(precision, recall),
                    cf: mean(s.sum_cf, s.preds),
                    cf_tp: mean(s.sum_cf_tp, s.tp),
                    mae_mp: mean(s.sum_mp, s.tp),
                    mae_len: mean(s.sum_len, s.tp),
                }
            })
            .collect()
    }
}

/// Gate curve of a single image.
pub fn gate_sweep(preds: &[ImageSegment], gts: &[ImageSegment], radii: &[f64], threshold: f64) -> Vec<GatePoint> {
    let mut sweep = GateSweep::new(radii, threshold);
    sweep.add_image(preds, gts);
    sweep.finish()
}

/// CSV rendering of a gate curve.
pub fn gate_curve_csv(curve: &[GatePoint]) -> String {
    let opt = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v}"));
    let mut out = String::from("radius,tp,recall,precision,f1,cf,cf_tp,mae_mp,mae_len\n");
    for g in curve {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            g.radius,
            g.tp,
            g.recall,
            g.precision,
            g.f1,
            opt(g.cf),
            opt(g.cf_tp),
            opt(g.mae_mp),
            opt(g.mae_len)
        );
    }
    out
}

/// Cost of matching ground truth to a predictor absent from a prediction file.
const ABSENT_COST: f64 = 1e6;

/// Segments of a record; polylines that are not two-point segments are skipped.
pub fn record_segments(r: &AnnotationRecord, classes: usize) -> Vec<ImageSegment> {
    let segs: Vec<ImageSegment> = r.polylines.iter().filter_map(|p| p.to_segment(classes)).collect();
    if segs.len() != r.polylines.len() {
        warn!("skipping {} records that are not two-point segments", r.polylines.len() - segs.len());
    }
    segs
}

/// Number of classes implied by the labels of a set of records.
pub fn record_classes(records: &[AnnotationRecord]) -> usize {
    records
        .iter()
        .flat_map(|r| &r.polylines)
        .map(|p| p.label_probs.as_ref().map_or(p.label.unwrap_or(0) + 1, Vec::len))
        .max()
        .unwrap_or(1)
}

/// Places prediction segments into a tensor. Segments without a cell go to
/// the cell of their midpoint, without a predictor to the next free slot.
pub fn prediction_tensor(
    segs: &[ImageSegment],
    grid: Grid,
    predictors: usize,
    classes: usize,
    repr: Representation,
) -> Result<(GridTensor, Vec<bool>)> {
    let mut t = GridTensor::zeros(grid, predictors, classes, repr);
    let mut present = vec![false; grid.num_cells() * predictors];
    for seg in segs {
        let cell = seg.cell.unwrap_or_else(|| grid.cell_of(seg.midpoint()));
        grid.check_cell(cell)?;
        let flat = grid.flat_index(cell);
        let slot = match seg.predictor {
            Some(p) if p < predictors => p,
            Some(p) => return Err(Error::invalid(format!("prediction uses predictor {p} of {predictors}"))),
            None => match (0..predictors).find(|&p| !present[flat * predictors + p]) {
                Some(p) => p,
                None => {
                    warn!("cell ({}, {}) holds more than {predictors} predictions; extra dropped", cell.row, cell.col);
                    continue;
                }
            },
        };
        present[flat * predictors + slot] = true;
        let local = SegmentCart {
            s: image_point_to_cell(seg.start, cell, &grid),
            e: image_point_to_cell(seg.end, cell, &grid),
        };
        let coords = Geometry::Cart(local).coords(repr);
        let v = t.slot_mut(flat, slot);
        v[..4].copy_from_slice(&coords);
        for k in 0..classes {
            v[4 + k] = seg.label_probs.get(k).copied().unwrap_or(0.0);
        }
        v[4 + classes] = seg.confidence;
    }
    Ok((t, present))
}

/// Per-cell optimal matching that only lets absent predictors take ground
/// truth left over by the present ones.
pub fn file_assignment(t: &GridTensor, present: &[bool], truth: &GridTruth) -> Result<GridAssignment> {
    let p = t.predictors;
    let mut out = GridAssignment::unassigned(truth.grid.num_cells(), p);
    for (cell, gts) in truth.cells() {
        if gts.is_empty() {
            continue;
        }
        let flat = truth.grid.flat_index(cell);
        let mut costs = Vec::with_capacity(p * gts.len());
        for k in 0..p {
            let g = t.geometry(flat, k);
            for gt in gts {
                costs.push(if present[flat * p + k] {
                    euclidean(&g, &gt.geometry.coords(t.representation))
                } else {
                    ABSENT_COST
                });
            }
        }
        for (k, gi) in hungarian(&CostMatrix::new(p, gts.len(), costs)?)?.pairs {
            out.set(flat, k, Some(gi));
        }
    }
    Ok(out)
}

/// Slots needed by a prediction file: the largest predictor index, or the
/// most segments any cell holds when predictor indices are missing.
pub fn observed_predictors(preds: &[AnnotationRecord], cell_size: usize, classes: usize) -> Result<usize> {
    let mut most = 1;
    for pr in preds {
        let grid = Grid::for_image(pr.image.w, pr.image.h, cell_size)?;
        let mut per_cell = vec![0usize; grid.num_cells()];
        for seg in record_segments(pr, classes) {
            match seg.predictor {
                Some(p) => most = most.max(p + 1),
                None => {
                    let cell = seg.cell.unwrap_or_else(|| grid.cell_of(seg.midpoint()));
                    if grid.check_cell(cell).is_ok() {
                        let n = &mut per_cell[grid.flat_index(cell)];
                        *n += 1;
                        most = most.max(*n);
                    }
                }
            }
        }
    }
    Ok(most)
}

/// Settings for scoring prediction records against annotation records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecordEval {
    pub cell_size: usize,
    pub representation: Representation,
    /// Slots per cell; inferred from the predictions when absent.
    pub predictors: Option<usize>,
    /// Match by anchor instead of per-cell optimal matching.
    pub anchors: Option<AnchorSet>,
    /// Inferred from the labels when absent.
    pub classes: Option<usize>,
    pub threshold: f64,
    pub radii: Vec<f64>,
}

impl Default for RecordEval {
    fn default() -> Self {
        Self {
            cell_size: 8,
            representation: Representation::Mr,
            predictors: None,
            anchors: None,
            classes: None,
            threshold: DEFAULT_THRESHOLD,
            radii: DEFAULT_GATE_RADII.to_vec(),
        }
    }
}

/// Scores prediction records against ground-truth records, image by image.
pub fn evaluate_records(preds: &[AnnotationRecord], truths: &[AnnotationRecord], opts: &RecordEval) -> Result<MetricsReport> {
    if preds.len() != truths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction records for {} ground-truth records",
            preds.len(),
            truths.len()
        )));
    }
    let classes = opts.classes.unwrap_or_else(|| record_classes(preds).max(record_classes(truths)));
    let predictors = match (&opts.anchors, opts.predictors) {
        (Some(set), _) => set.len(),
        (None, Some(p)) => p,
        (None, None) => observed_predictors(preds, opts.cell_size, classes)?,
    };
    if predictors == 0 {
        return Err(Error::invalid("at least one predictor per cell is required"));
    }
    let mut acc = MetricsAccumulator::default();
    let mut sweep = GateSweep::new(&opts.radii, opts.threshold);
    let (mut dropped, mut gts_total) = (0, 0);
    for (pr, tr) in preds.iter().zip(truths) {
        if pr.image != tr.image {
            return Err(Error::ShapeMismatch("prediction and truth image sizes differ".into()));
        }
        let grid = Grid::for_image(tr.image.w, tr.image.h, opts.cell_size)?;
        let truth = discretize(&tr.polylines()?, grid, classes)?;
        let segs = record_segments(pr, classes);
        let (tensor, present) = prediction_tensor(&segs, grid, predictors, classes, opts.representation)?;
        let asg = match &opts.anchors {
            Some(set) => {
                let (asg, d) = anchor_grid_assignment(&truth, set);
                dropped += d;
                asg
            }
            None => file_assignment(&tensor, &present, &truth)?,
        };
        gts_total += truth.segment_count();
        acc.add(&classify_outcomes(&tensor, &truth, &asg, opts.threshold)?);
        let image_gts = truth.segments().map(|g| cell_to_image(g, &grid)).collect::<Result<Vec<_>>>()?;
        sweep.add_image(&segs, &image_gts);
    }
    let mut report = acc.report();
    report.ma = if gts_total > 0 { dropped as f64 / gts_total as f64 } else { 0.0 };
    report.gate_curve = Some(sweep.finish());
    Ok(report)
}
