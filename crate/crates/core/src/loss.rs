//! Composite training loss: geometric distance, confidence and classification
//! terms, with analytic gradients with respect to every predictor output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{euclidean, GridTruth};
use crate::matching::GridAssignment;
use crate::tensor::GridTensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub geom: f64,
    /// Confidence weight for assigned predictors.
    pub conf1: f64,
    /// Confidence weight for unassigned predictors.
    pub conf0: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { geom: 1.0, conf1: 1.0, conf0: 1.0, class: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("geom", self.geom), ("conf1", self.conf1), ("conf0", self.conf0), ("class", self.class)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Loss terms of one evaluation. `conf` already carries its weights;
/// `geom` and `cls` are unweighted sums.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub geom: f64,
    pub conf: f64,
    pub cls: f64,
    /// Weighted contribution of each predictor, indexed `cell * P + predictor`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_predictor: Vec<f64>,
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

fn validate(preds: &GridTensor, truth: &GridTruth, assignment: &GridAssignment, w: &LossWeights) -> Result<()> {
    w.validate()?;
    if preds.grid != truth.grid {
        return Err(Error::ShapeMismatch("prediction and truth grids differ".into()));
    }
    if assignment.num_cells() != preds.grid.num_cells() || assignment.predictors != preds.predictors {
        return Err(Error::ShapeMismatch(format!(
            "assignment covers {} cells x {} predictors, predictions have {} x {}",
            assignment.num_cells(),
            assignment.predictors,
            preds.grid.num_cells(),
            preds.predictors
        )));
    }
    for (cell, gts) in truth.cells() {
        let flat = truth.grid.flat_index(cell);
        let mut seen = vec![false; gts.len()];
        for g in assignment.cell(flat).iter().flatten() {
            if *g >= gts.len() {
                return Err(Error::invalid(format!(
                    "cell ({}, {}) assigns gt {g} but holds {} segments",
                    cell.row,
                    cell.col,
                    gts.len()
                )));
            }
            if std::mem::replace(&mut seen[*g], true) {
                return Err(Error::invalid(format!(
                    "cell ({}, {}) assigns gt {g} to more than one predictor",
                    cell.row, cell.col
                )));
            }
        }
        if let Some(bad) = gts.iter().find(|s| s.label_probs.len() != preds.classes) {
            return Err(Error::ShapeMismatch(format!(
                "gt label vector has {} classes, predictions have {}",
                bad.label_probs.len(),
                preds.classes
            )));
        }
    }
    Ok(())
}

/// Loss and gradient in one pass; the gradient shares the tensor layout.
pub fn loss_and_gradients(
    preds: &GridTensor,
    truth: &GridTruth,
    assignment: &GridAssignment,
    w: &LossWeights,
) -> Result<(LossBreakdown, GridTensor)> {
    validate(preds, truth, assignment, w)?;
    let repr = preds.representation;
    let classes = preds.classes;
    let mut grad = GridTensor::zeros(preds.grid, preds.predictors, classes, repr);
    let mut per_predictor = Vec::with_capacity(preds.grid.num_cells() * preds.predictors);
    let (mut geom, mut conf, mut cls, mut total) =
        (CompensatedSum::default(), CompensatedSum::default(), CompensatedSum::default(), CompensatedSum::default());

    for (cell, gts) in truth.cells() {
        let flat = truth.grid.flat_index(cell);
        for p in 0..preds.predictors {
            let x = preds.slot(flat, p);
            let c = x[4 + classes];
            let g = grad.slot_mut(flat, p);
            let contribution = match assignment.cell(flat)[p] {
                Some(gi) => {
                    let gt = &gts[gi];
                    let target = gt.geometry.coords(repr);
                    let d = euclidean(&x[..4], &target);
                    if d > 0.0 {
                        for k in 0..4 {
                            g[k] = w.geom * (x[k] - target[k]) / d;
                        }
                    }
                    let mut sq = 0.0;
                    for k in 0..classes {
                        let diff = x[4 + k] - gt.label_probs[k];
                        sq += diff * diff;
                        g[4 + k] = 2.0 * w.class * diff;
                    }
                    let cterm = w.conf1 * (c - 1.0) * (c - 1.0);
                    g[4 + classes] = 2.0 * w.conf1 * (c - 1.0);
                    geom.add(d);
                    cls.add(sq);
                    conf.add(cterm);
                    w.geom * d + cterm + w.class * sq
                }
                None => {
                    let cterm = w.conf0 * c * c;
                    g[4 + classes] = 2.0 * w.conf0 * c;
                    conf.add(cterm);
                    cterm
                }
            };
            total.add(contribution);
            per_predictor.push(contribution);
        }
    }

    let breakdown = LossBreakdown {
        total: total.value(),
        geom: geom.value(),
        conf: conf.value(),
        cls: cls.value(),
        per_predictor,
    };
    Ok((breakdown, grad))
}

pub fn composite_loss(
    preds: &GridTensor,
    truth: &GridTruth,
    assignment: &GridAssignment,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    loss_and_gradients(preds, truth, assignment, w).map(|(l, _)| l)
}

/// `∂ total / ∂ output` for every predictor value.
pub fn loss_gradients(
    preds: &GridTensor,
    truth: &GridTruth,
    assignment: &GridAssignment,
    w: &LossWeights,
) -> Result<GridTensor> {
    loss_and_gradients(preds, truth, assignment, w).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{CellIndex, CellSegment, Geometry, Grid, Point2, Representation, SegmentMR};

    fn setup(conf: f64) -> (GridTensor, GridTruth, GridAssignment) {
        let grid = Grid::new(1, 1, 8).unwrap();
        let gt = SegmentMR { m: Point2::new(0.5, 0.4), d: Point2::new(0.2, -0.6) };
        let mut truth = GridTruth::empty(grid);
        truth
            .push(CellSegment {
                geometry: Geometry::Mr(gt),
                label_probs: vec![0.0, 1.0],
                confidence: 1.0,
                cell: CellIndex { row: 0, col: 0 },
            })
            .unwrap();
        let mut t = GridTensor::zeros(grid, 2, 2, Representation::Mr);
        t.slot_mut(0, 0).copy_from_slice(&[0.5, 0.4, 0.2, -0.6, 0.0, 1.0, conf]);
        let mut a = GridAssignment::unassigned(1, 2);
        a.set(0, 0, Some(0));
        (t, truth, a)
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        let (t, truth, a) = setup(1.0);
        let (l, g) = loss_and_gradients(&t, &truth, &a, &LossWeights::default()).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn no_ground_truth_and_zero_confidence_is_free() {
        let grid = Grid::new(2, 2, 8).unwrap();
        let t = GridTensor::zeros(grid, 3, 2, Representation::Cart);
        let l = composite_loss(&t, &GridTruth::empty(grid), &GridAssignment::unassigned(4, 3), &LossWeights::default())
            .unwrap();
        assert_eq!(l.total, 0.0);
        assert_eq!(l.per_predictor.len(), 12);
    }

    #[test]
    fn half_confidence_costs_a_quarter_either_way() {
        let w = LossWeights::default();
        let (t, truth, a) = setup(0.5);
        assert_eq!(composite_loss(&t, &truth, &a, &w).unwrap().conf, 0.25);
        let mut t2 = t.clone();
        t2.slot_mut(0, 1)[6] = 0.5;
        t2.slot_mut(0, 0)[6] = 0.0;
        let mut a2 = GridAssignment::unassigned(1, 2);
        a2.set(0, 0, None);
        let l = composite_loss(&t2, &GridTruth::empty(truth.grid), &a2, &w).unwrap();
        assert_eq!(l.conf, 0.25);
    }

    #[test]
    fn unassigned_geometry_gradient_is_zero() {
        let (mut t, truth, a) = setup(0.3);
        t.slot_mut(0, 1).copy_from_slice(&[0.1, 0.9, 0.5, 0.5, 0.3, 0.7, 0.8]);
        let g = loss_gradients(&t, &truth, &a, &LossWeights::default()).unwrap();
        assert_eq!(&g.slot(0, 1)[..6], &[0.0; 6]);
        assert!((g.slot(0, 1)[6] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn doubling_conf0_doubles_unassigned_share() {
        let (mut t, truth, a) = setup(1.0);
        t.slot_mut(0, 1)[6] = 0.7;
        let base = composite_loss(&t, &truth, &a, &LossWeights::default()).unwrap();
        let doubled = composite_loss(&t, &truth, &a, &LossWeights { conf0: 2.0, ..Default::default() }).unwrap();
        assert!((doubled.conf - 2.0 * base.conf).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_assignments_and_weights() {
        let (t, truth, mut a) = setup(1.0);
        assert!(composite_loss(&t, &truth, &a, &LossWeights { geom: -1.0, ..Default::default() }).is_err());
        a.set(0, 1, Some(0));
        assert!(composite_loss(&t, &truth, &a, &LossWeights::default()).is_err());
        a.set(0, 1, Some(3));
        assert!(composite_loss(&t, &truth, &a, &LossWeights::default()).is_err());
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let mut s = CompensatedSum::default();
        for x in [1e16, 1.0, -1e16] {
            s.add(x);
        }
        assert_eq!(s.value(), 1.0);
    }
}
