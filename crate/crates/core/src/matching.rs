//! Per-cell optimal 1-to-1 assignment of predictors to ground truth.

use crate::error::{Error, Result};
use crate::geom::{euclidean, CellSegment, GridTruth, Representation};
use crate::tensor::GridTensor;

/// Rectangular matrix of non-negative assignment costs, predictors × ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} cost matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        for (k, &x) in data.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite { row: k / cols.max(1), col: k % cols.max(1) });
            }
            if x < 0.0 {
                return Err(Error::invalid(format!("negative cost {x} at entry {k}")));
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged cost matrix".into()));
        }
        CostMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// A set of (predictor, gt) pairs and the sum of their costs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Matching {
    /// Predictor-indexed view: `map[p] = Some(gt)` for matched predictors.
    pub fn predictor_map(&self, predictors: usize) -> Vec<Option<usize>> {
        let mut map = vec![None; predictors];
        for &(p, g) in &self.pairs {
            if p < predictors {
                map[p] = Some(g);
            }
        }
        map
    }
}

/// Minimum-cost assignment (Kuhn–Munkres with potentials, O(n³)).
///
/// Rectangular inputs are padded to square with `2 × max entry`; only pairs
/// between real rows and columns are returned, sorted by row.
pub fn hungarian(c: &CostMatrix) -> Result<Matching> {
    if c.rows == 0 || c.cols == 0 {
        return Ok(Matching::default());
    }
    let n = c.rows.max(c.cols);
    let max = c.data.iter().copied().fold(0.0, f64::max);
    let pad = 2.0 * max;
    let cost = |i: usize, j: usize| -> f64 {
        if i < c.rows && j < c.cols {
            c.get(i, j)
        } else {
            pad
        }
    };

    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter_map(|j| {
            let (i, j) = (row_of[j] - 1, j - 1);
            (i < c.rows && j < c.cols).then_some((i, j))
        })
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| c.get(i, j)).sum();
    Ok(Matching { pairs, total_cost })
}

/// Hungarian matching of raw 4-D geometry coordinates.
pub fn assign_coords(preds: &[[f64; 4]], gts: &[[f64; 4]]) -> Matching {
    if preds.is_empty() || gts.is_empty() {
        return Matching::default();
    }
    let data = preds
        .iter()
        .flat_map(|p| gts.iter().map(move |g| euclidean(p, g)))
        .collect();
    // distances of finite coordinates are finite and non-negative
    match CostMatrix::new(preds.len(), gts.len(), data) {
        Ok(c) => hungarian(&c).unwrap_or_default(),
        Err(_) => Matching::default(),
    }
}

/// Matches a cell's predictions to its ground truth by geometric distance
/// in their shared representation.
pub fn dynamic_assign(preds: &[CellSegment], gts: &[CellSegment]) -> Result<Matching> {
    let Some(first) = preds.first().or(gts.first()) else {
        return Ok(Matching::default());
    };
    let repr = first.geometry.representation();
    if let Some(bad) = preds.iter().chain(gts).find(|s| s.geometry.representation() != repr) {
        return Err(Error::RepresentationMismatch {
            expected: repr.to_string(),
            found: bad.geometry.representation().to_string(),
        });
    }
    let coords = |s: &[CellSegment]| s.iter().map(|x| x.geometry.coords(repr)).collect::<Vec<_>>();
    let gt_coords = coords(gts);
    let data: Vec<f64> =
        coords(preds).iter().flat_map(|p| gt_coords.iter().map(move |g| euclidean(p, g))).collect();
    hungarian(&CostMatrix::new(preds.len(), gts.len(), data)?)
}

/// Predictor→gt assignment for every cell of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GridAssignment {
    pub predictors: usize,
    cells: Vec<Vec<Option<usize>>>,
}

impl GridAssignment {
    pub fn new(cells: Vec<Vec<Option<usize>>>, predictors: usize) -> Result<Self> {
        if let Some(c) = cells.iter().find(|c| c.len() != predictors) {
            return Err(Error::ShapeMismatch(format!(
                "cell assignment has {} slots, expected {predictors}",
                c.len()
            )));
        }
        Ok(Self { predictors, cells })
    }

    pub fn unassigned(num_cells: usize, predictors: usize) -> Self {
        Self { predictors, cells: vec![vec![None; predictors]; num_cells] }
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, flat: usize) -> &[Option<usize>] {
        &self.cells[flat]
    }

    pub fn set(&mut self, flat: usize, predictor: usize, gt: Option<usize>) {
        self.cells[flat][predictor] = gt;
    }

    pub fn assigned_count(&self) -> usize {
        self.cells.iter().flatten().filter(|a| a.is_some()).count()
    }
}

/// Dynamic assignment over a whole grid: every cell is matched independently.
pub fn dynamic_grid_assignment(preds: &GridTensor, truth: &GridTruth) -> Result<GridAssignment> {
    if preds.grid != truth.grid {
        return Err(Error::ShapeMismatch("prediction and truth grids differ".into()));
    }
    let repr: Representation = preds.representation;
    let mut out = GridAssignment::unassigned(preds.grid.num_cells(), preds.predictors);
    for (cell, gts) in truth.cells() {
        if gts.is_empty() {
            continue;
        }
        let flat = preds.grid.flat_index(cell);
        let p: Vec<[f64; 4]> = (0..preds.predictors).map(|k| preds.geometry(flat, k)).collect();
        let g: Vec<[f64; 4]> = gts.iter().map(|s| s.geometry.coords(repr)).collect();
        for (pi, gi) in assign_coords(&p, &g).pairs {
            out.set(flat, pi, Some(gi));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{CellIndex, Geometry, Point2, SegmentMR};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn zero_diagonal() {
        let m = hungarian(&CostMatrix::from_rows(&[vec![0.0, 9.0], vec![9.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total_cost, 0.0);
    }

    #[test]
    fn single_row_picks_argmin() {
        let m = hungarian(&CostMatrix::from_rows(&[vec![5.0, 2.0, 7.0]]).unwrap()).unwrap();
        assert_eq!(m.pairs, vec![(0, 1)]);
        assert_eq!(m.total_cost, 2.0);
    }

    #[test]
    fn tall_matrix_matches_columns() {
        let rows = [vec![4.0], vec![1.0], vec![3.0]];
        let m = hungarian(&CostMatrix::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(m.pairs, vec![(1, 0)]);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            CostMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
        assert!(CostMatrix::new(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn matches_brute_force_on_small_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=5 {
            let perms = permutations(n);
            for _ in 0..50 {
                let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0..20) as f64).collect();
                let c = CostMatrix::new(n, n, data).unwrap();
                let best = perms
                    .iter()
                    .map(|p| p.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                let m = hungarian(&c).unwrap();
                assert_eq!(m.total_cost, best);
                assert_eq!(m.pairs.len(), n);
            }
        }
    }

    fn seg(m: (f64, f64), d: (f64, f64)) -> CellSegment {
        CellSegment {
            geometry: Geometry::Mr(SegmentMR { m: Point2::new(m.0, m.1), d: Point2::new(d.0, d.1) }),
            label_probs: vec![1.0],
            confidence: 1.0,
            cell: CellIndex { row: 0, col: 0 },
        }
    }

    #[test]
    fn dynamic_assign_examples() {
        let preds: Vec<_> = (0..5).map(|k| seg((0.1 * k as f64, 0.9), (1.0, 0.0))).collect();
        assert!(dynamic_assign(&preds, &[]).unwrap().pairs.is_empty());

        let mut preds = preds;
        preds[3] = seg((0.5, 0.2), (0.0, -1.0));
        let m = dynamic_assign(&preds, &[seg((0.5, 0.2), (0.0, -1.0))]).unwrap();
        assert_eq!(m.pairs, vec![(3, 0)]);
        assert_eq!(m.total_cost, 0.0);

        let mut cart = seg((0.5, 0.5), (0.0, 0.0));
        cart.geometry = Geometry::Cart(cart.geometry.to_cart());
        assert!(matches!(
            dynamic_assign(&preds, &[cart]),
            Err(Error::RepresentationMismatch { .. })
        ));
    }
}
