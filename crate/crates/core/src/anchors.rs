//! Uniform and k-means anchor sets, and static assignment of ground truth to anchors.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{euclidean, Geometry, GridTruth, Point2, SegmentCart, SegmentMR, Space};
use crate::matching::GridAssignment;

/// Midpoint used to complete direction-only anchors.
const DEFAULT_MIDPOINT: Point2 = Point2::new(0.5, 0.5);
/// Direction used to complete midpoint-only anchors.
const DEFAULT_DIRECTION: Point2 = Point2::new(1.0, 0.0);
/// Directions tried per midpoint in the uniform MR lattice.
const MR_DIRECTIONS: usize = 8;

/// One representative coordinate vector per predictor in a feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AnchorFile", into = "AnchorFile")]
pub struct AnchorSet {
    space: Space,
    anchors: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct AnchorFile {
    space: Space,
    #[serde(rename = "P")]
    p: usize,
    anchors: Vec<Vec<f64>>,
}

impl TryFrom<AnchorFile> for AnchorSet {
    type Error = Error;
    fn try_from(f: AnchorFile) -> Result<Self> {
        if f.p != f.anchors.len() {
            return Err(Error::invalid(format!(
                "anchor file declares P = {} but lists {} anchors",
                f.p,
                f.anchors.len()
            )));
        }
        AnchorSet::new(f.space, f.anchors)
    }
}

impl From<AnchorSet> for AnchorFile {
    fn from(a: AnchorSet) -> Self {
        AnchorFile { space: a.space, p: a.anchors.len(), anchors: a.anchors }
    }
}

impl AnchorSet {
    pub fn new(space: Space, anchors: Vec<Vec<f64>>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::invalid("an anchor set needs at least one anchor"));
        }
        let tol = 1e-9;
        for (i, a) in anchors.iter().enumerate() {
            if a.len() != space.dim() {
                return Err(Error::invalid(format!(
                    "anchor {i} has {} coordinates, space {space} needs {}",
                    a.len(),
                    space.dim()
                )));
            }
            for (&x, &(lo, hi)) in a.iter().zip(space.bounds()) {
                if !x.is_finite() || x < lo - tol || x > hi + tol {
                    return Err(Error::invalid(format!("anchor {i} coordinate {x} outside [{lo}, {hi}]")));
                }
            }
        }
        Ok(Self { space, anchors })
    }

    pub fn space(&self) -> Space {
        self.space
    }

    /// Predictor count.
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    /// Full midpoint + direction geometry of anchor `i`; components the
    /// space does not carry take fixed defaults.
    pub fn geometry(&self, i: usize) -> SegmentMR {
        let a = &self.anchors[i];
        match self.space {
            Space::Mr => SegmentMR { m: Point2::new(a[0], a[1]), d: Point2::new(a[2], a[3]) },
            Space::Mp => SegmentMR { m: Point2::new(a[0], a[1]), d: DEFAULT_DIRECTION },
            Space::Dir => SegmentMR { m: DEFAULT_MIDPOINT, d: Point2::new(a[0], a[1]) },
            Space::Cart => crate::geom::cart_to_mr(SegmentCart {
                s: Point2::new(a[0], a[1]),
                e: Point2::new(a[2], a[3]),
            }),
        }
    }

    fn distance_to(&self, i: usize, coords: &[f64]) -> f64 {
        euclidean(&self.anchors[i], coords)
    }
}

/// Midpoints on a `⌈√n⌉`-column lattice of cell centers, row-major, first `n`.
fn midpoint_lattice(n: usize) -> Vec<Point2> {
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .take(n)
        .map(|(r, c)| Point2::new((c as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64))
        .collect()
}

fn unit_directions(n: usize) -> Vec<Point2> {
    (0..n)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / n as f64;
            // snap the cardinal directions so they are exact
            let snap = |x: f64| if x.abs() < 1e-15 { 0.0 } else { x };
            Point2::new(snap(t.cos()), snap(t.sin()))
        })
        .collect()
}

/// Evenly spread anchors for `p` predictors.
pub fn uniform_anchors(space: Space, p: usize) -> Result<AnchorSet> {
    if p == 0 {
        return Err(Error::invalid("uniform anchors need P >= 1"));
    }
    let anchors = match space {
        Space::Mp => midpoint_lattice(p).into_iter().map(|m| vec![m.u, m.v]).collect(),
        Space::Dir => unit_directions(p).into_iter().map(|d| vec![d.u, d.v]).collect(),
        Space::Mr | Space::Cart => {
            let dirs = unit_directions(p.min(MR_DIRECTIONS));
            let mids = midpoint_lattice(p.div_ceil(dirs.len()));
            mids.iter()
                .flat_map(|&m| dirs.iter().map(move |&d| SegmentMR { m, d }))
                .take(p)
                .map(|r| {
                    if space == Space::Mr {
                        vec![r.m.u, r.m.v, r.d.u, r.d.v]
                    } else {
                        // the endpoints of off-center MR anchors may leave the cell
                        let c = crate::geom::mr_to_cart_unchecked(r);
                        [c.s.u, c.s.v, c.e.u, c.e.v].iter().map(|x| x.clamp(0.0, 1.0)).collect()
                    }
                })
                .collect()
        }
    };
    AnchorSet::new(space, anchors)
}

/// Result of a Lloyd run.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Inertia after every completed iteration.
    pub inertia_history: Vec<f64>,
}

pub const KMEANS_MAX_ITERATIONS: usize = 200;
pub const KMEANS_TOLERANCE: f64 = 1e-9;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops when an iteration improves inertia by less than [`KMEANS_TOLERANCE`]
/// or after [`KMEANS_MAX_ITERATIONS`]. A cluster that empties is reseeded
/// at the point farthest from its own centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::invalid("k-means needs k >= 1"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!("k-means with k = {k} needs at least {k} points, got {}", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::ShapeMismatch("k-means points differ in dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Vec<f64>> = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut assignments = vec![0usize; points.len()];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITERATIONS {
        for (a, p) in assignments.iter_mut().zip(points) {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            *a = best;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut empty = Vec::new();
        for j in 0..k {
            if counts[j] == 0 {
                empty.push(j);
            } else {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }

        let inertia: f64 = points.iter().zip(&assignments).map(|(p, &a)| sq_dist(p, &centroids[a])).sum();
        let improvement = history.last().map(|&prev: &f64| prev - inertia);
        history.push(inertia);

        for j in empty {
            let far = points
                .iter()
                .zip(&assignments)
                .enumerate()
                .max_by(|(_, (p, &a)), (_, (q, &b))| {
                    sq_dist(p, &centroids[a]).total_cmp(&sq_dist(q, &centroids[b]))
                })
                .map(|(i, _)| i)
                .unwrap_or(0);
            centroids[j] = points[far].clone();
        }
        if matches!(improvement, Some(d) if d < KMEANS_TOLERANCE) {
            break;
        }
    }
    Ok(KMeans { centroids, assignments, inertia_history: history })
}

/// Data-driven anchors: k-means over the segments' coordinates in `space`.
pub fn kmeans_anchors(segments: &[Geometry], k: usize, space: Space, seed: u64) -> Result<AnchorSet> {
    let points: Vec<Vec<f64>> = segments.iter().map(|g| g.space_coords(space)).collect();
    let km = kmeans(&points, k, seed)?;
    AnchorSet::new(space, km.centroids)
}

/// Static assignment of one cell's ground truth to anchors.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnchorAssignment {
    /// `slots[anchor] = Some(gt index)`.
    pub slots: Vec<Option<usize>>,
    /// Ground-truth indices that lost their anchor to a closer segment.
    pub dropped: Vec<usize>,
}

/// Each segment claims its nearest anchor (lower index on ties); an anchor
/// keeps only its closest claimant (lower gt index on ties) and every other
/// claimant is dropped.
pub fn assign_to_anchors(cell_gts: &[Geometry], a: &AnchorSet) -> AnchorAssignment {
    let mut best: Vec<Option<(f64, usize)>> = vec![None; a.len()];
    let mut claims = Vec::with_capacity(cell_gts.len());
    for (gi, g) in cell_gts.iter().enumerate() {
        let coords = g.space_coords(a.space());
        let (mut anchor, mut dist) = (0, f64::INFINITY);
        for ai in 0..a.len() {
            let d = a.distance_to(ai, &coords);
            if d < dist {
                dist = d;
                anchor = ai;
            }
        }
        claims.push(anchor);
        match best[anchor] {
            Some((d, _)) if d <= dist => {}
            _ => best[anchor] = Some((dist, gi)),
        }
    }
    let slots: Vec<Option<usize>> = best.iter().map(|b| b.map(|(_, g)| g)).collect();
    let dropped = claims
        .iter()
        .enumerate()
        .filter(|&(gi, &ai)| slots[ai] != Some(gi))
        .map(|(gi, _)| gi)
        .collect();
    AnchorAssignment { slots, dropped }
}

/// Anchor assignment of every cell in an image, plus the dropped count.
pub fn anchor_grid_assignment(truth: &GridTruth, a: &AnchorSet) -> (GridAssignment, usize) {
    let grid = truth.grid;
    let mut out = GridAssignment::unassigned(grid.num_cells(), a.len());
    let mut dropped = 0;
    for (cell, gts) in truth.cells() {
        if gts.is_empty() {
            continue;
        }
        let geoms: Vec<Geometry> = gts.iter().map(|s| s.geometry).collect();
        let asg = assign_to_anchors(&geoms, a);
        dropped += asg.dropped.len();
        let flat = grid.flat_index(cell);
        for (k, slot) in asg.slots.into_iter().enumerate() {
            out.set(flat, k, slot);
        }
    }
    (out, dropped)
}

/// Fraction of ground-truth segments that lose their anchor, averaged per
/// image (images without ground truth are skipped) and then over the dataset.
pub fn ma_statistic(dataset: &[GridTruth], a: &AnchorSet) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("MA statistic of an empty dataset"));
    }
    let fractions: Vec<f64> = dataset
        .iter()
        .filter(|t| t.segment_count() > 0)
        .map(|t| anchor_grid_assignment(t, a).1 as f64 / t.segment_count() as f64)
        .collect();
    if fractions.is_empty() {
        return Ok(0.0);
    }
    Ok(fractions.iter().sum::<f64>() / fractions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{CellIndex, CellSegment, Grid};

    fn mr(m: (f64, f64), d: (f64, f64)) -> Geometry {
        Geometry::Mr(SegmentMR { m: Point2::new(m.0, m.1), d: Point2::new(d.0, d.1) })
    }

    #[test]
    fn uniform_dir_four_gives_cardinals() {
        let a = uniform_anchors(Space::Dir, 4).unwrap();
        assert_eq!(
            a.anchors(),
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]]
        );
        assert_eq!(a.geometry(2).m, Point2::new(0.5, 0.5));
    }

    #[test]
    fn uniform_mp_one_is_cell_center() {
        let a = uniform_anchors(Space::Mp, 1).unwrap();
        assert_eq!(a.anchors(), &[vec![0.5, 0.5]]);
        assert_eq!(a.geometry(0).d, Point2::new(1.0, 0.0));
    }

    #[test]
    fn uniform_mr_24_distinct() {
        let a = uniform_anchors(Space::Mr, 24).unwrap();
        assert_eq!(a.len(), 24);
        for i in 0..24 {
            for j in i + 1..24 {
                assert!(euclidean(&a.anchors()[i], &a.anchors()[j]) > 0.0, "{i} vs {j}");
            }
        }
        assert!(uniform_anchors(Space::Mr, 0).is_err());
        assert_eq!(uniform_anchors(Space::Cart, 5).unwrap().len(), 5);
    }

    #[test]
    fn anchor_json_round_trip_and_validation() {
        let a = uniform_anchors(Space::Mr, 6).unwrap();
        let json = serde_json::to_string(&a).unwrap();
        assert!(json.contains("\"P\":6"));
        assert!(json.contains("\"space\":\"mr\""));
        let back: AnchorSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
        assert!(serde_json::from_str::<AnchorSet>(r#"{"space":"mp","P":2,"anchors":[[0.5,0.5]]}"#).is_err());
        assert!(serde_json::from_str::<AnchorSet>(r#"{"space":"mp","P":1,"anchors":[[1.5,0.5]]}"#).is_err());
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64 * 0.1, (i * i) as f64 * 0.01]).collect();
        let km = kmeans(&pts, 1, 3).unwrap();
        let mean_u = pts.iter().map(|p| p[0]).sum::<f64>() / 7.0;
        let mean_v = pts.iter().map(|p| p[1]).sum::<f64>() / 7.0;
        assert!((km.centroids[0][0] - mean_u).abs() < 1e-12);
        assert!((km.centroids[0][1] - mean_v).abs() < 1e-12);
        assert!(kmeans(&pts, 8, 0).is_err());
        assert!(kmeans(&pts, 0, 0).is_err());
    }

    #[test]
    fn kmeans_is_deterministic_per_seed() {
        let pts: Vec<Vec<f64>> = (0..40).map(|i| vec![((i * 37) % 17) as f64, ((i * 11) % 7) as f64]).collect();
        assert_eq!(kmeans(&pts, 4, 9).unwrap(), kmeans(&pts, 4, 9).unwrap());
    }

    #[test]
    fn kmeans_with_duplicate_points_keeps_k_centroids() {
        let pts = vec![vec![0.0, 0.0]; 5].into_iter().chain([vec![1.0, 1.0]]).collect::<Vec<_>>();
        let km = kmeans(&pts, 3, 1).unwrap();
        assert_eq!(km.centroids.len(), 3);
    }

    #[test]
    fn single_gt_takes_nearest_anchor() {
        let a = uniform_anchors(Space::Dir, 4).unwrap();
        let asg = assign_to_anchors(&[mr((0.3, 0.3), (0.1, -0.9))], &a);
        assert_eq!(asg.slots, vec![None, None, None, Some(0)]);
        assert!(asg.dropped.is_empty());
    }

    #[test]
    fn identical_gts_collide_on_one_anchor() {
        let a = uniform_anchors(Space::Mr, 1).unwrap();
        let g = mr((0.5, 0.5), (1.0, 0.0));
        let asg = assign_to_anchors(&[g, g], &a);
        assert_eq!(asg.slots, vec![Some(0)]);
        assert_eq!(asg.dropped, vec![1]);
    }

    #[test]
    fn closer_segment_wins_contested_anchor() {
        let a = uniform_anchors(Space::Dir, 4).unwrap();
        let far = mr((0.5, 0.5), (0.7, 0.3));
        let near = mr((0.5, 0.5), (0.95, 0.0));
        let asg = assign_to_anchors(&[far, near], &a);
        assert_eq!(asg.slots[0], Some(1));
        assert_eq!(asg.dropped, vec![0]);
    }

    #[test]
    fn equidistant_gt_takes_lower_anchor() {
        let a = AnchorSet::new(Space::Mp, vec![vec![0.25, 0.5], vec![0.75, 0.5]]).unwrap();
        let asg = assign_to_anchors(&[mr((0.5, 0.5), (1.0, 0.0))], &a);
        assert_eq!(asg.slots, vec![Some(0), None]);
    }

    fn truth_with(cells: &[(usize, Vec<Geometry>)]) -> GridTruth {
        let grid = Grid::new(1, 4, 8).unwrap();
        let mut t = GridTruth::empty(grid);
        for (col, geoms) in cells {
            for g in geoms {
                t.push(CellSegment {
                    geometry: *g,
                    label_probs: vec![1.0],
                    confidence: 1.0,
                    cell: CellIndex { row: 0, col: *col },
                })
                .unwrap();
            }
        }
        t
    }

    #[test]
    fn ma_examples() {
        let a = uniform_anchors(Space::Mr, 1).unwrap();
        let g = mr((0.5, 0.5), (1.0, 0.0));
        let sparse = truth_with(&[(0, vec![g]), (2, vec![g])]);
        assert_eq!(ma_statistic(&[sparse], &a).unwrap(), 0.0);
        let crowded = truth_with(&[(1, vec![g, mr((0.4, 0.5), (0.8, 0.0))])]);
        assert_eq!(ma_statistic(&[crowded], &a).unwrap(), 0.5);
        assert!(ma_statistic(&[], &a).is_err());
    }
}
