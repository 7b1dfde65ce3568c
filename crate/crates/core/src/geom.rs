//! Polylines, the cell grid and the two cell-local segment parameterizations.
//!
//! Image coordinates are `(u, v)` pixels with the origin in the top-left
//! corner and `v` growing downward. Cell-local coordinates are normalized so
//! that a cell spans `[0, 1]²`, again with the origin in its top-left corner.

use std::fmt;
use std::ops::{Add, Mul, Sub};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum separation between consecutive polyline vertices, in pixels.
pub const MIN_VERTEX_SEPARATION: f64 = 1e-9;
/// Split pieces shorter than this (in cell units) are discarded.
pub const SLIVER_LENGTH: f64 = 1e-6;
/// Slack allowed when reconstructing endpoints from midpoint + direction.
pub const GEOMETRY_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub u: f64,
    pub v: f64,
}

impl Point2 {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn norm(self) -> f64 {
        self.u.hypot(self.v)
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.u * other.u + self.v * other.v
    }

    pub fn is_finite(self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    pub fn lerp(self, other: Point2, t: f64) -> Point2 {
        self + (other - self) * t
    }

    /// Orientation angle of the vector in radians, `atan2(v, u)`.
    pub fn angle(self) -> f64 {
        self.v.atan2(self.u)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.u + rhs.u, self.v + rhs.v)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.u - rhs.u, self.v - rhs.v)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.u * rhs, self.v * rhs)
    }
}

/// Ordered chain of image-space vertices; the order encodes travel direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    points: Vec<Point2>,
    label: Option<usize>,
}

impl Polyline {
    pub fn new(points: Vec<Point2>, label: Option<usize>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGeometry(format!(
                "polyline needs at least 2 points, got {}",
                points.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::InvalidGeometry(format!("non-finite vertex {p:?}")));
        }
        for (i, w) in points.windows(2).enumerate() {
            if w[0].dist(w[1]) <= MIN_VERTEX_SEPARATION {
                return Err(Error::InvalidGeometry(format!(
                    "vertices {i} and {} coincide",
                    i + 1
                )));
            }
        }
        Ok(Self { points, label })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    pub fn reversed(&self) -> Polyline {
        let mut points = self.points.clone();
        points.reverse();
        Polyline { points, label: self.label }
    }
}

/// The `rows × cols` lattice of square cells, `cell_size` pixels per side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub cell_size: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, cell_size: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || cell_size == 0 {
            return Err(Error::invalid(format!(
                "grid needs rows, cols and cell_size >= 1 (got {rows}x{cols}, cell {cell_size})"
            )));
        }
        Ok(Self { rows, cols, cell_size })
    }

    /// Grid covering a `width × height` image; both must be multiples of `cell_size`.
    pub fn for_image(width: usize, height: usize, cell_size: usize) -> Result<Self> {
        if cell_size == 0 || !width.is_multiple_of(cell_size) || !height.is_multiple_of(cell_size) {
            return Err(Error::ShapeMismatch(format!(
                "image {width}x{height} is not divisible into {cell_size}px cells"
            )));
        }
        Grid::new(height / cell_size, width / cell_size, cell_size)
    }

    pub fn width(&self) -> f64 {
        (self.cols * self.cell_size) as f64
    }

    pub fn height(&self) -> f64 {
        (self.rows * self.cell_size) as f64
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn flat_index(&self, cell: CellIndex) -> usize {
        cell.row * self.cols + cell.col
    }

    pub fn cells(&self) -> impl Iterator<Item = CellIndex> + '_ {
        (0..self.rows).flat_map(move |row| (0..self.cols).map(move |col| CellIndex { row, col }))
    }

    pub fn check_cell(&self, cell: CellIndex) -> Result<()> {
        if cell.row >= self.rows || cell.col >= self.cols {
            return Err(Error::CellOutOfRange {
                row: cell.row,
                col: cell.col,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }

    /// Cell owning an image point under the half-open `[k, k+1)` convention,
    /// with the far image border folded into the last row/column.
    pub fn cell_of(&self, p: Point2) -> CellIndex {
        let cs = self.cell_size as f64;
        let col = ((p.u / cs).floor().max(0.0) as usize).min(self.cols - 1);
        let row = ((p.v / cs).floor().max(0.0) as usize).min(self.rows - 1);
        CellIndex { row, col }
    }

    fn contains(&self, p: Point2) -> bool {
        let tol = GEOMETRY_TOLERANCE;
        p.u >= -tol && p.v >= -tol && p.u <= self.width() + tol && p.v <= self.height() + tol
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
}

/// Line parameterization the predictor regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// Ordered start and end point.
    Cart,
    /// Midpoint plus full displacement vector.
    Mr,
}

impl Representation {
    pub fn space(self) -> Space {
        match self {
            Representation::Cart => Space::Cart,
            Representation::Mr => Space::Mr,
        }
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::Cart => "cart",
            Representation::Mr => "mr",
        })
    }
}

impl FromStr for Representation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cart" | "se" => Ok(Representation::Cart),
            "mr" => Ok(Representation::Mr),
            other => Err(Error::invalid(format!("unknown representation '{other}'"))),
        }
    }
}

/// Feature space used for distances and anchor clustering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    /// 4-D `(s, e)`.
    Cart,
    /// 4-D `(m, d)`.
    Mr,
    /// 2-D midpoint only.
    Mp,
    /// 2-D direction only.
    Dir,
}

impl Space {
    pub fn dim(self) -> usize {
        match self {
            Space::Cart | Space::Mr => 4,
            Space::Mp | Space::Dir => 2,
        }
    }

    /// Per-coordinate valid range of the space.
    pub fn bounds(self) -> &'static [(f64, f64)] {
        const UNIT: (f64, f64) = (0.0, 1.0);
        const SIGNED: (f64, f64) = (-1.0, 1.0);
        match self {
            Space::Cart => &[UNIT, UNIT, UNIT, UNIT],
            Space::Mr => &[UNIT, UNIT, SIGNED, SIGNED],
            Space::Mp => &[UNIT, UNIT],
            Space::Dir => &[SIGNED, SIGNED],
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Cart => "cart",
            Space::Mr => "mr",
            Space::Mp => "mp",
            Space::Dir => "dir",
        })
    }
}

impl FromStr for Space {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cart" | "se" => Ok(Space::Cart),
            "mr" => Ok(Space::Mr),
            "mp" => Ok(Space::Mp),
            "dir" => Ok(Space::Dir),
            other => Err(Error::invalid(format!("unknown space '{other}'"))),
        }
    }
}

/// Cell-local segment as an ordered start/end pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentCart {
    pub s: Point2,
    pub e: Point2,
}

/// Cell-local segment as midpoint `m` and displacement `d = e - s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentMR {
    pub m: Point2,
    pub d: Point2,
}

pub fn cart_to_mr(c: SegmentCart) -> SegmentMR {
    SegmentMR { m: (c.s + c.e) * 0.5, d: c.e - c.s }
}

/// Inverse of [`cart_to_mr`]. Endpoints within [`GEOMETRY_TOLERANCE`] of the
/// unit cell are clamped onto it; anything further out is rejected.
pub fn mr_to_cart(r: SegmentMR) -> Result<SegmentCart> {
    let c = mr_to_cart_unchecked(r);
    let fix = |x: f64| -> Result<f64> {
        if !(-GEOMETRY_TOLERANCE..=1.0 + GEOMETRY_TOLERANCE).contains(&x) {
            return Err(Error::InvalidGeometry(format!(
                "endpoint coordinate {x} outside the unit cell (m = {:?}, d = {:?})",
                r.m, r.d
            )));
        }
        Ok(x.clamp(0.0, 1.0))
    };
    Ok(SegmentCart {
        s: Point2::new(fix(c.s.u)?, fix(c.s.v)?),
        e: Point2::new(fix(c.e.u)?, fix(c.e.v)?),
    })
}

pub(crate) fn mr_to_cart_unchecked(r: SegmentMR) -> SegmentCart {
    let half = r.d * 0.5;
    SegmentCart { s: r.m - half, e: r.m + half }
}

/// Segment geometry in either representation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "repr", rename_all = "lowercase")]
pub enum Geometry {
    Cart(SegmentCart),
    Mr(SegmentMR),
}

impl Geometry {
    pub fn representation(&self) -> Representation {
        match self {
            Geometry::Cart(_) => Representation::Cart,
            Geometry::Mr(_) => Representation::Mr,
        }
    }

    /// Start/end view; MR geometry is converted without range checks.
    pub fn to_cart(&self) -> SegmentCart {
        match *self {
            Geometry::Cart(c) => c,
            Geometry::Mr(r) => mr_to_cart_unchecked(r),
        }
    }

    pub fn to_mr(&self) -> SegmentMR {
        match *self {
            Geometry::Cart(c) => cart_to_mr(c),
            Geometry::Mr(r) => r,
        }
    }

    /// The four coordinates of the geometry expressed in `repr`.
    pub fn coords(&self, repr: Representation) -> [f64; 4] {
        match repr {
            Representation::Cart => {
                let c = self.to_cart();
                [c.s.u, c.s.v, c.e.u, c.e.v]
            }
            Representation::Mr => {
                let r = self.to_mr();
                [r.m.u, r.m.v, r.d.u, r.d.v]
            }
        }
    }

    pub fn from_coords(repr: Representation, x: [f64; 4]) -> Geometry {
        let a = Point2::new(x[0], x[1]);
        let b = Point2::new(x[2], x[3]);
        match repr {
            Representation::Cart => Geometry::Cart(SegmentCart { s: a, e: b }),
            Representation::Mr => Geometry::Mr(SegmentMR { m: a, d: b }),
        }
    }

    pub fn in_repr(&self, repr: Representation) -> Geometry {
        Geometry::from_coords(repr, self.coords(repr))
    }

    /// Coordinates of the geometry in a distance/clustering space.
    pub fn space_coords(&self, space: Space) -> Vec<f64> {
        match space {
            Space::Cart => self.coords(Representation::Cart).to_vec(),
            Space::Mr => self.coords(Representation::Mr).to_vec(),
            Space::Mp => {
                let r = self.to_mr();
                vec![r.m.u, r.m.v]
            }
            Space::Dir => {
                let r = self.to_mr();
                vec![r.d.u, r.d.v]
            }
        }
    }
}

impl From<SegmentCart> for Geometry {
    fn from(c: SegmentCart) -> Self {
        Geometry::Cart(c)
    }
}

impl From<SegmentMR> for Geometry {
    fn from(r: SegmentMR) -> Self {
        Geometry::Mr(r)
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Euclidean distance between two segments in the coordinates of `space`.
pub fn segment_distance(a: &Geometry, b: &Geometry, space: Space) -> f64 {
    euclidean(&a.space_coords(space), &b.space_coords(space))
}

/// One cell-local line hypothesis: geometry, label distribution and confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSegment {
    pub geometry: Geometry,
    pub label_probs: Vec<f64>,
    pub confidence: f64,
    pub cell: CellIndex,
}

impl CellSegment {
    pub fn label(&self) -> usize {
        argmax(&self.label_probs)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    if label < classes {
        v[label] = 1.0;
    }
    v
}

/// A segment in image pixels, possibly tagged with the cell/predictor it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSegment {
    pub start: Point2,
    pub end: Point2,
    pub label_probs: Vec<f64>,
    pub confidence: f64,
    pub cell: Option<CellIndex>,
    pub predictor: Option<usize>,
}

impl ImageSegment {
    pub fn midpoint(&self) -> Point2 {
        (self.start + self.end) * 0.5
    }

    pub fn direction(&self) -> Point2 {
        self.end - self.start
    }

    pub fn length(&self) -> f64 {
        self.start.dist(self.end)
    }

    pub fn label(&self) -> usize {
        argmax(&self.label_probs)
    }
}

/// Angle between two directions in `[0, π]`.
pub fn directed_angle(a: Point2, b: Point2) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos()
}

/// Angle between two lines ignoring direction, in `[0, π/2]`.
pub fn undirected_angle(a: Point2, b: Point2) -> f64 {
    let t = directed_angle(a, b);
    t.min(std::f64::consts::PI - t)
}

/// Splits a polyline into cell-local segments, one per (edge, cell) piece.
///
/// Cut points are snapped exactly onto cell borders. Pieces shorter than
/// [`SLIVER_LENGTH`] cell units are dropped. The returned segments carry
/// confidence 1 and a one-hot label (`None` maps to class 0).
pub fn split_polyline(p: &Polyline, g: &Grid, classes: usize) -> Result<Vec<CellSegment>> {
    for pt in p.points() {
        if !g.contains(*pt) {
            return Err(Error::OutOfBounds { u: pt.u, v: pt.v, width: g.width(), height: g.height() });
        }
    }
    let cs = g.cell_size as f64;
    let label_probs = one_hot(p.label().unwrap_or(0), classes.max(1));
    let mut out = Vec::new();
    for w in p.points().windows(2) {
        let (a, b) = (w[0], w[1]);
        for (s, e) in edge_pieces(a, b, cs) {
            if s.dist(e) / cs < SLIVER_LENGTH {
                continue;
            }
            let cell = g.cell_of((s + e) * 0.5);
            let origin = Point2::new(cell.col as f64 * cs, cell.row as f64 * cs);
            let local = |q: Point2| {
                let l = (q - origin) * (1.0 / cs);
                Point2::new(l.u.clamp(0.0, 1.0), l.v.clamp(0.0, 1.0))
            };
            out.push(CellSegment {
                geometry: Geometry::Cart(SegmentCart { s: local(s), e: local(e) }),
                label_probs: label_probs.clone(),
                confidence: 1.0,
                cell,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyResult);
    }
    Ok(out)
}

/// Sub-segments of `a → b` between consecutive grid-line crossings.
fn edge_pieces(a: Point2, b: Point2, cs: f64) -> Vec<(Point2, Point2)> {
    // (t, snapped u, snapped v)
    let mut cuts: Vec<(f64, Option<f64>, Option<f64>)> = Vec::new();
    let mut axis_cuts = |from: f64, to: f64, is_u: bool| {
        let delta = to - from;
        if delta == 0.0 {
            return;
        }
        let (lo, hi) = (from.min(to), from.max(to));
        let first = (lo / cs).ceil() as i64;
        let last = (hi / cs).floor() as i64;
        for k in first..=last {
            let x = k as f64 * cs;
            let t = (x - from) / delta;
            if t > 0.0 && t < 1.0 {
                cuts.push(if is_u { (t, Some(x), None) } else { (t, None, Some(x)) });
            }
        }
    };
    axis_cuts(a.u, b.u, true);
    axis_cuts(a.v, b.v, false);
    cuts.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut merged: Vec<(f64, Option<f64>, Option<f64>)> = Vec::with_capacity(cuts.len());
    for c in cuts {
        match merged.last_mut() {
            Some(last) if c.0 - last.0 < 1e-12 => {
                last.1 = last.1.or(c.1);
                last.2 = last.2.or(c.2);
            }
            _ => merged.push(c),
        }
    }

    let mut points = Vec::with_capacity(merged.len() + 2);
    points.push(a);
    for (t, su, sv) in merged {
        let q = a.lerp(b, t);
        points.push(Point2::new(su.unwrap_or(q.u), sv.unwrap_or(q.v)));
    }
    points.push(b);
    points.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Converts a cell-local segment back to image pixels.
pub fn cell_to_image(seg: &CellSegment, g: &Grid) -> Result<ImageSegment> {
    g.check_cell(seg.cell)?;
    let c = seg.geometry.to_cart();
    Ok(ImageSegment {
        start: cell_point_to_image(c.s, seg.cell, g),
        end: cell_point_to_image(c.e, seg.cell, g),
        label_probs: seg.label_probs.clone(),
        confidence: seg.confidence,
        cell: Some(seg.cell),
        predictor: None,
    })
}

pub fn cell_point_to_image(p: Point2, cell: CellIndex, g: &Grid) -> Point2 {
    let cs = g.cell_size as f64;
    Point2::new((cell.col as f64 + p.u) * cs, (cell.row as f64 + p.v) * cs)
}

pub fn image_point_to_cell(p: Point2, cell: CellIndex, g: &Grid) -> Point2 {
    let cs = g.cell_size as f64;
    Point2::new(p.u / cs - cell.col as f64, p.v / cs - cell.row as f64)
}

/// Ground truth of one image, split per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTruth {
    pub grid: Grid,
    cells: Vec<Vec<CellSegment>>,
}

impl GridTruth {
    pub fn empty(grid: Grid) -> Self {
        Self { grid, cells: vec![Vec::new(); grid.num_cells()] }
    }

    pub fn cell(&self, cell: CellIndex) -> &[CellSegment] {
        &self.cells[self.grid.flat_index(cell)]
    }

    pub fn cells(&self) -> impl Iterator<Item = (CellIndex, &[CellSegment])> {
        self.grid.cells().map(move |c| (c, self.cell(c)))
    }

    pub fn push(&mut self, seg: CellSegment) -> Result<()> {
        self.grid.check_cell(seg.cell)?;
        let idx = self.grid.flat_index(seg.cell);
        self.cells[idx].push(seg);
        Ok(())
    }

    pub fn segment_count(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    pub fn segments(&self) -> impl Iterator<Item = &CellSegment> {
        self.cells.iter().flatten()
    }
}

/// Splits every polyline of an image into per-cell ground truth.
pub fn discretize(polylines: &[Polyline], grid: Grid, classes: usize) -> Result<GridTruth> {
    let mut truth = GridTruth::empty(grid);
    for p in polylines {
        for seg in split_polyline(p, &grid, classes)? {
            truth.push(seg)?;
        }
    }
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pl(pts: &[(f64, f64)]) -> Polyline {
        Polyline::new(pts.iter().map(|&(u, v)| Point2::new(u, v)).collect(), Some(0)).unwrap()
    }

    fn cart(seg: &CellSegment) -> SegmentCart {
        seg.geometry.to_cart()
    }

    #[test]
    fn horizontal_line_splits_into_three_cells() {
        let g = Grid::new(4, 4, 8).unwrap();
        let segs = split_polyline(&pl(&[(0.0, 4.0), (24.0, 4.0)]), &g, 1).unwrap();
        assert_eq!(segs.len(), 3);
        for (i, s) in segs.iter().enumerate() {
            assert_eq!(s.cell, CellIndex { row: 0, col: i });
            let c = cart(s);
            assert_eq!(c.s, Point2::new(0.0, 0.5));
            assert_eq!(c.e, Point2::new(1.0, 0.5));
        }
    }

    #[test]
    fn segment_inside_one_cell_is_kept_whole() {
        let g = Grid::new(2, 2, 8).unwrap();
        let segs = split_polyline(&pl(&[(1.0, 2.0), (6.0, 5.0)]), &g, 1).unwrap();
        assert_eq!(segs.len(), 1);
        let c = cart(&segs[0]);
        for p in [c.s, c.e] {
            assert!(p.u > 0.0 && p.u < 1.0 && p.v > 0.0 && p.v < 1.0);
        }
    }

    #[test]
    fn out_of_bounds_and_degenerate_inputs_fail() {
        let g = Grid::new(2, 2, 8).unwrap();
        assert!(matches!(
            split_polyline(&pl(&[(1.0, 1.0), (17.0, 1.0)]), &g, 1),
            Err(Error::OutOfBounds { .. })
        ));
        let tiny = pl(&[(1.0, 1.0), (1.0 + 2e-9, 1.0)]);
        assert!(matches!(split_polyline(&tiny, &g, 1), Err(Error::EmptyResult)));
        assert!(Polyline::new(vec![Point2::new(1.0, 1.0); 2], None).is_err());
        assert!(Polyline::new(vec![Point2::new(1.0, 1.0)], None).is_err());
    }

    #[test]
    fn diagonal_through_corner_has_no_sliver() {
        let g = Grid::new(2, 2, 8).unwrap();
        let segs = split_polyline(&pl(&[(0.0, 0.0), (16.0, 16.0)]), &g, 1).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].cell, CellIndex { row: 0, col: 0 });
        assert_eq!(segs[1].cell, CellIndex { row: 1, col: 1 });
        assert_eq!(cart(&segs[1]).s, Point2::new(0.0, 0.0));
    }

    #[test]
    fn segment_along_border_goes_to_entered_cell() {
        let g = Grid::new(2, 2, 8).unwrap();
        let segs = split_polyline(&pl(&[(2.0, 8.0), (6.0, 8.0)]), &g, 1).unwrap();
        assert_eq!(segs[0].cell, CellIndex { row: 1, col: 0 });
        // far image border folds into the last row
        let segs = split_polyline(&pl(&[(2.0, 16.0), (6.0, 16.0)]), &g, 1).unwrap();
        assert_eq!(segs[0].cell, CellIndex { row: 1, col: 0 });
        assert_eq!(cart(&segs[0]).s.v, 1.0);
    }

    #[test]
    fn reversal_swaps_endpoints_and_negates_direction() {
        let g = Grid::new(4, 4, 8).unwrap();
        let p = pl(&[(1.0, 30.0), (13.0, 17.5), (29.0, 2.0)]);
        let fwd = split_polyline(&p, &g, 1).unwrap();
        let mut back = split_polyline(&p.reversed(), &g, 1).unwrap();
        back.reverse();
        assert_eq!(fwd.len(), back.len());
        for (a, b) in fwd.iter().zip(&back) {
            assert_eq!(a.cell, b.cell);
            let (ra, rb) = (a.geometry.to_mr(), b.geometry.to_mr());
            assert!((ra.d + rb.d).norm() < 1e-12);
            assert!(ra.m.dist(rb.m) < 1e-12);
        }
    }

    #[test]
    fn representation_examples() {
        let r = cart_to_mr(SegmentCart { s: Point2::new(0.0, 0.0), e: Point2::new(1.0, 1.0) });
        assert_eq!(r, SegmentMR { m: Point2::new(0.5, 0.5), d: Point2::new(1.0, 1.0) });
        let r = cart_to_mr(SegmentCart { s: Point2::new(0.5, 0.5), e: Point2::new(0.5, 0.5) });
        assert_eq!(r.d, Point2::new(0.0, 0.0));

        let c = mr_to_cart(SegmentMR { m: Point2::new(0.5, 0.5), d: Point2::new(1.0, 0.0) }).unwrap();
        assert_eq!((c.s, c.e), (Point2::new(0.0, 0.5), Point2::new(1.0, 0.5)));
        let c = mr_to_cart(SegmentMR { m: Point2::new(0.5, 0.5), d: Point2::new(0.0, 0.0) }).unwrap();
        assert_eq!(c.s, c.e);
        let bad = mr_to_cart(SegmentMR { m: Point2::new(0.9, 0.5), d: Point2::new(1.0, 0.0) });
        assert!(matches!(bad, Err(Error::InvalidGeometry(_))));
        // within tolerance is clamped
        let c = mr_to_cart(SegmentMR { m: Point2::new(0.5, 0.5), d: Point2::new(1.0 + 1e-10, 0.0) }).unwrap();
        assert_eq!(c.s.u, 0.0);
        assert_eq!(c.e.u, 1.0);
    }

    #[test]
    fn cell_to_image_examples() {
        let seg = |row, col, s: Point2| CellSegment {
            geometry: Geometry::Cart(SegmentCart { s, e: Point2::new(1.0, 1.0) }),
            label_probs: vec![1.0],
            confidence: 1.0,
            cell: CellIndex { row, col },
        };
        let g32 = Grid::new(2, 2, 32).unwrap();
        assert_eq!(cell_to_image(&seg(0, 0, Point2::new(0.0, 0.0)), &g32).unwrap().start, Point2::new(0.0, 0.0));
        let g8 = Grid::new(3, 3, 8).unwrap();
        let out = cell_to_image(&seg(1, 2, Point2::new(0.5, 0.5)), &g8).unwrap();
        assert_eq!(out.start, Point2::new(20.0, 12.0));
        assert!(matches!(
            cell_to_image(&seg(3, 0, Point2::new(0.5, 0.5)), &g8),
            Err(Error::CellOutOfRange { .. })
        ));
    }

    #[test]
    fn distance_examples() {
        let a = Geometry::Mr(SegmentMR { m: Point2::new(0.0, 0.0), d: Point2::new(1.0, 0.0) });
        let b = Geometry::Mr(SegmentMR { m: Point2::new(0.0, 0.0), d: Point2::new(-1.0, 0.0) });
        for space in [Space::Cart, Space::Mr, Space::Mp, Space::Dir] {
            assert_eq!(segment_distance(&a, &a, space), 0.0);
        }
        assert_eq!(segment_distance(&a, &b, Space::Mp), 0.0);
        assert_eq!(segment_distance(&a, &b, Space::Dir), 2.0);
    }

    #[test]
    fn grid_for_image_requires_divisibility() {
        assert_eq!(Grid::for_image(64, 32, 8).unwrap(), Grid { rows: 4, cols: 8, cell_size: 8 });
        assert!(Grid::for_image(60, 32, 8).is_err());
        assert!(Grid::new(0, 1, 8).is_err());
    }
}
