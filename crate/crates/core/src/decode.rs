//! Post-processing of confident predictions: non-maximum suppression of
//! near-duplicate segments and stitching of segments into polylines.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{argmax, directed_angle, undirected_angle, ImageSegment, Point2, Polyline, MIN_VERTEX_SEPARATION};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmsMode {
    /// Keep the most confident member of each group.
    #[default]
    KeepMax,
    /// Replace each group by its confidence-weighted mean segment.
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    /// Maximum midpoint distance, pixels.
    pub position_eps: f64,
    /// Maximum undirected angle, radians.
    pub angle_eps: f64,
    pub mode: NmsMode,
    /// Segments with `confidence <= threshold` are discarded first.
    pub threshold: f64,
}

impl NmsConfig {
    /// Defaults for a grid with the given cell size.
    pub fn for_cell_size(cell_size: usize) -> Self {
        Self { position_eps: cell_size as f64 / 2.0, angle_eps: PI / 8.0, mode: NmsMode::KeepMax, threshold: 0.5 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.position_eps >= 0.0 && self.angle_eps >= 0.0 && self.threshold.is_finite()) {
            return Err(Error::invalid("NMS tolerances must be non-negative and finite"));
        }
        Ok(())
    }
}

fn near(a: &ImageSegment, b: &ImageSegment, cfg: &NmsConfig) -> bool {
    a.midpoint().dist(b.midpoint()) <= cfg.position_eps && undirected_angle(a.direction(), b.direction()) <= cfg.angle_eps
}

/// Greedy suppression in descending confidence (ties by input order).
///
/// A segment joins the group of the first kept segment it is near;
/// otherwise it starts a new group. Kept segments are pairwise not near each
/// other, so keep-max output is a fixed point.
pub fn nms(segments: &[ImageSegment], cfg: &NmsConfig) -> Result<Vec<ImageSegment>> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..segments.len()).filter(|&i| segments[i].confidence > cfg.threshold).collect();
    order.sort_by(|&a, &b| segments[b].confidence.total_cmp(&segments[a].confidence).then(a.cmp(&b)));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.iter_mut().find(|g| near(&segments[g[0]], &segments[i], cfg)) {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    Ok(groups
        .iter()
        .map(|g| match cfg.mode {
            NmsMode::KeepMax => segments[g[0]].clone(),
            NmsMode::Average => average(segments, g),
        })
        .collect())
}

fn average(segments: &[ImageSegment], group: &[usize]) -> ImageSegment {
    let lead = &segments[group[0]];
    let (mut s, mut e) = (Point2::new(0.0, 0.0), Point2::new(0.0, 0.0));
    let mut labels = vec![0.0; lead.label_probs.len()];
    let mut wsum = 0.0;
    for &i in group {
        let seg = &segments[i];
        let w = seg.confidence;
        // Orient every member like the leader before averaging endpoints.
        let (a, b) = if seg.direction().dot(lead.direction()) >= 0.0 { (seg.start, seg.end) } else { (seg.end, seg.start) };
        s = s + a * w;
        e = e + b * w;
        for (l, p) in labels.iter_mut().zip(&seg.label_probs) {
            *l += w * p;
        }
        wsum += w;
    }
    ImageSegment {
        start: s * (1.0 / wsum),
        end: e * (1.0 / wsum),
        label_probs: labels.iter().map(|l| l / wsum).collect(),
        confidence: lead.confidence,
        cell: lead.cell,
        predictor: lead.predictor,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchConfig {
    /// Maximum gap between joined endpoints, pixels.
    pub join_eps: f64,
    /// Maximum turn between consecutive segments, radians.
    pub angle_eps: f64,
}

impl StitchConfig {
    pub fn for_cell_size(cell_size: usize) -> Self {
        Self { join_eps: cell_size as f64 / 2.0, angle_eps: PI / 4.0 }
    }
}

/// Endpoint `2 * seg` is the start of `seg`, `2 * seg + 1` its end.
fn endpoint(segments: &[ImageSegment], ep: usize) -> Point2 {
    let s = &segments[ep / 2];
    if ep.is_multiple_of(2) {
        s.start
    } else {
        s.end
    }
}

/// Direction of travel when a path leaves its segment through `ep`.
fn leaving(segments: &[ImageSegment], ep: usize) -> Point2 {
    let d = segments[ep / 2].direction();
    if ep % 2 == 1 {
        d
    } else {
        d * -1.0
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Joins segments end to end into polylines.
///
/// Candidate joins pair two endpoints of different segments within
/// `join_eps` whose turn is within `angle_eps`. Joins are accepted greedily
/// by (turn, gap, endpoint indices); each endpoint joins at most once and
/// joins that would close a cycle are rejected. A shared vertex is placed at
/// the mean of the two joined endpoints. Labels are the argmax of the summed
/// label vectors of a chain.
pub fn stitch(segments: &[ImageSegment], cfg: &StitchConfig) -> Result<Vec<Polyline>> {
    if !(cfg.join_eps >= 0.0 && cfg.angle_eps >= 0.0) {
        return Err(Error::invalid("stitch tolerances must be non-negative"));
    }
    let n = segments.len();
    let mut candidates = Vec::new();
    for a in 0..2 * n {
        for b in (a + 1)..2 * n {
            if a / 2 == b / 2 {
                continue;
            }
            let gap = endpoint(segments, a).dist(endpoint(segments, b));
            if gap > cfg.join_eps {
                continue;
            }
            // Leaving through `a` must continue as the reverse of leaving through `b`.
            let turn = directed_angle(leaving(segments, a), leaving(segments, b) * -1.0);
            if turn <= cfg.angle_eps {
                candidates.push((turn, gap, a, b));
            }
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)).then((x.2, x.3).cmp(&(y.2, y.3))));

    let mut link: Vec<Option<usize>> = vec![None; 2 * n];
    let mut uf = UnionFind((0..n).collect());
    for (_, _, a, b) in candidates {
        if link[a].is_some() || link[b].is_some() || !uf.union(a / 2, b / 2) {
            continue;
        }
        link[a] = Some(b);
        link[b] = Some(a);
    }

    let mut visited = vec![false; n];
    let mut out = Vec::new();
    for first in 0..n {
        if visited[first] {
            continue;
        }
        // Walk back to a chain end; chains are acyclic by construction.
        let mut start_ep = 2 * first;
        while let Some(other) = link[start_ep] {
            start_ep = other ^ 1;
        }
        let mut points = Vec::new();
        let classes = segments[first].label_probs.len();
        let mut labels = vec![0.0; classes];
        let mut ep = start_ep;
        points.push(endpoint(segments, ep));
        loop {
            let seg = ep / 2;
            visited[seg] = true;
            for (l, p) in labels.iter_mut().zip(&segments[seg].label_probs) {
                *l += p;
            }
            let exit = ep ^ 1;
            match link[exit] {
                Some(next) => {
                    points.push((endpoint(segments, exit) + endpoint(segments, next)) * 0.5);
                    ep = next;
                }
                None => {
                    points.push(endpoint(segments, exit));
                    break;
                }
            }
        }
        points.dedup_by(|b, a| a.dist(*b) < MIN_VERTEX_SEPARATION);
        if points.len() >= 2 {
            let label = (classes > 0).then(|| argmax(&labels));
            out.push(Polyline::new(points, label)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(s: (f64, f64), e: (f64, f64), conf: f64) -> ImageSegment {
        ImageSegment {
            start: Point2::new(s.0, s.1),
            end: Point2::new(e.0, e.1),
            label_probs: vec![1.0, 0.0],
            confidence: conf,
            cell: None,
            predictor: None,
        }
    }

    #[test]
    fn duplicates_collapse_to_the_most_confident() {
        let segs = vec![seg((0.0, 0.0), (8.0, 0.0), 0.7), seg((0.0, 0.1), (8.0, 0.1), 0.9)];
        let out = nms(&segs, &NmsConfig::for_cell_size(8)).unwrap();
        assert_eq!(out, vec![segs[1].clone()]);
    }

    #[test]
    fn perpendicular_segments_survive() {
        let segs = vec![seg((0.0, 4.0), (8.0, 4.0), 0.9), seg((4.0, 0.0), (4.0, 8.0), 0.8)];
        assert_eq!(nms(&segs, &NmsConfig::for_cell_size(8)).unwrap().len(), 2);
    }

    #[test]
    fn keep_max_is_idempotent() {
        let segs: Vec<ImageSegment> =
            (0..20).map(|i| seg((i as f64, 0.0), (i as f64 + 3.0, (i % 4) as f64), 0.5 + i as f64 / 50.0)).collect();
        let cfg = NmsConfig::for_cell_size(8);
        let once = nms(&segs, &cfg).unwrap();
        assert_eq!(nms(&once, &cfg).unwrap(), once);
    }

    #[test]
    fn average_mode_merges_reversed_duplicates() {
        let segs = vec![seg((0.0, 0.0), (8.0, 0.0), 0.8), seg((8.0, 1.0), (0.0, 1.0), 0.8)];
        let cfg = NmsConfig { mode: NmsMode::Average, ..NmsConfig::for_cell_size(8) };
        let out = nms(&segs, &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].start.v - 0.5).abs() < 1e-12 && out[0].start.u.abs() < 1e-12);
    }

    #[test]
    fn collinear_pieces_stitch_into_one_polyline() {
        let segs = vec![seg((16.0, 0.0), (24.0, 0.0), 1.0), seg((0.0, 0.0), (8.0, 0.0), 1.0), seg((8.0, 0.0), (16.0, 0.0), 1.0)];
        let lines = stitch(&segs, &StitchConfig::for_cell_size(8)).unwrap();
        assert_eq!(lines.len(), 1);
        let pts = lines[0].points();
        assert_eq!(pts.len(), 4);
        assert!((lines[0].length() - 24.0).abs() < 1e-12);
    }

    #[test]
    fn reversed_piece_is_joined() {
        let segs = vec![seg((0.0, 0.0), (8.0, 0.0), 1.0), seg((16.0, 0.0), (8.0, 0.0), 1.0)];
        assert_eq!(stitch(&segs, &StitchConfig::for_cell_size(8)).unwrap().len(), 1);
    }

    #[test]
    fn sharp_turns_are_not_joined() {
        let segs = vec![seg((0.0, 0.0), (8.0, 0.0), 1.0), seg((8.0, 0.0), (8.0, 8.0), 1.0)];
        assert_eq!(stitch(&segs, &StitchConfig::for_cell_size(8)).unwrap().len(), 2);
    }

    #[test]
    fn closed_loops_are_cut() {
        let sq = vec![
            seg((0.0, 0.0), (8.0, 0.0), 1.0),
            seg((8.0, 0.0), (8.0, 8.0), 1.0),
            seg((8.0, 8.0), (0.0, 8.0), 1.0),
            seg((0.0, 8.0), (0.0, 0.0), 1.0),
        ];
        let cfg = StitchConfig { join_eps: 1.0, angle_eps: PI };
        let lines = stitch(&sq, &cfg).unwrap();
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].points().len(), 5);
    }
}
