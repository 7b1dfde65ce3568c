use proptest::prelude::*;

use gridline::anchors::{assign_to_anchors, uniform_anchors};
use gridline::data::Raster;
use gridline::decode::{nms, NmsConfig};
use gridline::geom::{
    cart_to_mr, cell_to_image, mr_to_cart, split_polyline, Geometry, Grid, ImageSegment, Point2, Polyline, SegmentCart,
    Space,
};
use gridline::matching::{hungarian, CostMatrix};
use gridline::metrics::gate_sweep;

fn point(max: f64) -> impl Strategy<Value = Point2> {
    (0.0..=max, 0.0..=max).prop_map(|(u, v)| Point2::new(u, v))
}

fn image_segment() -> impl Strategy<Value = ImageSegment> {
    (point(64.0), -8.0..8.0f64, -8.0..8.0f64, 0.0..1.0f64).prop_map(|(s, du, dv, c)| ImageSegment {
        start: s,
        end: s + Point2::new(du, dv),
        label_probs: vec![1.0],
        confidence: c,
        cell: None,
        predictor: None,
    })
}

proptest! {
    #[test]
    fn split_pieces_cover_the_polyline(pts in prop::collection::vec(point(64.0), 2..6)) {
        let Ok(line) = Polyline::new(pts, Some(0)) else { return Ok(()) };
        let grid = Grid::new(8, 8, 8).unwrap();
        let pieces = split_polyline(&line, &grid, 1).unwrap();
        let mut total = 0.0;
        for p in &pieces {
            let c = p.geometry.to_cart();
            for q in [c.s, c.e] {
                prop_assert!((0.0..=1.0).contains(&q.u) && (0.0..=1.0).contains(&q.v));
            }
            total += cell_to_image(p, &grid).unwrap().length();
        }
        prop_assert!((total - line.length()).abs() < 1e-6 * (1.0 + line.length()));
    }

    #[test]
    fn representations_round_trip(s in point(1.0), e in point(1.0)) {
        let c = SegmentCart { s, e };
        let back = mr_to_cart(cart_to_mr(c)).unwrap();
        prop_assert!(back.s.dist(s) < 1e-12 && back.e.dist(e) < 1e-12);
    }

    #[test]
    fn hungarian_beats_identity_and_covers_min_side(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut x = seed;
        let data: Vec<f64> = (0..rows * cols).map(|_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (x >> 40) as f64 / 1000.0
        }).collect();
        let c = CostMatrix::new(rows, cols, data).unwrap();
        let m = hungarian(&c).unwrap();
        prop_assert_eq!(m.pairs.len(), rows.min(cols));
        let diagonal: f64 = (0..rows.min(cols)).map(|i| c.get(i, i)).sum();
        prop_assert!(m.total_cost <= diagonal + 1e-9);
    }

    #[test]
    fn anchor_assignment_accounts_for_every_segment(segs in prop::collection::vec((point(1.0), point(1.0)), 0..10), p in 1usize..10) {
        let geoms: Vec<Geometry> = segs.iter().map(|&(s, e)| Geometry::Cart(SegmentCart { s, e })).collect();
        let a = uniform_anchors(Space::Mr, p).unwrap();
        let asg = assign_to_anchors(&geoms, &a);
        let kept: Vec<usize> = asg.slots.iter().flatten().copied().collect();
        prop_assert_eq!(kept.len() + asg.dropped.len(), geoms.len());
        let mut all: Vec<usize> = kept.into_iter().chain(asg.dropped.iter().copied()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..geoms.len()).collect::<Vec<_>>());
    }

    #[test]
    fn keep_max_nms_is_an_idempotent_subset(segs in prop::collection::vec(image_segment(), 0..40)) {
        let cfg = NmsConfig::for_cell_size(8);
        let once = nms(&segs, &cfg).unwrap();
        prop_assert!(once.iter().all(|s| segs.contains(s)));
        prop_assert_eq!(nms(&once, &cfg).unwrap(), once);
    }

    #[test]
    fn gate_curve_is_monotone(preds in prop::collection::vec(image_segment(), 0..30), gts in prop::collection::vec(image_segment(), 0..30)) {
        let curve = gate_sweep(&preds, &gts, &[0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, f64::INFINITY], 0.5);
        prop_assert!(curve.windows(2).all(|w| w[1].tp >= w[0].tp && w[1].f1 >= w[0].f1));
    }

    #[test]
    fn pgm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u8>()) {
        let pixels: Vec<u8> = (0..w * h).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let r = Raster::from_pixels(w, h, pixels).unwrap();
        prop_assert_eq!(Raster::decode_pgm(&r.encode_pgm()).unwrap(), r);
    }
}
