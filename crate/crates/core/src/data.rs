//! Synthetic road-like scenes, rasterization, geometric augmentation and
//! the on-disk formats (PGM rasters, JSON-lines annotations, manifests).

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CellIndex, ImageSegment, Point2, Polyline};

/// Grayscale image, row-major, one byte per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height} raster needs {} bytes, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.pixels[y * self.width + x] = value;
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses a binary (P5) PGM with an 8-bit maxval.
    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Parse { line: 1, message: format!("PGM: {m}") };
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad(&format!("unsupported magic '{}'", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number '{s}'")));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(bad(&format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the data
        pos += 1;
        let data = bytes.get(pos..pos + width * height).ok_or_else(|| bad("truncated pixel data"))?;
        Raster::from_pixels(width, height, data.to_vec())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Raster::decode_pgm(&bytes).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse { line: 1, message: format!("{}: {message}", path.display()) },
            other => other,
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Background and per-label stroke intensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    pub background: u8,
    pub foreground: Vec<u8>,
}

impl Intensities {
    fn for_label(&self, label: Option<usize>) -> u8 {
        let l = label.unwrap_or(0);
        self.foreground.get(l).or(self.foreground.last()).copied().unwrap_or(255)
    }
}

/// Parameters of the synthetic scene generator. Count ranges are inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub straight: (usize, usize),
    pub curves: (usize, usize),
    pub crossings: (usize, usize),
    pub merges: (usize, usize),
    /// Number of labels; each polyline draws one uniformly.
    pub classes: usize,
    pub stroke_width: f64,
    pub intensities: Intensities,
    /// Arc length between consecutive curve samples, pixels.
    pub curve_step: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            straight: (1, 2),
            curves: (0, 1),
            crossings: (0, 1),
            merges: (0, 1),
            classes: 2,
            stroke_width: 1.5,
            intensities: Intensities { background: 0, foreground: vec![255, 140] },
            curve_step: 4.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::invalid(format!("image {}x{} is too small", self.width, self.height)));
        }
        if self.stroke_width.is_nan() || self.stroke_width <= 0.0 || self.stroke_width >= self.width.min(self.height) as f64 / 2.0 {
            return Err(Error::invalid(format!(
                "stroke width {} does not fit a {}x{} image",
                self.stroke_width, self.width, self.height
            )));
        }
        if self.classes == 0 {
            return Err(Error::invalid("scene label scheme needs at least one class"));
        }
        if self.intensities.foreground.len() < self.classes {
            return Err(Error::invalid("need one foreground intensity per class"));
        }
        if self.curve_step.is_nan() || self.curve_step <= 0.0 {
            return Err(Error::invalid("curve step must be positive"));
        }
        for (name, (lo, hi)) in [
            ("straight", self.straight),
            ("curves", self.curves),
            ("crossings", self.crossings),
            ("merges", self.merges),
        ] {
            if lo > hi {
                return Err(Error::invalid(format!("{name} range {lo}..={hi} is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub raster: Raster,
    pub truth: Vec<Polyline>,
    pub background: u8,
}

/// Pixels kept free along the image border by the generator.
const MARGIN: f64 = 0.5;
/// Maximum deviation from vertical for upward-travelling lines.
const MAX_TILT: f64 = 40.0 * PI / 180.0;
/// Maximum deviation from horizontal for rightward-travelling cross lines.
const MAX_CROSS_TILT: f64 = 20.0 * PI / 180.0;

struct Rect {
    min: Point2,
    max: Point2,
}

impl Rect {
    fn image(width: f64, height: f64, margin: f64) -> Self {
        Rect { min: Point2::new(margin, margin), max: Point2::new(width - margin, height - margin) }
    }

    /// Parameter interval of `origin + t·dir` inside the rectangle.
    fn clip(&self, origin: Point2, dir: Point2, t0: f64, t1: f64) -> Option<(f64, f64)> {
        let (mut lo, mut hi) = (t0, t1);
        for (o, d, min, max) in [
            (origin.u, dir.u, self.min.u, self.max.u),
            (origin.v, dir.v, self.min.v, self.max.v),
        ] {
            if d.abs() < 1e-15 {
                if o < min || o > max {
                    return None;
                }
                continue;
            }
            let (a, b) = ((min - o) / d, (max - o) / d);
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
        (lo < hi).then_some((lo, hi))
    }
}

fn upward(tilt: f64) -> Point2 {
    Point2::new(tilt.sin(), -tilt.cos())
}

fn rightward(tilt: f64) -> Point2 {
    Point2::new(tilt.cos(), tilt.sin())
}

fn line_through(rect: &Rect, p: Point2, dir: Point2, label: usize) -> Option<Polyline> {
    let (lo, hi) = rect.clip(p, dir, f64::NEG_INFINITY, f64::INFINITY)?;
    Polyline::new(vec![p + dir * lo, p + dir * hi], Some(label)).ok().filter(|l| l.length() > 2.0)
}

fn random_point(rng: &mut ChaCha8Rng, rect: &Rect, inset: f64) -> Point2 {
    Point2::new(
        rng.gen_range(rect.min.u + inset..rect.max.u - inset),
        rng.gen_range(rect.min.v + inset..rect.max.v - inset),
    )
}

/// Quadratic Bézier sampled at (approximately) equal arc steps.
fn bezier_polyline(a: Point2, c: Point2, b: Point2, step: f64, label: usize) -> Option<Polyline> {
    const DENSE: usize = 400;
    let at = |t: f64| a * ((1.0 - t) * (1.0 - t)) + c * (2.0 * t * (1.0 - t)) + b * (t * t);
    let dense: Vec<Point2> = (0..=DENSE).map(|i| at(i as f64 / DENSE as f64)).collect();
    let mut points = vec![a];
    let mut travelled = 0.0;
    let mut next = step;
    for w in dense.windows(2) {
        travelled += w[0].dist(w[1]);
        if travelled >= next {
            points.push(w[1]);
            next += step;
        }
    }
    // last sample too close to the end point: replace it with the end point
    if let Some(&last) = points.last() {
        if points.len() > 1 && last.dist(b) < step * 0.5 {
            points.pop();
        }
    }
    points.push(b);
    Polyline::new(points, Some(label)).ok()
}

fn generate_scene(cfg: &SceneConfig, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let rect = Rect::image(w, h, MARGIN);
    let mut truth = Vec::new();
    let count = |rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)| rng.gen_range(lo..=hi);
    let label = |rng: &mut ChaCha8Rng| rng.gen_range(0..cfg.classes);

    for _ in 0..count(&mut rng, cfg.straight) {
        let p = random_point(&mut rng, &rect, 2.0);
        let tilt = rng.gen_range(-MAX_TILT..MAX_TILT);
        let l = label(&mut rng);
        truth.extend(line_through(&rect, p, upward(tilt), l));
    }

    for _ in 0..count(&mut rng, cfg.curves) {
        // bottom to top; both end tangents within the tilt limit
        for _attempt in 0..32 {
            let a = Point2::new(rng.gen_range(rect.min.u..rect.max.u), rect.max.v);
            let b = Point2::new(rng.gen_range(rect.min.u..rect.max.u), rect.min.v);
            let c = random_point(&mut rng, &rect, 0.0);
            let ok = |d: Point2| d.v < 0.0 && d.u.abs() <= (-d.v) * MAX_TILT.tan();
            if ok(c - a) && ok(b - c) {
                let l = label(&mut rng);
                truth.extend(bezier_polyline(a, c, b, cfg.curve_step, l));
                break;
            }
        }
    }

    for _ in 0..count(&mut rng, cfg.crossings) {
        let inset = (w.min(h) / 4.0).max(1.0);
        let x = random_point(&mut rng, &rect, inset - MARGIN);
        let t1 = rng.gen_range(-MAX_TILT..MAX_TILT);
        let t2 = rng.gen_range(-MAX_CROSS_TILT..MAX_CROSS_TILT);
        let (l1, l2) = (label(&mut rng), label(&mut rng));
        truth.extend(line_through(&rect, x, upward(t1), l1));
        truth.extend(line_through(&rect, x, rightward(t2), l2));
    }

    for _ in 0..count(&mut rng, cfg.merges) {
        // two upward lines ending in one shared vertex
        let top = Point2::new(
            rng.gen_range(rect.min.u + w * 0.25..rect.max.u - w * 0.25),
            rng.gen_range(rect.min.v..rect.min.v + h * 0.4),
        );
        let reach = rect.max.v - top.v;
        let spread = reach * MAX_TILT.tan();
        let mut starts = [0.0f64; 2];
        for s in &mut starts {
            *s = rng.gen_range(-spread..spread);
        }
        if (starts[0] - starts[1]).abs() < 3.0 {
            starts[1] = starts[0] + if starts[0] > 0.0 { -3.0 } else { 3.0 };
        }
        for s in starts {
            let from = Point2::new((top.u + s).clamp(rect.min.u, rect.max.u), rect.max.v);
            let l = label(&mut rng);
            truth.extend(Polyline::new(vec![from, top], Some(l)).ok().filter(|p| p.length() > 2.0));
        }
    }

    let raster = rasterize(&truth, cfg.width, cfg.height, cfg.stroke_width, &cfg.intensities);
    Scene { raster, truth, background: cfg.intensities.background }
}

/// Generates `n` scenes; scene `i` depends only on `(cfg.seed, i)`.
pub fn generate(cfg: &SceneConfig, n: usize) -> Result<Vec<Scene>> {
    generate_range(cfg, 0, n)
}

/// Scenes `start..start + n` of the stream defined by `cfg`.
pub fn generate_range(cfg: &SceneConfig, start: usize, n: usize) -> Result<Vec<Scene>> {
    cfg.validate()?;
    Ok((start as u64..(start + n) as u64).map(|i| generate_scene(cfg, i)).collect())
}

fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    let t = if len2 > 0.0 { ((p - a).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    p.dist(a + ab * t)
}

/// Draws every polyline as a round-capped stroke: a pixel is foreground when
/// its center lies within `stroke / 2` of the polyline.
pub fn rasterize(truth: &[Polyline], width: usize, height: usize, stroke: f64, intensities: &Intensities) -> Raster {
    let mut r = Raster::filled(width, height, intensities.background);
    let half = stroke / 2.0;
    for line in truth {
        let value = intensities.for_label(line.label());
        for w in line.points().windows(2) {
            let (a, b) = (w[0], w[1]);
            let x0 = ((a.u.min(b.u) - half - 1.0).floor().max(0.0)) as usize;
            let x1 = ((a.u.max(b.u) + half + 1.0).ceil().max(0.0) as usize).min(width);
            let y0 = ((a.v.min(b.v) - half - 1.0).floor().max(0.0)) as usize;
            let y1 = ((a.v.max(b.v) + half + 1.0).ceil().max(0.0) as usize).min(height);
            for y in y0..y1 {
                for x in x0..x1 {
                    let c = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                    if point_segment_distance(c, a, b) <= half {
                        r.set(x, y, value);
                    }
                }
            }
        }
    }
    r
}

/// Rigid rotation about the image center followed by a crop that is resized
/// back to the full image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    /// Crop side relative to the image, in `(0, 1]`.
    pub crop_scale: f64,
    /// Top-left corner of the crop window, pixels.
    pub crop_offset: Point2,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams =
        AugmentParams { rotation_deg: 0.0, crop_scale: 1.0, crop_offset: Point2::new(0.0, 0.0) };

    pub fn random(seed: u64, width: usize, height: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rotation_deg = rng.gen_range(-15.0..=15.0);
        let crop_scale = rng.gen_range(0.8..=1.0);
        let crop_offset = Point2::new(
            rng.gen_range(0.0..=(1.0 - crop_scale) * width as f64),
            rng.gen_range(0.0..=(1.0 - crop_scale) * height as f64),
        );
        AugmentParams { rotation_deg, crop_scale, crop_offset }
    }
}

struct Transform {
    center: Point2,
    cos: f64,
    sin: f64,
    scale: f64,
    offset: Point2,
}

impl Transform {
    fn new(p: &AugmentParams, width: usize, height: usize) -> Self {
        let t = p.rotation_deg.to_radians();
        Transform {
            center: Point2::new(width as f64 / 2.0, height as f64 / 2.0),
            cos: t.cos(),
            sin: t.sin(),
            scale: p.crop_scale,
            offset: p.crop_offset,
        }
    }

    fn forward(&self, p: Point2) -> Point2 {
        let q = p - self.center;
        let r = Point2::new(q.u * self.cos - q.v * self.sin, q.u * self.sin + q.v * self.cos) + self.center;
        (r - self.offset) * (1.0 / self.scale)
    }

    fn inverse(&self, q: Point2) -> Point2 {
        let r = q * self.scale + self.offset - self.center;
        Point2::new(r.u * self.cos + r.v * self.sin, -r.u * self.sin + r.v * self.cos) + self.center
    }
}

/// Clips a polyline to `[0, w] × [0, h]`, splitting it where it leaves and re-enters.
pub fn clip_polyline(line: &Polyline, width: f64, height: f64) -> Vec<Polyline> {
    let rect = Rect::image(width, height, 0.0);
    let mut pieces: Vec<Vec<Point2>> = Vec::new();
    let mut current: Vec<Point2> = Vec::new();
    for w in line.points().windows(2) {
        let (a, b) = (w[0], w[1]);
        match rect.clip(a, b - a, 0.0, 1.0) {
            Some((t0, t1)) => {
                let (p, q) = (a.lerp(b, t0), a.lerp(b, t1));
                let p = if t0 == 0.0 { a } else { p };
                let q = if t1 == 1.0 { b } else { q };
                if current.last().is_none_or(|last| last.dist(p) > 1e-9) {
                    if current.len() >= 2 {
                        pieces.push(std::mem::take(&mut current));
                    }
                    current = vec![p];
                }
                current.push(q);
                if t1 < 1.0 {
                    pieces.push(std::mem::take(&mut current));
                }
            }
            None => {
                if current.len() >= 2 {
                    pieces.push(std::mem::take(&mut current));
                }
                current.clear();
            }
        }
    }
    if current.len() >= 2 {
        pieces.push(current);
    }
    pieces
        .into_iter()
        .filter_map(|mut pts| {
            pts.dedup_by(|b, a| a.dist(*b) <= 1e-6);
            for p in &mut pts {
                p.u = p.u.clamp(0.0, width);
                p.v = p.v.clamp(0.0, height);
            }
            Polyline::new(pts, line.label()).ok()
        })
        .collect()
}

/// Applies explicit augmentation parameters to raster and truth alike.
pub fn augment_with(scene: &Scene, params: &AugmentParams) -> Scene {
    let (w, h) = (scene.raster.width, scene.raster.height);
    let tf = Transform::new(params, w, h);
    let mut raster = Raster::filled(w, h, scene.background);
    for y in 0..h {
        for x in 0..w {
            let src = tf.inverse(Point2::new(x as f64 + 0.5, y as f64 + 0.5));
            let (sx, sy) = (src.u.floor(), src.v.floor());
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                raster.set(x, y, scene.raster.get(sx as usize, sy as usize));
            }
        }
    }
    let truth = scene
        .truth
        .iter()
        .filter_map(|l| {
            let pts: Vec<Point2> = l.points().iter().map(|&p| tf.forward(p)).collect();
            Polyline::new(pts, l.label()).ok()
        })
        .flat_map(|l| clip_polyline(&l, w as f64, h as f64))
        .collect();
    Scene { raster, truth, background: scene.background }
}

/// Random rotation (±15°) and crop; never mirrors.
pub fn augment(scene: &Scene, seed: u64) -> Scene {
    augment_with(scene, &AugmentParams::random(seed, scene.raster.width, scene.raster.height))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub w: usize,
    pub h: usize,
}

/// One polyline of an annotation line. Prediction files add the optional fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolylineRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_probs: Option<Vec<f64>>,
}

impl PolylineRecord {
    pub fn from_polyline(p: &Polyline) -> Self {
        PolylineRecord {
            label: p.label(),
            points: p.points().iter().map(|q| [q.u, q.v]).collect(),
            confidence: None,
            cell: None,
            predictor: None,
            label_probs: None,
        }
    }

    pub fn from_segment(s: &ImageSegment) -> Self {
        PolylineRecord {
            label: Some(s.label()),
            points: vec![[s.start.u, s.start.v], [s.end.u, s.end.v]],
            confidence: Some(s.confidence),
            cell: s.cell.map(|c| [c.row, c.col]),
            predictor: s.predictor,
            label_probs: Some(s.label_probs.clone()),
        }
    }

    pub fn to_polyline(&self) -> Result<Polyline> {
        Polyline::new(self.points.iter().map(|p| Point2::new(p[0], p[1])).collect(), self.label)
    }

    /// Interprets a two-point record as a single image-space segment.
    pub fn to_segment(&self, classes: usize) -> Option<ImageSegment> {
        if self.points.len() != 2 {
            return None;
        }
        let label_probs =
            self.label_probs.clone().unwrap_or_else(|| crate::geom::one_hot(self.label.unwrap_or(0), classes));
        Some(ImageSegment {
            start: Point2::new(self.points[0][0], self.points[0][1]),
            end: Point2::new(self.points[1][0], self.points[1][1]),
            label_probs,
            confidence: self.confidence.unwrap_or(1.0),
            cell: self.cell.map(|[row, col]| CellIndex { row, col }),
            predictor: self.predictor,
        })
    }
}

/// One line of an annotation (or prediction) file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: ImageSize,
    pub polylines: Vec<PolylineRecord>,
}

impl AnnotationRecord {
    pub fn from_scene(scene: &Scene) -> Self {
        AnnotationRecord {
            image: ImageSize { w: scene.raster.width, h: scene.raster.height },
            polylines: scene.truth.iter().map(PolylineRecord::from_polyline).collect(),
        }
    }

    pub fn polylines(&self) -> Result<Vec<Polyline>> {
        self.polylines.iter().map(PolylineRecord::to_polyline).collect()
    }
}

/// Parses JSON-lines; blank lines are skipped, errors name the 1-based line.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })
        })
        .collect()
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse { line, message: format!("{}: {message}", path.display()) },
        other => other,
    })
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Dataset index: raster paths (relative to the manifest) and their annotation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub annotations: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub raster: PathBuf,
    pub annotation: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATION_FILE: &str = "annotations.jsonl";

/// Writes `dir/images/NNNNNN.pgm`, `dir/annotations.jsonl` and `dir/manifest.json`.
pub fn save_dataset(dir: &Path, scenes: &[Scene]) -> Result<DatasetManifest> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let rel = PathBuf::from("images").join(format!("{i:06}.pgm"));
        s.raster.write_pgm(&dir.join(&rel))?;
        entries.push(ManifestEntry { raster: rel, annotation: i });
    }
    let records: Vec<_> = scenes.iter().map(AnnotationRecord::from_scene).collect();
    write_annotations(&dir.join(ANNOTATION_FILE), &records)?;
    let manifest = DatasetManifest { annotations: PathBuf::from(ANNOTATION_FILE), entries };
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let records = read_annotations(&dir.join(&manifest.annotations))?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let raster = Raster::read_pgm(&dir.join(&e.raster))?;
            let rec = records.get(e.annotation).ok_or_else(|| {
                Error::invalid(format!("manifest references annotation {} of {}", e.annotation, records.len()))
            })?;
            if rec.image.w != raster.width || rec.image.h != raster.height {
                return Err(Error::ShapeMismatch(format!(
                    "{}: raster is {}x{}, annotation says {}x{}",
                    e.raster.display(),
                    raster.width,
                    raster.height,
                    rec.image.w,
                    rec.image.h
                )));
            }
            let background = most_common(&raster.pixels);
            Ok(Scene { raster, truth: rec.polylines()?, background })
        })
        .collect()
}

fn most_common(bytes: &[u8]) -> u8 {
    let mut hist = [0usize; 256];
    for &b in bytes {
        hist[b as usize] += 1;
    }
    (0..=255u8).max_by_key(|&b| (hist[b as usize], std::cmp::Reverse(b))).unwrap_or(0)
}
