//! Planar geometry on normalized image coordinates.
//!
//! Coordinates are fractions of the image size with the origin at the top-left
//! corner and `y` growing downward. Under this convention a polygon whose
//! shoelace sum is positive is drawn clockwise on screen.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Polygons with less area than this are treated as degenerate.
pub const MIN_AREA: f64 = 1e-9;

/// Default supersampling resolution of the raster IoU fallback.
pub const DEFAULT_RASTER_RESOLUTION: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate polygon: {0}")]
    Degenerate(String),
    #[error("clip polygon is not convex")]
    NonConvexClip,
    #[error("union of the two polygons has zero area")]
    ZeroUnion,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }
}

impl From<[f64; 2]> for Point2 {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

/// Ordered vertex ring. The closing edge from the last vertex back to the
/// first is implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    vertices: Vec<Point2>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point2>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(GeometryError::Degenerate(format!(
                "{} vertices, need at least 3",
                vertices.len()
            )));
        }
        Ok(Self { vertices })
    }

    pub fn from_coords(coords: &[(f64, f64)]) -> Result<Self> {
        Self::new(coords.iter().map(|&(x, y)| Point2::new(x, y)).collect())
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn into_vertices(self) -> Vec<Point2> {
        self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn signed_area(&self) -> f64 {
        signed_sum(&self.vertices)
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn reversed(&self) -> Self {
        let mut vertices = self.vertices.clone();
        vertices.reverse();
        Self { vertices }
    }

    pub fn centroid(&self) -> Point2 {
        centroid(&self.vertices)
    }

    fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }
}

fn signed_sum(v: &[Point2]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = v[i];
        let b = v[(i + 1) % n];
        s += a.x * b.y - b.x * a.y;
    }
    0.5 * s
}

/// Signed shoelace area. Positive means clockwise on screen.
pub fn shoelace_signed(vertices: &[Point2]) -> Result<f64> {
    if vertices.len() < 3 {
        return Err(GeometryError::Degenerate(format!(
            "{} vertices, need at least 3",
            vertices.len()
        )));
    }
    Ok(signed_sum(vertices))
}

/// Clockwise orientation with the `(y, x)`-smallest vertex first.
pub fn canonicalize(poly: &Polygon) -> Result<Polygon> {
    let signed = poly.signed_area();
    if signed.abs() < MIN_AREA {
        return Err(GeometryError::Degenerate(format!(
            "area {:e} below {:e}",
            signed.abs(),
            MIN_AREA
        )));
    }
    let mut vertices = poly.vertices.clone();
    if signed < 0.0 {
        vertices.reverse();
    }
    let start = vertices
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    vertices.rotate_left(start);
    Ok(Polygon { vertices })
}

pub fn is_canonical(poly: &Polygon) -> bool {
    match canonicalize(poly) {
        Ok(c) => c == *poly,
        Err(_) => false,
    }
}

/// Vertex centroid: the arithmetic mean of the vertices.
///
/// `points` must be non-empty.
pub fn centroid(points: &[Point2]) -> Point2 {
    assert!(!points.is_empty(), "centroid of an empty point set");
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
    Point2::new(sx / n, sy / n)
}

pub fn l1_dist(p: Point2, q: Point2) -> f64 {
    (p.x - q.x).abs() + (p.y - q.y).abs()
}

#[inline]
fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment(a: Point2, b: Point2, p: Point2) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test, touching and collinear overlap included.
pub fn segments_intersect(p1: Point2, p2: Point2, q1: Point2, q2: Point2) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// No two non-adjacent edges touch, and the area is non-degenerate.
pub fn is_simple(poly: &Polygon) -> bool {
    let v = &poly.vertices;
    let n = v.len();
    if n < 3 || poly.area() < MIN_AREA {
        return false;
    }
    for i in 0..n {
        let (a1, a2) = (v[i], v[(i + 1) % n]);
        // adjacent edges may only share their common vertex
        let (b1, b2) = (v[(i + 1) % n], v[(i + 2) % n]);
        if cross(a1, a2, b2) == 0.0 && on_segment(a1, a2, b2) && n > 3 {
            return false;
        }
        if cross(b1, b2, a1) == 0.0 && on_segment(b1, b2, a1) && n > 3 {
            return false;
        }
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_intersect(a1, a2, v[j], v[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

/// Strictly convex or convex with collinear vertices; must also be simple.
pub fn is_convex(poly: &Polygon) -> bool {
    let v = &poly.vertices;
    let n = v.len();
    if n < 3 {
        return false;
    }
    let mut sign = 0.0f64;
    for i in 0..n {
        let c = cross(v[i], v[(i + 1) % n], v[(i + 2) % n]);
        if c != 0.0 {
            if sign == 0.0 {
                sign = c.signum();
            } else if c.signum() != sign {
                return false;
            }
        }
    }
    sign != 0.0 && is_simple(poly)
}

/// Sutherland–Hodgman clip of `subject` against the convex polygon `clip`.
///
/// Returns `Ok(None)` when the intersection has no area.
pub fn convex_clip(subject: &Polygon, clip: &Polygon) -> Result<Option<Polygon>> {
    if !is_convex(clip) {
        return Err(GeometryError::NonConvexClip);
    }
    let mut clip_v = clip.vertices.clone();
    if clip.signed_area() < 0.0 {
        clip_v.reverse();
    }
    let mut output = subject.vertices.clone();
    let n = clip_v.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip_v[i], clip_v[(i + 1) % n]);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for k in 0..m {
            let cur = input[k];
            let prev = input[(k + m - 1) % m];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    if output.len() < 3 || signed_sum(&output).abs() < f64::EPSILON {
        return Ok(None);
    }
    Ok(Some(Polygon { vertices: output }))
}

fn line_intersection(p: Point2, q: Point2, a: Point2, b: Point2) -> Point2 {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let t = cp / (cp - cq);
    Point2::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Exact IoU of two convex polygons.
pub fn convex_iou(a: &Polygon, b: &Polygon) -> Result<f64> {
    let inter = convex_clip(a, b)?.map(|p| p.area()).unwrap_or(0.0);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Err(GeometryError::ZeroUnion);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Half-open x-intervals covered by the even–odd fill of `poly` on the
/// horizontal line at height `y`.
fn scanline_intervals(poly: &Polygon, y: f64, xs: &mut Vec<f64>, out: &mut Vec<(f64, f64)>) {
    xs.clear();
    out.clear();
    for (p, q) in poly.edges() {
        if (p.y <= y) != (q.y <= y) {
            let t = (y - p.y) / (q.y - p.y);
            xs.push(p.x + t * (q.x - p.x));
        }
    }
    xs.sort_by(f64::total_cmp);
    for pair in xs.chunks_exact(2) {
        out.push((pair[0], pair[1]));
    }
}

/// Number of pixel centres `(c + 0.5) / res` with `c` in `0..res` inside `[x0, x1)`.
fn count_centres(x0: f64, x1: f64, res: usize) -> u64 {
    let scale = res as f64;
    let lo = (x0 * scale - 0.5).ceil().max(0.0);
    let hi = (x1 * scale - 0.5).ceil().min(scale);
    if hi > lo {
        (hi - lo) as u64
    } else {
        0
    }
}

/// Pixel-count IoU over the unit square sampled at `res × res` pixel centres
/// with even–odd fill. Works for any simple polygon.
pub fn raster_iou(a: &Polygon, b: &Polygon, res: usize) -> Result<f64> {
    let (mut xs, mut ia, mut ib) = (Vec::new(), Vec::new(), Vec::new());
    let (mut na, mut nb, mut ni) = (0u64, 0u64, 0u64);
    for row in 0..res {
        let y = (row as f64 + 0.5) / res as f64;
        scanline_intervals(a, y, &mut xs, &mut ia);
        scanline_intervals(b, y, &mut xs, &mut ib);
        na += ia.iter().map(|&(x0, x1)| count_centres(x0, x1, res)).sum::<u64>();
        nb += ib.iter().map(|&(x0, x1)| count_centres(x0, x1, res)).sum::<u64>();
        for &(a0, a1) in &ia {
            for &(b0, b1) in &ib {
                let (lo, hi) = (a0.max(b0), a1.min(b1));
                if hi > lo {
                    ni += count_centres(lo, hi, res);
                }
            }
        }
    }
    let union = na + nb - ni;
    if union == 0 {
        return Err(GeometryError::ZeroUnion);
    }
    Ok(ni as f64 / union as f64)
}

/// Filled-region IoU. Convex pairs are clipped exactly; anything else falls
/// back to [`raster_iou`] at `raster_resolution`.
pub fn iou_with_resolution(a: &Polygon, b: &Polygon, raster_resolution: usize) -> Result<f64> {
    if is_convex(a) && is_convex(b) {
        convex_iou(a, b)
    } else {
        raster_iou(a, b, raster_resolution)
    }
}

pub fn iou(a: &Polygon, b: &Polygon) -> Result<f64> {
    iou_with_resolution(a, b, DEFAULT_RASTER_RESOLUTION)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly(c: &[(f64, f64)]) -> Polygon {
        Polygon::from_coords(c).unwrap()
    }

    fn unit_square() -> Polygon {
        poly(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)])
    }

    #[test]
    fn shoelace_examples() {
        assert_eq!(shoelace_signed(unit_square().vertices()).unwrap(), 1.0);
        assert_eq!(shoelace_signed(unit_square().reversed().vertices()).unwrap(), -1.0);
        let tri = poly(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        assert_eq!(shoelace_signed(tri.vertices()).unwrap(), 0.5);
        assert!(matches!(
            shoelace_signed(&[Point2::new(0.0, 0.0), Point2::new(1.0, 1.0)]),
            Err(GeometryError::Degenerate(_))
        ));
        assert!(Polygon::new(vec![Point2::new(0.0, 0.0)]).is_err());
    }

    #[test]
    fn canonicalize_examples() {
        let sq = unit_square();
        assert_eq!(canonicalize(&sq).unwrap(), sq);
        let ccw = poly(&[(1.0, 1.0), (1.0, 0.0), (0.0, 0.0), (0.0, 1.0)]);
        assert_eq!(canonicalize(&ccw).unwrap(), sq);
        let flat = poly(&[(0.0, 0.0), (0.5, 0.5), (1.0, 1.0)]);
        assert!(canonicalize(&flat).is_err());
    }

    #[test]
    fn canonicalize_decagon_idempotent() {
        let v: Vec<Point2> = (0..10)
            .map(|k| {
                let a = -(k as f64) * std::f64::consts::TAU / 10.0;
                let r = if k % 2 == 0 { 0.4 } else { 0.25 };
                Point2::new(0.5 + r * a.cos(), 0.5 + r * a.sin())
            })
            .collect();
        let p = Polygon::new(v).unwrap();
        let c = canonicalize(&p).unwrap();
        assert_eq!(canonicalize(&c).unwrap(), c);
        assert!(c.signed_area() > 0.0);
        let mut a: Vec<_> = p.vertices().iter().map(|q| (q.x.to_bits(), q.y.to_bits())).collect();
        let mut b: Vec<_> = c.vertices().iter().map(|q| (q.x.to_bits(), q.y.to_bits())).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(unit_square().centroid(), Point2::new(0.5, 0.5));
        let c = centroid(&[Point2::new(0.0, 0.0), Point2::new(0.6, 0.0), Point2::new(0.0, 0.6)]);
        assert!((c.x - 0.2).abs() < 1e-15 && (c.y - 0.2).abs() < 1e-15);
        let p = Point2::new(0.3, 0.7);
        let q = centroid(&[p, p, p]);
        assert!(l1_dist(p, q) < 1e-15);
    }

    #[test]
    fn clip_examples() {
        let sq = unit_square();
        let same = convex_clip(&sq, &sq).unwrap().unwrap();
        assert!((same.area() - 1.0).abs() < 1e-12);

        let far = poly(&[(2.0, 2.0), (3.0, 2.0), (3.0, 3.0), (2.0, 3.0)]);
        assert!(convex_clip(&sq, &far).unwrap().is_none());

        let shifted = poly(&[(0.5, 0.0), (1.5, 0.0), (1.5, 1.0), (0.5, 1.0)]);
        let r = convex_clip(&sq, &shifted).unwrap().unwrap();
        assert!((r.area() - 0.5).abs() < 1e-12);

        let dented = poly(&[(0.0, 0.0), (1.0, 0.0), (0.5, 0.3), (1.0, 1.0), (0.0, 1.0)]);
        assert_eq!(convex_clip(&sq, &dented), Err(GeometryError::NonConvexClip));
    }

    #[test]
    fn iou_examples() {
        let sq = unit_square();
        assert!((iou(&sq, &sq).unwrap() - 1.0).abs() < 1e-12);
        let far = poly(&[(2.0, 2.0), (3.0, 2.0), (3.0, 3.0), (2.0, 3.0)]);
        assert_eq!(iou(&sq, &far).unwrap(), 0.0);
        let shifted = poly(&[(0.5, 0.0), (1.5, 0.0), (1.5, 1.0), (0.5, 1.0)]);
        assert!((iou(&sq, &shifted).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(&shifted, &sq).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn raster_iou_matches_convex_on_squares() {
        let a = poly(&[(0.1, 0.1), (0.6, 0.1), (0.6, 0.6), (0.1, 0.6)]);
        let b = poly(&[(0.35, 0.1), (0.85, 0.1), (0.85, 0.6), (0.35, 0.6)]);
        let exact = convex_iou(&a, &b).unwrap();
        let raster = raster_iou(&a, &b, 2048).unwrap();
        assert!((exact - raster).abs() < 2e-3, "{exact} vs {raster}");
    }

    #[test]
    fn non_convex_iou_uses_raster() {
        let dented = poly(&[(0.1, 0.1), (0.9, 0.1), (0.5, 0.5), (0.9, 0.9), (0.1, 0.9)]);
        assert!((iou(&dented, &dented).unwrap() - 1.0).abs() < 1e-9);
        // dented area: square 0.64 minus the notch triangle 0.4*0.8/2 = 0.16
        let sq = poly(&[(0.1, 0.1), (0.9, 0.1), (0.9, 0.9), (0.1, 0.9)]);
        let v = iou(&dented, &sq).unwrap();
        assert!((v - 0.48 / 0.64).abs() < 5e-3, "{v}");
    }

    #[test]
    fn degenerate_union_errors() {
        let a = poly(&[(2.0, 2.0), (3.0, 2.0), (3.0, 3.0), (2.0, 3.0)]);
        assert_eq!(raster_iou(&a, &a, 64), Err(GeometryError::ZeroUnion));
    }

    #[test]
    fn l1_examples() {
        let p = Point2::new(0.3, 0.4);
        assert_eq!(l1_dist(p, p), 0.0);
        assert_eq!(l1_dist(Point2::new(0.0, 0.0), Point2::new(1.0, 1.0)), 2.0);
        assert!((l1_dist(Point2::new(0.1, 0.2), Point2::new(0.15, 0.1)) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn convexity_and_simplicity() {
        let sq = unit_square();
        assert!(is_convex(&sq) && is_simple(&sq));
        let bowtie = poly(&[(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0)]);
        assert!(!is_simple(&bowtie));
        assert!(!is_convex(&bowtie));
        let star: Vec<Point2> = (0..5)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 5.0;
                let r = if k == 2 { 0.1 } else { 0.4 };
                Point2::new(0.5 + r * a.cos(), 0.5 + r * a.sin())
            })
            .collect();
        let star = Polygon::new(star).unwrap();
        assert!(is_simple(&star));
        assert!(!is_convex(&star));
        // pentagram: all turns share a sign but the ring self-intersects
        let pentagram: Vec<Point2> = (0..5)
            .map(|k| {
                let a = (2 * k) as f64 * std::f64::consts::TAU / 5.0;
                Point2::new(0.5 + 0.4 * a.cos(), 0.5 + 0.4 * a.sin())
            })
            .collect();
        assert!(!is_convex(&Polygon::new(pentagram).unwrap()));
    }
}
