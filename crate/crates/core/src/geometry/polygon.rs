//! Convex polygon clipping and area, the exact route of the rotated-rect IoU.

use std::ops::{Add, Mul, Sub};

/// Collinearity / coincidence tolerance for clipping, relative to the
/// coordinate scale of the operands.
pub const CLIP_TOL: f64 = 1e-9;

/// Intersections with relative area below this are treated as empty.
pub const DEGENERATE_AREA_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    /// z-component of the cross product of `self` and `other`.
    #[inline]
    pub fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

/// Convex polygon with vertices in counter-clockwise order. The empty
/// polygon (no vertices) represents an empty intersection.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point>,
}

impl ConvexPolygon {
    pub fn new(vertices: Vec<Point>) -> Self {
        ConvexPolygon { vertices }
    }

    pub fn empty() -> Self {
        ConvexPolygon { vertices: Vec::new() }
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn area(&self) -> f64 {
        polygon_area(self)
    }
}

/// Nonnegative shoelace area of a counter-clockwise polygon. Empty and
/// degenerate (< 3 vertices) polygons have area 0.
pub fn polygon_area(p: &ConvexPolygon) -> f64 {
    let v = &p.vertices;
    if v.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..v.len() {
        let j = (i + 1) % v.len();
        twice += v[i].cross(v[j]);
    }
    (0.5 * twice).max(0.0)
}

/// Largest coordinate magnitude of either polygon, floored at 1 so the
/// relative tolerances below stay meaningful near the origin.
fn coordinate_scale(p: &ConvexPolygon, q: &ConvexPolygon) -> f64 {
    let mut s: f64 = 1.0;
    for v in p.vertices.iter().chain(q.vertices.iter()) {
        s = s.max(v.x.abs()).max(v.y.abs());
    }
    s
}

/// Signed distance of `pt` from the directed line `a -> b`, positive on the
/// left (interior side for a counter-clockwise clip polygon).
#[inline]
fn edge_distance(pt: Point, a: Point, b: Point) -> f64 {
    let e = b - a;
    let len = e.norm();
    if len == 0.0 {
        return 0.0;
    }
    e.cross(pt - a) / len
}

/// Intersection of segment `p1 -> p2` with the line through `a -> b`.
/// Callers only invoke this for segments that cross the line, so the
/// denominator is bounded away from zero; a parallel fallback returns `p2`.
#[inline]
fn line_intersection(p1: Point, p2: Point, a: Point, b: Point) -> Point {
    let d1 = p2 - p1;
    let d2 = b - a;
    let den = d1.cross(d2);
    if den.abs() < f64::MIN_POSITIVE {
        return p2;
    }
    let t = (a - p1).cross(d2) / den;
    p1 + d1 * t
}

/// Sutherland-Hodgman clipping of convex `p` against convex `q`. Both inputs
/// must be counter-clockwise; the result is counter-clockwise. Points within
/// `CLIP_TOL` (relative) of a clip edge count as inside, near-duplicate
/// vertices are merged, and a result with relative area below
/// `DEGENERATE_AREA_TOL` collapses to the empty polygon.
pub fn convex_intersection(p: &ConvexPolygon, q: &ConvexPolygon) -> ConvexPolygon {
    if p.is_empty() || q.is_empty() {
        return ConvexPolygon::empty();
    }
    let scale = coordinate_scale(p, q);
    let inside_tol = -CLIP_TOL * scale;

    let mut output = p.vertices.clone();
    for i in 0..q.vertices.len() {
        let a = q.vertices[i];
        let b = q.vertices[(i + 1) % q.vertices.len()];
        let input = std::mem::take(&mut output);
        if input.is_empty() {
            return ConvexPolygon::empty();
        }
        for (j, &cur) in input.iter().enumerate() {
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = edge_distance(cur, a, b) >= inside_tol;
            let prev_in = edge_distance(prev, a, b) >= inside_tol;
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

    // Merge consecutive near-duplicates (clipping at a vertex emits pairs).
    let merge_tol = CLIP_TOL * scale;
    let mut merged: Vec<Point> = Vec::with_capacity(output.len());
    for v in output {
        if merged.last().is_none_or(|&last| (v - last).norm() > merge_tol) {
            merged.push(v);
        }
    }
    if merged.len() >= 2 && (merged[0] - *merged.last().unwrap()).norm() <= merge_tol {
        merged.pop();
    }

    let result = ConvexPolygon::new(merged);
    if result.vertices.len() < 3 || result.area() < DEGENERATE_AREA_TOL * scale * scale {
        return ConvexPolygon::empty();
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(cx: f64, cy: f64, half: f64) -> ConvexPolygon {
        ConvexPolygon::new(vec![
            Point::new(cx + half, cy + half),
            Point::new(cx - half, cy + half),
            Point::new(cx - half, cy - half),
            Point::new(cx + half, cy - half),
        ])
    }

    /// Unit square rotated 45 degrees about its center.
    fn diamond(cx: f64, cy: f64, half: f64) -> ConvexPolygon {
        let r = half * std::f64::consts::SQRT_2;
        ConvexPolygon::new(vec![
            Point::new(cx + r, cy),
            Point::new(cx, cy + r),
            Point::new(cx - r, cy),
            Point::new(cx, cy - r),
        ])
    }

    #[test]
    fn area_of_unit_square() {
        assert_eq!(square(0.0, 0.0, 0.5).area(), 1.0);
    }

    #[test]
    fn area_of_degenerate_polygons_is_zero() {
        assert_eq!(ConvexPolygon::empty().area(), 0.0);
        let segment = ConvexPolygon::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)]);
        assert_eq!(segment.area(), 0.0);
    }

    #[test]
    fn identical_squares_intersect_to_full_area() {
        let s = square(2.0, -1.0, 1.5);
        let inter = convex_intersection(&s, &s);
        assert!((inter.area() - s.area()).abs() < 1e-12);
    }

    #[test]
    fn disjoint_squares_intersect_to_empty() {
        let inter = convex_intersection(&square(0.0, 0.0, 1.0), &square(5.0, 0.0, 1.0));
        assert!(inter.is_empty());
        assert_eq!(inter.area(), 0.0);
    }

    #[test]
    fn touching_squares_intersect_to_empty() {
        // Shared edge only: zero-area overlap must collapse to empty.
        let inter = convex_intersection(&square(0.0, 0.0, 1.0), &square(2.0, 0.0, 1.0));
        assert!(inter.is_empty());
    }

    #[test]
    fn offset_squares_intersect_to_quarter() {
        let inter = convex_intersection(&square(0.0, 0.0, 1.0), &square(1.0, 1.0, 1.0));
        assert!((inter.area() - 1.0).abs() < 1e-12);
        assert_eq!(inter.vertices().len(), 4);
    }

    #[test]
    fn square_with_rotated_square_forms_octagon() {
        // Unit square against its own 45-degree rotation: a regular octagon
        // of area 2*(sqrt(2) - 1).
        let inter = convex_intersection(&square(0.0, 0.0, 0.5), &diamond(0.0, 0.0, 0.5));
        assert_eq!(inter.vertices().len(), 8);
        let expected = 2.0 * (std::f64::consts::SQRT_2 - 1.0);
        assert!((inter.area() - expected).abs() < 1e-12, "area {}", inter.area());
    }

    #[test]
    fn intersection_vertex_count_stays_in_contract_range() {
        // Rect-rect intersections are empty or have 3..=8 vertices.
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let p = rot_rect_poly(&mut rng);
            let q = rot_rect_poly(&mut rng);
            let n = convex_intersection(&p, &q).vertices().len();
            assert!(n == 0 || (3..=8).contains(&n), "vertex count {n}");
        }
    }

    fn rot_rect_poly(rng: &mut impl rand::Rng) -> ConvexPolygon {
        let cx = rng.gen_range(-3.0..3.0);
        let cy = rng.gen_range(-3.0..3.0);
        let hw = rng.gen_range(0.2..3.0);
        let hh = rng.gen_range(0.2..3.0);
        let th: f64 = rng.gen_range(-1.6..1.6);
        let (s, c) = th.sin_cos();
        let corner = |dx: f64, dy: f64| Point::new(cx + dx * c - dy * s, cy + dx * s + dy * c);
        ConvexPolygon::new(vec![
            corner(hw, hh),
            corner(-hw, hh),
            corner(-hw, -hh),
            corner(hw, -hh),
        ])
    }
}
