//! Rotated-ellipse geometry: tight bounding rectangles, exact rotated-rect
//! IoU via convex clipping, the distance-IoU penalty, and rasterization
//! oracles for masks and ellipse-ellipse IoU.

mod mask;
mod polygon;

pub use mask::{ellipse_dice_oracle, ellipse_iou_oracle, mask_dice, rasterize_ellipse, BinaryMask};
pub use polygon::{
    convex_intersection, polygon_area, ConvexPolygon, Point, CLIP_TOL, DEGENERATE_AREA_TOL,
};

use crate::encoding::fold_angle;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid ellipse axes a={a}, b={b}: need finite a >= b > 0")]
    InvalidAxes { a: f64, b: f64 },
    #[error("non-finite ellipse parameter")]
    NonFinite,
    #[error("invalid rect extents w={w}, h={h}: need finite w, h > 0")]
    InvalidExtents { w: f64, h: f64 },
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("rasterization grid is empty")]
    EmptyGrid,
}

/// Rotated ellipse: center `(cx, cy)`, semi-major axis `a`, semi-minor axis
/// `b` with `a >= b > 0`, and rotation `theta` of the major axis, folded to
/// `(-pi/2, pi/2]`. Serialization goes through a plain record so
/// deserialized values re-run the constructor checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EllipseRecord", into = "EllipseRecord")]
pub struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

#[derive(Serialize, Deserialize)]
struct EllipseRecord {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl TryFrom<EllipseRecord> for Ellipse {
    type Error = GeometryError;
    fn try_from(r: EllipseRecord) -> Result<Self, GeometryError> {
        Ellipse::new(r.cx, r.cy, r.a, r.b, r.theta)
    }
}

impl From<Ellipse> for EllipseRecord {
    fn from(e: Ellipse) -> Self {
        EllipseRecord { cx: e.cx, cy: e.cy, a: e.a, b: e.b, theta: e.theta }
    }
}

impl Ellipse {
    /// Builds an ellipse, folding `theta`. Fails if `a < b` or axes are not
    /// strictly positive and finite.
    pub fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Result<Self, GeometryError> {
        if !(cx.is_finite() && cy.is_finite() && theta.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if !(a.is_finite() && b.is_finite() && b > 0.0 && a >= b) {
            return Err(GeometryError::InvalidAxes { a, b });
        }
        Ok(Ellipse { cx, cy, a, b, theta: fold_angle(theta) })
    }

    /// Like [`Ellipse::new`] but accepts axes in either order: if `a < b`
    /// the axes are swapped and the rotation advanced by pi/2, yielding the
    /// same point set in canonical form.
    pub fn canonical(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Result<Self, GeometryError> {
        if a < b {
            Ellipse::new(cx, cy, b, a, theta + std::f64::consts::FRAC_PI_2)
        } else {
            Ellipse::new(cx, cy, a, b, theta)
        }
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    /// Semi-major axis.
    pub fn a(&self) -> f64 {
        self.a
    }

    /// Semi-minor axis.
    pub fn b(&self) -> f64 {
        self.b
    }

    /// Major-axis rotation in `(-pi/2, pi/2]`.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Left-hand side of the ellipse inequality at `(x, y)`: values <= 1 are
    /// inside or on the boundary.
    #[inline]
    pub fn implicit(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (s, c) = self.theta.sin_cos();
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        let u = xr / self.a;
        let v = yr / self.b;
        u * u + v * v
    }

    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.implicit(x, y) <= 1.0
    }

    /// Tight rotated bounding rectangle: same center and rotation, extents
    /// `2a` by `2b`.
    pub fn tight_rect(&self) -> RotatedRect {
        RotatedRect {
            cx: self.cx,
            cy: self.cy,
            w: 2.0 * self.a,
            h: 2.0 * self.b,
            theta: self.theta,
        }
    }

    /// Half-extents of the axis-aligned bounding box.
    pub fn aabb_half_extents(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let ex = ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt();
        let ey = ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt();
        (ex, ey)
    }

    /// Area `pi * a * b`.
    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.a * self.b
    }

    /// Ramanujan's second approximation of the perimeter; used only for
    /// discretization-error bounds, never for exact values.
    pub fn perimeter_approx(&self) -> f64 {
        let h = ((self.a - self.b) / (self.a + self.b)).powi(2);
        std::f64::consts::PI
            * (self.a + self.b)
            * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()))
    }
}

/// Rotated rectangle: center, full extents `w` (along the rotated x-axis)
/// and `h`, rotation `theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotatedRect {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta: f64,
}

impl RotatedRect {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self, GeometryError> {
        if !(cx.is_finite() && cy.is_finite() && theta.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(GeometryError::InvalidExtents { w, h });
        }
        Ok(RotatedRect { cx, cy, w, h, theta })
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corners in counter-clockwise order starting from the rotated image of
    /// `(+w/2, +h/2)`.
    pub fn vertices(&self) -> [Point; 4] {
        let (s, c) = self.theta.sin_cos();
        let corner = |dx: f64, dy: f64| {
            Point::new(self.cx + dx * c - dy * s, self.cy + dx * s + dy * c)
        };
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        [corner(hw, hh), corner(-hw, hh), corner(-hw, -hh), corner(hw, -hh)]
    }

    pub fn to_polygon(&self) -> ConvexPolygon {
        ConvexPolygon::new(self.vertices().to_vec())
    }
}

/// Exact IoU of two rotated rectangles via convex clipping, clamped to
/// `[0, 1]`.
pub fn rotated_rect_iou(r1: &RotatedRect, r2: &RotatedRect) -> f64 {
    let inter = convex_intersection(&r1.to_polygon(), &r2.to_polygon()).area();
    let union = r1.area() + r2.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Pieces of the distance-IoU penalty between the tight rectangles of two
/// ellipses: their IoU, the squared center distance `rho2`, and the squared
/// diagonal `c2` of the axis-aligned box enclosing all eight rect vertices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiouComponents {
    pub iou: f64,
    pub rho2: f64,
    pub c2: f64,
}

pub fn diou_components(e1: &Ellipse, e2: &Ellipse) -> DiouComponents {
    let r1 = e1.tight_rect();
    let r2 = e2.tight_rect();
    let iou = rotated_rect_iou(&r1, &r2);
    let dx = e1.cx - e2.cx;
    let dy = e1.cy - e2.cy;
    let rho2 = dx * dx + dy * dy;

    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for v in r1.vertices().iter().chain(r2.vertices().iter()) {
        xmin = xmin.min(v.x);
        xmax = xmax.max(v.x);
        ymin = ymin.min(v.y);
        ymax = ymax.max(v.y);
    }
    let w = xmax - xmin;
    let h = ymax - ymin;
    DiouComponents { iou, rho2, c2: w * w + h * h }
}

/// Distance-IoU loss `1 - IoU + rho^2 / c^2`, in `[0, 2)`. The center term
/// keeps a useful gradient when the rectangles do not overlap.
pub fn diou_loss(e1: &Ellipse, e2: &Ellipse) -> f64 {
    let c = diou_components(e1, e2);
    1.0 - c.iou + c.rho2 / c.c2
}
