//! Independent rasterization oracles for the acceptance checks. These
//! deliberately avoid the library's polygon clipping and mask code: shapes
//! are tested point-by-point from their defining inequalities, so agreement
//! with the library is evidence, not circularity.

use ellipsedet::{Ellipse, RotatedRect};

/// Prints the shared pass/fail line and then enforces it.
pub fn verdict(ok: bool, label: &str, detail: &str) {
    println!("[{}] {label}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{label}: {detail}");
}

fn rect_corners(r: &RotatedRect) -> [(f64, f64); 4] {
    let (s, c) = r.theta().sin_cos();
    let (hw, hh) = (0.5 * r.w(), 0.5 * r.h());
    [(hw, hh), (-hw, hh), (-hw, -hh), (hw, -hh)]
        .map(|(x, y)| (r.cx() + x * c - y * s, r.cy() + x * s + y * c))
}

fn rect_contains(r: &RotatedRect, px: f64, py: f64) -> bool {
    let (s, c) = r.theta().sin_cos();
    let (dx, dy) = (px - r.cx(), py - r.cy());
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    u.abs() <= 0.5 * r.w() && v.abs() <= 0.5 * r.h()
}

fn ellipse_contains(e: &Ellipse, px: f64, py: f64) -> bool {
    let (s, c) = e.theta().sin_cos();
    let (dx, dy) = (px - e.cx(), py - e.cy());
    let u = (dx * c + dy * s) / e.a();
    let v = (-dx * s + dy * c) / e.b();
    u * u + v * v <= 1.0
}

/// Area-sampling IoU over the pair's joint bounding box with `resolution`
/// cells along the longer side. Cells near an edge are refined with a 4x4
/// subgrid so the estimate is quadrature-limited, not cell-size-limited.
fn sampled_iou(
    contains1: &dyn Fn(f64, f64) -> bool,
    contains2: &dyn Fn(f64, f64) -> bool,
    bounds: (f64, f64, f64, f64),
    resolution: usize,
) -> f64 {
    let (x0, x1, y0, y1) = bounds;
    let extent = (x1 - x0).max(y1 - y0);
    let cell = extent / resolution as f64;
    let nx = ((x1 - x0) / cell).ceil() as usize;
    let ny = ((y1 - y0) / cell).ceil() as usize;
    let (mut a1, mut a2, mut inter) = (0.0f64, 0.0f64, 0.0f64);
    let sub = 4usize;
    let subw = 1.0 / (sub as f64 * sub as f64);
    for iy in 0..ny {
        let cy = y0 + (iy as f64 + 0.5) * cell;
        for ix in 0..nx {
            let cx = x0 + (ix as f64 + 0.5) * cell;
            let c1 = contains1(cx, cy);
            let c2 = contains2(cx, cy);
            // A corner disagreeing with the center marks a boundary cell.
            let mixed = [(-0.5, -0.5), (0.5, -0.5), (-0.5, 0.5), (0.5, 0.5)]
                .iter()
                .any(|(ox, oy)| {
                    let (px, py) = (cx + ox * cell, cy + oy * cell);
                    contains1(px, py) != c1 || contains2(px, py) != c2
                });
            if !mixed {
                a1 += c1 as u8 as f64;
                a2 += c2 as u8 as f64;
                inter += (c1 && c2) as u8 as f64;
                continue;
            }
            for sy in 0..sub {
                let py = cy + ((sy as f64 + 0.5) / sub as f64 - 0.5) * cell;
                for sx in 0..sub {
                    let px = cx + ((sx as f64 + 0.5) / sub as f64 - 0.5) * cell;
                    let s1 = contains1(px, py);
                    let s2 = contains2(px, py);
                    a1 += s1 as u8 as f64 * subw;
                    a2 += s2 as u8 as f64 * subw;
                    inter += (s1 && s2) as u8 as f64 * subw;
                }
            }
        }
    }
    let union = a1 + a2 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Rect-pair IoU by area sampling; never touches the clipping code.
pub fn rect_iou_raster(r1: &RotatedRect, r2: &RotatedRect, resolution: usize) -> f64 {
    let pts: Vec<(f64, f64)> =
        rect_corners(r1).into_iter().chain(rect_corners(r2)).collect();
    let bounds = bounding(&pts);
    sampled_iou(
        &|x, y| rect_contains(r1, x, y),
        &|x, y| rect_contains(r2, x, y),
        bounds,
        resolution,
    )
}

/// Ellipse-pair dice by area sampling on the joint bounding box.
pub fn ellipse_dice_raster(e1: &Ellipse, e2: &Ellipse, resolution: usize) -> f64 {
    let pts: Vec<(f64, f64)> = [e1, e2]
        .iter()
        .flat_map(|e| {
            let m = e.a().max(e.b());
            [(e.cx() - m, e.cy() - m), (e.cx() + m, e.cy() + m)]
        })
        .collect();
    let (x0, x1, y0, y1) = bounding(&pts);
    let extent = (x1 - x0).max(y1 - y0);
    let cell = extent / resolution as f64;
    let nx = ((x1 - x0) / cell).ceil() as usize;
    let ny = ((y1 - y0) / cell).ceil() as usize;
    let (mut a1, mut a2, mut inter) = (0usize, 0usize, 0usize);
    for iy in 0..ny {
        let py = y0 + (iy as f64 + 0.5) * cell;
        for ix in 0..nx {
            let px = x0 + (ix as f64 + 0.5) * cell;
            let c1 = ellipse_contains(e1, px, py);
            let c2 = ellipse_contains(e2, px, py);
            a1 += c1 as usize;
            a2 += c2 as usize;
            inter += (c1 && c2) as usize;
        }
    }
    if a1 + a2 == 0 {
        0.0
    } else {
        2.0 * inter as f64 / (a1 + a2) as f64
    }
}

fn bounding(pts: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    let fold = |init: f64, f: &dyn Fn(f64, f64) -> f64, pick: &dyn Fn(&(f64, f64)) -> f64| {
        pts.iter().map(pick).fold(init, |a, b| f(a, b))
    };
    let x0 = fold(f64::INFINITY, &f64::min, &|p| p.0) - 1e-9;
    let x1 = fold(f64::NEG_INFINITY, &f64::max, &|p| p.0) + 1e-9;
    let y0 = fold(f64::INFINITY, &f64::min, &|p| p.1) - 1e-9;
    let y1 = fold(f64::NEG_INFINITY, &f64::max, &|p| p.1) + 1e-9;
    (x0, x1, y0, y1)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
