//! Rasterization of ellipses to binary masks, mask dice, and the
//! rasterization-based ellipse-ellipse IoU oracle.
//!
//! Sampling convention: the pixel at index `(x, y)` is sampled at the
//! continuous point `(x, y)` (integer pixel centers). Scene coordinates
//! throughout the crate use this convention; in particular a left-right flip
//! of a `W`-wide image maps the continuous coordinate `cx` to `W - 1 - cx`.

use super::{Ellipse, GeometryError};

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask { width, height, bits: vec![false; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }
}

/// Rasterizes an ellipse onto a `width x height` grid. With `supersample`
/// of 1 each pixel is tested at its center; with `k > 1` a pixel is set iff
/// a strict majority of its `k x k` uniformly spaced subsamples fall inside
/// the ellipse (boundary included).
pub fn rasterize_ellipse(
    e: &Ellipse,
    width: usize,
    height: usize,
    supersample: usize,
) -> Result<BinaryMask, GeometryError> {
    if supersample == 0 {
        return Err(GeometryError::EmptyGrid);
    }
    let mut mask = BinaryMask::new(width, height);
    if width == 0 || height == 0 {
        return Ok(mask);
    }

    // Only pixels inside the (padded) bounding box can be set.
    let (ex, ey) = e.aabb_half_extents();
    let x0 = (e.cx() - ex - 1.0).floor().max(0.0) as usize;
    let y0 = (e.cy() - ey - 1.0).floor().max(0.0) as usize;
    if e.cx() + ex < -1.0 || e.cy() + ey < -1.0 {
        return Ok(mask);
    }
    let x1 = ((e.cx() + ex + 1.0).ceil().max(0.0) as usize).min(width.saturating_sub(1));
    let y1 = ((e.cy() + ey + 1.0).ceil().max(0.0) as usize).min(height.saturating_sub(1));
    if x0 > x1 || y0 > y1 {
        return Ok(mask);
    }

    let k = supersample;
    let majority = (k * k) / 2; // set iff count > majority
    for y in y0..=y1 {
        for x in x0..=x1 {
            let inside = if k == 1 {
                e.contains(x as f64, y as f64)
            } else {
                let mut count = 0usize;
                for sy in 0..k {
                    let py = y as f64 - 0.5 + (sy as f64 + 0.5) / k as f64;
                    for sx in 0..k {
                        let px = x as f64 - 0.5 + (sx as f64 + 0.5) / k as f64;
                        if e.contains(px, py) {
                            count += 1;
                        }
                    }
                }
                count > majority
            };
            if inside {
                mask.set(x, y, true);
            }
        }
    }
    Ok(mask)
}

/// Dice coefficient `2|A intersect B| / (|A| + |B|)` of two same-shape
/// masks. Two empty masks have dice 1 (perfect agreement on "nothing").
pub fn mask_dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64, GeometryError> {
    if a.width != b.width || a.height != b.height {
        return Err(GeometryError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&pa, &pb) in a.bits.iter().zip(b.bits.iter()) {
        inter += (pa && pb) as usize;
        total += pa as usize + pb as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Supersampling factor used by the IoU oracle (2x2 subsamples per pixel).
pub const ORACLE_SUPERSAMPLE: usize = 2;

/// Rasterizes both ellipses onto a common grid covering their joint
/// bounding box, with `resolution` pixels along the longer side.
fn joint_masks(
    e1: &Ellipse,
    e2: &Ellipse,
    resolution: usize,
) -> Result<(BinaryMask, BinaryMask), GeometryError> {
    if resolution == 0 {
        return Err(GeometryError::EmptyGrid);
    }
    let (ex1, ey1) = e1.aabb_half_extents();
    let (ex2, ey2) = e2.aabb_half_extents();
    let xmin = (e1.cx() - ex1).min(e2.cx() - ex2);
    let xmax = (e1.cx() + ex1).max(e2.cx() + ex2);
    let ymin = (e1.cy() - ey1).min(e2.cy() - ey2);
    let ymax = (e1.cy() + ey1).max(e2.cy() + ey2);
    let extent = (xmax - xmin).max(ymax - ymin);
    debug_assert!(extent > 0.0);

    // Uniform world-to-grid scale; 2-pixel pad so boundary subsamples of
    // edge pixels stay on the grid.
    let scale = resolution as f64 / extent;
    let pad = 2.0;
    let gw = ((xmax - xmin) * scale + 2.0 * pad).ceil() as usize + 1;
    let gh = ((ymax - ymin) * scale + 2.0 * pad).ceil() as usize + 1;
    let to_grid = |e: &Ellipse| {
        Ellipse::new(
            (e.cx() - xmin) * scale + pad,
            (e.cy() - ymin) * scale + pad,
            e.a() * scale,
            e.b() * scale,
            e.theta(),
        )
        .expect("uniform scaling preserves ellipse validity")
    };
    Ok((
        rasterize_ellipse(&to_grid(e1), gw, gh, ORACLE_SUPERSAMPLE)?,
        rasterize_ellipse(&to_grid(e2), gw, gh, ORACLE_SUPERSAMPLE)?,
    ))
}

/// Rasterization-based IoU of two ellipses on a joint grid. Used as the
/// independent oracle for the clipping-based IoU and as the exact-shape IoU
/// the tight-rect IoU approximates.
pub fn ellipse_iou_oracle(
    e1: &Ellipse,
    e2: &Ellipse,
    resolution: usize,
) -> Result<f64, GeometryError> {
    let (m1, m2) = joint_masks(e1, e2, resolution)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p1, &p2) in m1.as_slice().iter().zip(m2.as_slice().iter()) {
        inter += (p1 && p2) as usize;
        union += (p1 || p2) as usize;
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Rasterization-based dice of two ellipses on a joint grid, resolution
/// pixels along the longer side of the joint bounding box. Used to score
/// fitted ellipses against their target independently of any image frame.
pub fn ellipse_dice_oracle(
    e1: &Ellipse,
    e2: &Ellipse,
    resolution: usize,
) -> Result<f64, GeometryError> {
    let (m1, m2) = joint_masks(e1, e2, resolution)?;
    mask_dice(&m1, &m2)
}
