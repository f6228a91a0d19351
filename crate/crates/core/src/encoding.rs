//! Square/delta target encoding on a strided output grid, and decoding of
//! grid predictions back into rotated ellipses.
//!
//! Each object is summarized by the side `l = 2 * sqrt(a^2 + b^2)` of its
//! extended square (independent of rotation), plus the dimensionless deltas
//! `delta_a = a / l`, `delta_b = b / l`, and `delta_theta = theta / pi` with
//! the angle folded to `(-pi/2, pi/2]`. Localization uses per-class center
//! heatmaps with Gaussian splats and sub-cell center offsets.

use crate::geometry::Ellipse;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

/// Output stride of the detection grid relative to the input image.
pub const DEFAULT_STRIDE: usize = 4;

/// Heatmap value a cell must reach to qualify as a detection by default.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;

/// Floor applied to decoded semi-axes so degenerate head outputs still form
/// a valid ellipse.
pub const MIN_DECODED_AXIS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("stride must be >= 1")]
    ZeroStride,
    #[error("input {w}x{h} is not divisible by stride {stride}")]
    StrideMismatch { w: usize, h: usize, stride: usize },
    #[error("object center ({cx}, {cy}) outside image 0..={xmax} x 0..={ymax}")]
    CenterOutOfBounds { cx: f64, cy: f64, xmax: f64, ymax: f64 },
    #[error("class id {class} out of range (num_classes {num_classes})")]
    ClassOutOfRange { class: usize, num_classes: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("stride must be >= 1")]
    ZeroStride,
    #[error("head maps malformed: {0}")]
    MalformedHeads(String),
}

/// Folds an angle onto `(-pi/2, pi/2]`, identifying directions that differ
/// by a half turn. The boundary `-pi/2` maps to the closed end `pi/2`.
#[inline]
pub fn fold_angle(theta_raw: f64) -> f64 {
    let mut t = theta_raw % PI;
    if t > FRAC_PI_2 {
        t -= PI;
    } else if t <= -FRAC_PI_2 {
        // PI is exactly twice FRAC_PI_2 in f64, so -pi/2 lands on +pi/2.
        t += PI;
    }
    t
}

/// Wrap-aware distance between two folded-angle deltas (`theta / pi`
/// values): the shorter way around the period-1 circle, in `[0, 1/2]`.
/// Inputs outside `(-1/2, 1/2]` are wrapped first, so raw regression
/// outputs are valid arguments.
#[inline]
pub fn angle_delta(d1: f64, d2: f64) -> f64 {
    let d = (d1 - d2).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Side of the extended square: the rotation-independent size target
/// `l = 2 * sqrt(a^2 + b^2)`.
#[inline]
pub fn square_length(e: &Ellipse) -> f64 {
    2.0 * e.a().hypot(e.b())
}

/// Dense multi-channel grid of `f64` values, row-major within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GridMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        GridMap { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row-major slice of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &GridMap) -> bool {
        self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
    }
}

/// The six per-cell prediction targets (or network outputs): per-class
/// heatmap, center offset (channel 0 = x, channel 1 = y), square length in
/// input pixels, and the three deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    pub heatmap: GridMap,
    pub offset: GridMap,
    pub square_length: GridMap,
    pub delta_a: GridMap,
    pub delta_b: GridMap,
    pub delta_theta: GridMap,
}

impl HeadMaps {
    pub fn zeros(num_classes: usize, height: usize, width: usize) -> Self {
        HeadMaps {
            heatmap: GridMap::zeros(num_classes, height, width),
            offset: GridMap::zeros(2, height, width),
            square_length: GridMap::zeros(1, height, width),
            delta_a: GridMap::zeros(1, height, width),
            delta_b: GridMap::zeros(1, height, width),
            delta_theta: GridMap::zeros(1, height, width),
        }
    }

    pub fn grid_height(&self) -> usize {
        self.heatmap.height()
    }

    pub fn grid_width(&self) -> usize {
        self.heatmap.width()
    }

    pub fn num_classes(&self) -> usize {
        self.heatmap.channels()
    }

    fn validate(&self) -> Result<(), DecodeError> {
        let (h, w) = (self.heatmap.height(), self.heatmap.width());
        let expect = [
            ("offset", &self.offset, 2usize),
            ("square_length", &self.square_length, 1),
            ("delta_a", &self.delta_a, 1),
            ("delta_b", &self.delta_b, 1),
            ("delta_theta", &self.delta_theta, 1),
        ];
        if self.heatmap.channels() == 0 {
            return Err(DecodeError::MalformedHeads("heatmap has zero channels".into()));
        }
        for (name, map, channels) in expect {
            if map.channels() != channels || map.height() != h || map.width() != w {
                return Err(DecodeError::MalformedHeads(format!(
                    "{name} is {}x{}x{}, expected {channels}x{h}x{w}",
                    map.channels(),
                    map.height(),
                    map.width()
                )));
            }
        }
        Ok(())
    }
}

/// Encoded ground truth: head targets plus the supervision mask with a 1 at
/// each surviving object's center cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTargets {
    pub heads: HeadMaps,
    pub center_mask: GridMap,
    pub stride: usize,
    pub input_w: usize,
    pub input_h: usize,
}

impl EncodedTargets {
    /// Center cells with supervision, in row-major order.
    pub fn positive_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for y in 0..self.center_mask.height() {
            for x in 0..self.center_mask.width() {
                if self.center_mask.get(0, y, x) == 1.0 {
                    cells.push((x, y));
                }
            }
        }
        cells
    }
}

/// One decoded object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub ellipse: Ellipse,
}

/// Encodes ground-truth objects `(class_id, ellipse)` into grid targets.
///
/// Per-class heatmaps get a Gaussian splat at each object's center cell
/// (peak exactly 1, sigma `max(1, l / (6 * stride))` cells, truncated at 3
/// sigma, combined by elementwise max). Regression maps are written at the
/// center cell only. When two objects land on the same center cell the one
/// with larger `l` keeps the cell and the other is dropped with a warning.
pub fn encode(
    objects: &[(usize, Ellipse)],
    input_w: usize,
    input_h: usize,
    stride: usize,
    num_classes: usize,
) -> Result<EncodedTargets, EncodeError> {
    if stride == 0 {
        return Err(EncodeError::ZeroStride);
    }
    if input_w % stride != 0 || input_h % stride != 0 || input_w == 0 || input_h == 0 {
        return Err(EncodeError::StrideMismatch { w: input_w, h: input_h, stride });
    }
    let xmax = (input_w - 1) as f64;
    let ymax = (input_h - 1) as f64;
    for (class, e) in objects {
        if *class >= num_classes {
            return Err(EncodeError::ClassOutOfRange { class: *class, num_classes });
        }
        if e.cx() < 0.0 || e.cx() > xmax || e.cy() < 0.0 || e.cy() > ymax {
            return Err(EncodeError::CenterOutOfBounds { cx: e.cx(), cy: e.cy(), xmax, ymax });
        }
    }

    let gw = input_w / stride;
    let gh = input_h / stride;
    let s = stride as f64;

    // Resolve center-cell collisions first: larger square length wins.
    let mut winners: BTreeMap<(usize, usize), (usize, f64)> = BTreeMap::new();
    for (i, (_, e)) in objects.iter().enumerate() {
        let cell = ((e.cx() / s).floor() as usize, (e.cy() / s).floor() as usize);
        let l = square_length(e);
        match winners.get(&cell) {
            Some(&(prev, prev_l)) if prev_l >= l => {
                log::warn!(
                    "dropping object {i} (l = {l:.3}): center cell {cell:?} already taken by \
                     object {prev} with l = {prev_l:.3}"
                );
            }
            Some(&(prev, prev_l)) => {
                log::warn!(
                    "dropping object {prev} (l = {prev_l:.3}): center cell {cell:?} taken by \
                     object {i} with larger l = {l:.3}"
                );
                winners.insert(cell, (i, l));
            }
            None => {
                winners.insert(cell, (i, l));
            }
        }
    }

    let mut heads = HeadMaps::zeros(num_classes, gh, gw);
    let mut center_mask = GridMap::zeros(1, gh, gw);
    for (&(cx_cell, cy_cell), &(i, l)) in &winners {
        let (class, e) = &objects[i];
        let sigma = (l / (6.0 * s)).max(1.0);
        let radius = (3.0 * sigma).ceil() as isize;
        let cut2 = (3.0 * sigma) * (3.0 * sigma);
        for dy in -radius..=radius {
            let y = cy_cell as isize + dy;
            if y < 0 || y >= gh as isize {
                continue;
            }
            for dx in -radius..=radius {
                let x = cx_cell as isize + dx;
                if x < 0 || x >= gw as isize {
                    continue;
                }
                let d2 = (dx * dx + dy * dy) as f64;
                if d2 > cut2 {
                    continue;
                }
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                let (xu, yu) = (x as usize, y as usize);
                if v > heads.heatmap.get(*class, yu, xu) {
                    heads.heatmap.set(*class, yu, xu, v);
                }
            }
        }

        heads.offset.set(0, cy_cell, cx_cell, e.cx() / s - cx_cell as f64);
        heads.offset.set(1, cy_cell, cx_cell, e.cy() / s - cy_cell as f64);
        heads.square_length.set(0, cy_cell, cx_cell, l);
        heads.delta_a.set(0, cy_cell, cx_cell, e.a() / l);
        heads.delta_b.set(0, cy_cell, cx_cell, e.b() / l);
        heads.delta_theta.set(0, cy_cell, cx_cell, e.theta() / PI);
        center_mask.set(0, cy_cell, cx_cell, 1.0);
    }

    Ok(EncodedTargets { heads, center_mask, stride, input_w, input_h })
}

/// A cell is a peak iff no 3x3 neighbor strictly exceeds it and no
/// equal-valued neighbor has a lower row-major index.
fn is_peak(hm: &GridMap, c: usize, x: usize, y: usize) -> bool {
    let w = hm.width();
    let h = hm.height();
    let v = hm.get(c, y, x);
    let idx = y * w + x;
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let nx = x as isize + dx;
            let ny = y as isize + dy;
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let nv = hm.get(c, ny as usize, nx as usize);
            if nv > v || (nv == v && (ny as usize) * w + (nx as usize) < idx) {
                return false;
            }
        }
    }
    true
}

/// Peak cells of one heatmap channel, strongest first (row-major index
/// breaks exact ties).
pub(crate) fn find_peaks(
    hm: &GridMap,
    class: usize,
    score_threshold: f64,
) -> Vec<(usize, usize, f64)> {
    let mut peaks = Vec::new();
    for y in 0..hm.height() {
        for x in 0..hm.width() {
            let v = hm.get(class, y, x);
            if v >= score_threshold && is_peak(hm, class, x, y) {
                peaks.push((x, y, v));
            }
        }
    }
    peaks.sort_by(|p, q| {
        q.2.partial_cmp(&p.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((p.1 * hm.width() + p.0).cmp(&(q.1 * hm.width() + q.0)))
    });
    peaks
}

/// Decoded ellipse at one grid cell, plus which branches the decode
/// arithmetic took (needed to route gradients through the same arithmetic).
#[derive(Debug, Clone, Copy)]
pub(crate) struct CellDecode {
    pub ellipse: Ellipse,
    /// Raw head readings the ellipse was built from.
    pub delta_a: f64,
    pub delta_b: f64,
    pub length: f64,
    /// Axes came out in the wrong order and were swapped.
    pub swapped: bool,
    /// `delta * length` fell below the axis floor.
    pub a_clamped: bool,
    pub b_clamped: bool,
}

/// Reconstructs the ellipse encoded at one grid cell. Returns `None` when
/// the cell's values are not finite.
pub(crate) fn decode_cell_parts(
    heads: &HeadMaps,
    stride: usize,
    x: usize,
    y: usize,
) -> Option<CellDecode> {
    let s = stride as f64;
    let off_x = heads.offset.get(0, y, x);
    let off_y = heads.offset.get(1, y, x);
    let l = heads.square_length.get(0, y, x);
    let da = heads.delta_a.get(0, y, x);
    let db = heads.delta_b.get(0, y, x);
    let dth = heads.delta_theta.get(0, y, x);
    let cx = (x as f64 + off_x) * s;
    let cy = (y as f64 + off_y) * s;
    let a_raw = da * l;
    let b_raw = db * l;
    let a = a_raw.max(MIN_DECODED_AXIS);
    let b = b_raw.max(MIN_DECODED_AXIS);
    let theta = fold_angle(dth * PI);
    let ellipse = Ellipse::canonical(cx, cy, a, b, theta).ok()?;
    Some(CellDecode {
        ellipse,
        delta_a: da,
        delta_b: db,
        length: l,
        swapped: a < b,
        a_clamped: a_raw < MIN_DECODED_AXIS,
        b_clamped: b_raw < MIN_DECODED_AXIS,
    })
}

pub(crate) fn decode_cell(heads: &HeadMaps, stride: usize, x: usize, y: usize) -> Option<Ellipse> {
    decode_cell_parts(heads, stride, x, y).map(|c| c.ellipse)
}

/// Decodes grid predictions into at most `max_per_class` detections per
/// class. Detections are returned grouped by class id, strongest first.
pub fn decode(
    heads: &HeadMaps,
    stride: usize,
    max_per_class: usize,
    score_threshold: f64,
) -> Result<Vec<Detection>, DecodeError> {
    if stride == 0 {
        return Err(DecodeError::ZeroStride);
    }
    heads.validate()?;
    let mut detections = Vec::new();
    for class in 0..heads.num_classes() {
        for &(x, y, score) in find_peaks(&heads.heatmap, class, score_threshold)
            .iter()
            .take(max_per_class)
        {
            if let Some(ellipse) = decode_cell(heads, stride, x, y) {
                detections.push(Detection { class_id: class, score, ellipse });
            }
        }
    }
    Ok(detections)
}
