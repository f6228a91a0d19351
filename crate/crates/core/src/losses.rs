//! Training losses: penalty-reduced focal loss on the center heatmaps,
//! masked L1 terms for size/offset/delta regression with a wrap-aware angle
//! distance, and the distance-IoU loss on decoded ellipses.
//!
//! The composite objective is
//! `total = lambda_q * (heatmap + lambda_size * size + lambda_off * offset)
//!        + lambda_e * (delta_a + delta_b + lambda_dtheta * delta_theta)
//!        + lambda_iou * iou`.
//!
//! Gradients are analytic for the focal and L1 terms (L1 subgradient at a
//! kink is 0); the DIoU term is differentiated by central finite differences
//! in ellipse parameters and chained analytically through the decode
//! arithmetic back to the head maps.

use crate::encoding::{
    angle_delta, decode_cell_parts, CellDecode, EncodedTargets, GridMap, HeadMaps,
};
use crate::geometry::{diou_loss, Ellipse};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Focal exponent on the prediction factor.
pub const FOCAL_ALPHA: f64 = 2.0;
/// Focal exponent on the target-based penalty reduction at negatives.
pub const FOCAL_BETA: f64 = 4.0;
/// Predictions are clamped to `[CLAMP, 1 - CLAMP]` before the logs.
pub const FOCAL_CLAMP: f64 = 1e-7;
/// Relative step of the central finite differences behind `diou_gradient`.
pub const DIOU_FD_STEP: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("ground-truth heatmap has no cells equal to 1")]
    NoPositiveCells,
    #[error("loss inputs malformed: {0}")]
    ShapeMismatch(String),
    #[error("ellipse batch lengths differ: {pred} predictions vs {gt} targets")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("ellipse batch is empty")]
    EmptyBatch,
    #[error("non-finite values in supervised cells")]
    NonFinite,
}

/// Weights of the composite loss. `lambda_size` and `lambda_dtheta` rescale
/// terms inside their group; the three group weights multiply whole groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_q: f64,
    pub lambda_e: f64,
    pub lambda_iou: f64,
    pub lambda_size: f64,
    pub lambda_off: f64,
    pub lambda_dtheta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_q: 1.0,
            lambda_e: 1.0,
            lambda_iou: 1.0,
            lambda_size: 0.1,
            lambda_off: 1.0,
            lambda_dtheta: 5.0,
        }
    }
}

/// Unweighted per-term values plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub heatmap: f64,
    pub size: f64,
    pub offset: f64,
    pub delta_a: f64,
    pub delta_b: f64,
    pub delta_theta: f64,
    pub iou: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Composes the weighted total from raw term values.
    #[allow(clippy::too_many_arguments)]
    pub fn compose(
        heatmap: f64,
        size: f64,
        offset: f64,
        delta_a: f64,
        delta_b: f64,
        delta_theta: f64,
        iou: f64,
        w: &LossWeights,
    ) -> Self {
        let total = w.lambda_q * (heatmap + w.lambda_size * size + w.lambda_off * offset)
            + w.lambda_e * (delta_a + delta_b + w.lambda_dtheta * delta_theta)
            + w.lambda_iou * iou;
        LossBreakdown { heatmap, size, offset, delta_a, delta_b, delta_theta, iou, total }
    }

    pub fn zeros() -> Self {
        LossBreakdown {
            heatmap: 0.0,
            size: 0.0,
            offset: 0.0,
            delta_a: 0.0,
            delta_b: 0.0,
            delta_theta: 0.0,
            iou: 0.0,
            total: 0.0,
        }
    }
}

fn require_same_shape(name: &str, pred: &GridMap, gt: &GridMap) -> Result<(), LossError> {
    if !pred.same_shape(gt) {
        return Err(LossError::ShapeMismatch(format!(
            "{name}: prediction {}x{}x{} vs target {}x{}x{}",
            pred.channels(),
            pred.height(),
            pred.width(),
            gt.channels(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

fn require_mask(mask: &GridMap, like: &GridMap) -> Result<usize, LossError> {
    if mask.channels() != 1 || mask.height() != like.height() || mask.width() != like.width() {
        return Err(LossError::ShapeMismatch(format!(
            "mask is {}x{}x{}, expected 1x{}x{}",
            mask.channels(),
            mask.height(),
            mask.width(),
            like.height(),
            like.width()
        )));
    }
    let n = mask.data().iter().filter(|&&v| v == 1.0).count();
    if n == 0 {
        return Err(LossError::NoPositiveCells);
    }
    Ok(n)
}

/// Penalty-reduced focal loss over per-class heatmaps, normalized by the
/// number of cells whose target is exactly 1.
pub fn focal_heatmap_loss(pred: &GridMap, gt: &GridMap) -> Result<f64, LossError> {
    focal_heatmap_grad(pred, gt).map(|(loss, _)| loss)
}

/// Focal loss plus its gradient with respect to every predicted heatmap
/// value. Cells clamped at the probability bounds get zero gradient.
pub fn focal_heatmap_grad(pred: &GridMap, gt: &GridMap) -> Result<(f64, GridMap), LossError> {
    require_same_shape("heatmap", pred, gt)?;
    let n = gt.data().iter().filter(|&&v| v == 1.0).count();
    if n == 0 {
        return Err(LossError::NoPositiveCells);
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = GridMap::zeros(pred.channels(), pred.height(), pred.width());
    let gdata = grad.data_mut();
    let mut loss = 0.0;
    for (i, (&p, &y)) in pred.data().iter().zip(gt.data().iter()).enumerate() {
        let pc = p.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
        let interior = p > FOCAL_CLAMP && p < 1.0 - FOCAL_CLAMP;
        if y == 1.0 {
            let q = 1.0 - pc;
            loss -= inv_n * q.powf(FOCAL_ALPHA) * pc.ln();
            if interior {
                gdata[i] = -inv_n
                    * (-FOCAL_ALPHA * q.powf(FOCAL_ALPHA - 1.0) * pc.ln()
                        + q.powf(FOCAL_ALPHA) / pc);
            }
        } else {
            let py = (1.0 - y).powf(FOCAL_BETA);
            loss -= inv_n * py * pc.powf(FOCAL_ALPHA) * (1.0 - pc).ln();
            if interior {
                gdata[i] = -inv_n
                    * py
                    * (FOCAL_ALPHA * pc.powf(FOCAL_ALPHA - 1.0) * (1.0 - pc).ln()
                        - pc.powf(FOCAL_ALPHA) / (1.0 - pc));
            }
        }
    }
    Ok((loss, grad))
}

/// Mean absolute error over masked cells, summing all channels per cell.
pub fn l1_map_loss(pred: &GridMap, gt: &GridMap, mask: &GridMap) -> Result<f64, LossError> {
    l1_map_grad(pred, gt, mask).map(|(loss, _)| loss)
}

/// Masked L1 loss plus gradient; the subgradient at zero error is 0.
pub fn l1_map_grad(
    pred: &GridMap,
    gt: &GridMap,
    mask: &GridMap,
) -> Result<(f64, GridMap), LossError> {
    require_same_shape("l1", pred, gt)?;
    let n = require_mask(mask, pred)?;
    let inv_n = 1.0 / n as f64;
    let mut grad = GridMap::zeros(pred.channels(), pred.height(), pred.width());
    let mut loss = 0.0;
    for c in 0..pred.channels() {
        for y in 0..pred.height() {
            for x in 0..pred.width() {
                if mask.get(0, y, x) != 1.0 {
                    continue;
                }
                let d = pred.get(c, y, x) - gt.get(c, y, x);
                loss += inv_n * d.abs();
                grad.set(c, y, x, inv_n * sign(d));
            }
        }
    }
    Ok((loss, grad))
}

/// Wrap-aware mean angle-delta distance over masked cells.
pub fn delta_theta_map_loss(
    pred: &GridMap,
    gt: &GridMap,
    mask: &GridMap,
) -> Result<f64, LossError> {
    delta_theta_map_grad(pred, gt, mask).map(|(loss, _)| loss)
}

/// Wrap-aware angle loss plus gradient. At the two kinks (zero distance and
/// the antipode) the subgradient is 0.
pub fn delta_theta_map_grad(
    pred: &GridMap,
    gt: &GridMap,
    mask: &GridMap,
) -> Result<(f64, GridMap), LossError> {
    require_same_shape("delta_theta", pred, gt)?;
    if pred.channels() != 1 {
        return Err(LossError::ShapeMismatch("delta_theta maps must have 1 channel".into()));
    }
    let n = require_mask(mask, pred)?;
    let inv_n = 1.0 / n as f64;
    let mut grad = GridMap::zeros(1, pred.height(), pred.width());
    let mut loss = 0.0;
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if mask.get(0, y, x) != 1.0 {
                continue;
            }
            let p = pred.get(0, y, x);
            let g = gt.get(0, y, x);
            loss += inv_n * angle_delta(p, g);
            let w = (p - g).rem_euclid(1.0);
            let slope = if w == 0.0 || w == 0.5 {
                0.0
            } else if w < 0.5 {
                1.0
            } else {
                -1.0
            };
            grad.set(0, y, x, inv_n * slope);
        }
    }
    Ok((loss, grad))
}

/// Mean DIoU loss over aligned prediction/target pairs.
pub fn iou_loss_batch(pred: &[Ellipse], gt: &[Ellipse]) -> Result<f64, LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    if pred.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let sum: f64 = pred.iter().zip(gt.iter()).map(|(p, g)| diou_loss(p, g)).sum();
    Ok(sum / pred.len() as f64)
}

/// Gradient of `diou_loss(pred, gt)` with respect to the prediction's
/// `(cx, cy, a, b, theta)` by central finite differences with relative step
/// `DIOU_FD_STEP`. Perturbed parameter sets are rebuilt canonically, so the
/// value is the derivative of the loss as actually evaluated; when an axis
/// step would leave the valid range the difference is one-sided.
pub fn diou_gradient(pred: &Ellipse, gt: &Ellipse) -> [f64; 5] {
    let p = [pred.cx(), pred.cy(), pred.a(), pred.b(), pred.theta()];
    let eval = |q: [f64; 5]| -> f64 {
        let e = Ellipse::canonical(q[0], q[1], q[2], q[3], q[4])
            .expect("perturbed axes stay positive");
        diou_loss(&e, gt)
    };
    let mut grad = [0.0; 5];
    for (i, g) in grad.iter_mut().enumerate() {
        let h = DIOU_FD_STEP * p[i].abs().max(1.0);
        let axis = i == 2 || i == 3;
        let mut hi = p;
        let mut lo = p;
        hi[i] += h;
        if axis && p[i] - h <= 0.0 {
            *g = (eval(hi) - eval(p)) / h;
        } else {
            lo[i] -= h;
            *g = (eval(hi) - eval(lo)) / (2.0 * h);
        }
    }
    grad
}

fn teacher_forced_pairs(
    pred: &HeadMaps,
    gt: &EncodedTargets,
) -> Result<Vec<(CellDecode, Ellipse, usize, usize)>, LossError> {
    let cells = gt.positive_cells();
    if cells.is_empty() {
        return Err(LossError::NoPositiveCells);
    }
    let mut pairs = Vec::with_capacity(cells.len());
    for (x, y) in cells {
        let p = decode_cell_parts(pred, gt.stride, x, y).ok_or(LossError::NonFinite)?;
        let g = decode_cell_parts(&gt.heads, gt.stride, x, y)
            .ok_or(LossError::NonFinite)?
            .ellipse;
        pairs.push((p, g, x, y));
    }
    Ok(pairs)
}

fn component_losses(pred: &HeadMaps, gt: &EncodedTargets) -> Result<LossBreakdown, LossError> {
    let mask = &gt.center_mask;
    let heatmap = focal_heatmap_loss(&pred.heatmap, &gt.heads.heatmap)?;
    let size = l1_map_loss(&pred.square_length, &gt.heads.square_length, mask)?;
    let offset = l1_map_loss(&pred.offset, &gt.heads.offset, mask)?;
    let delta_a = l1_map_loss(&pred.delta_a, &gt.heads.delta_a, mask)?;
    let delta_b = l1_map_loss(&pred.delta_b, &gt.heads.delta_b, mask)?;
    let delta_theta = delta_theta_map_loss(&pred.delta_theta, &gt.heads.delta_theta, mask)?;
    Ok(LossBreakdown {
        heatmap,
        size,
        offset,
        delta_a,
        delta_b,
        delta_theta,
        iou: 0.0,
        total: 0.0,
    })
}

/// Composite loss of predicted head maps against encoded targets. The IoU
/// term compares the ellipse decoded from the prediction at each
/// ground-truth center cell (teacher forcing) against the target ellipse.
pub fn total_loss(
    pred: &HeadMaps,
    gt: &EncodedTargets,
    w: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    let parts = component_losses(pred, gt)?;
    let pairs = teacher_forced_pairs(pred, gt)?;
    let pred_e: Vec<Ellipse> = pairs.iter().map(|(p, ..)| p.ellipse).collect();
    let gt_e: Vec<Ellipse> = pairs.iter().map(|(_, g, ..)| *g).collect();
    let iou = iou_loss_batch(&pred_e, &gt_e)?;
    Ok(LossBreakdown::compose(
        parts.heatmap,
        parts.size,
        parts.offset,
        parts.delta_a,
        parts.delta_b,
        parts.delta_theta,
        iou,
        w,
    ))
}

/// Gradients of the weighted total loss with respect to every predicted
/// map value, plus the loss breakdown. Regression gradients are nonzero
/// only at ground-truth center cells.
pub struct LossGradients {
    pub breakdown: LossBreakdown,
    pub grads: HeadMaps,
}

pub fn loss_gradients(
    pred: &HeadMaps,
    gt: &EncodedTargets,
    w: &LossWeights,
) -> Result<LossGradients, LossError> {
    let mask = &gt.center_mask;
    let (heatmap, mut hm_grad) = focal_heatmap_grad(&pred.heatmap, &gt.heads.heatmap)?;
    let (size, mut size_grad) =
        l1_map_grad(&pred.square_length, &gt.heads.square_length, mask)?;
    let (offset, mut off_grad) = l1_map_grad(&pred.offset, &gt.heads.offset, mask)?;
    let (delta_a, mut da_grad) = l1_map_grad(&pred.delta_a, &gt.heads.delta_a, mask)?;
    let (delta_b, mut db_grad) = l1_map_grad(&pred.delta_b, &gt.heads.delta_b, mask)?;
    let (delta_theta, mut dth_grad) =
        delta_theta_map_grad(&pred.delta_theta, &gt.heads.delta_theta, mask)?;

    scale(&mut hm_grad, w.lambda_q);
    scale(&mut size_grad, w.lambda_q * w.lambda_size);
    scale(&mut off_grad, w.lambda_q * w.lambda_off);
    scale(&mut da_grad, w.lambda_e);
    scale(&mut db_grad, w.lambda_e);
    scale(&mut dth_grad, w.lambda_e * w.lambda_dtheta);

    // DIoU term: finite-difference gradient in ellipse parameters, chained
    // through the decode arithmetic into the head maps.
    let pairs = teacher_forced_pairs(pred, gt)?;
    let m = pairs.len() as f64;
    let mut iou = 0.0;
    let s = gt.stride as f64;
    for (p, g, x, y) in &pairs {
        iou += diou_loss(&p.ellipse, g) / m;
        if w.lambda_iou == 0.0 {
            continue;
        }
        let scale_pair = w.lambda_iou / m;
        let [gcx, gcy, ga, gb, gth] = diou_gradient(&p.ellipse, g);
        // Center: cx = (cell_x + offset_x) * stride.
        add(&mut off_grad, 0, *y, *x, scale_pair * gcx * s);
        add(&mut off_grad, 1, *y, *x, scale_pair * gcy * s);
        // Axes: route canonical (a, b) gradients back to the raw slots.
        let (graw_a, graw_b) = if p.swapped { (gb, ga) } else { (ga, gb) };
        let mut glength = 0.0;
        if !p.a_clamped {
            add(&mut da_grad, 0, *y, *x, scale_pair * graw_a * p.length);
            glength += graw_a * p.delta_a;
        }
        if !p.b_clamped {
            add(&mut db_grad, 0, *y, *x, scale_pair * graw_b * p.length);
            glength += graw_b * p.delta_b;
        }
        add(&mut size_grad, 0, *y, *x, scale_pair * glength);
        // Angle: theta = fold(delta_theta * pi) and folding has unit slope.
        add(&mut dth_grad, 0, *y, *x, scale_pair * gth * PI);
    }

    let breakdown =
        LossBreakdown::compose(heatmap, size, offset, delta_a, delta_b, delta_theta, iou, w);
    Ok(LossGradients {
        breakdown,
        grads: HeadMaps {
            heatmap: hm_grad,
            offset: off_grad,
            square_length: size_grad,
            delta_a: da_grad,
            delta_b: db_grad,
            delta_theta: dth_grad,
        },
    })
}

#[inline]
fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn scale(map: &mut GridMap, s: f64) {
    for v in map.data_mut() {
        *v *= s;
    }
}

#[inline]
fn add(map: &mut GridMap, c: usize, y: usize, x: usize, v: f64) {
    let cur = map.get(c, y, x);
    map.set(c, y, x, cur + v);
}
