//! Clinical-style measurements from a (heart, thorax) ellipse pair: the
//! cardiothoracic ratio (CTR), a precision score against a reference ratio,
//! and the cardiac axis angle.
//!
//! The cardiac axis is a geometric proxy: the interventricular septum is
//! approximated by the heart ellipse's major axis and the chest-bisecting
//! line by the thorax ellipse's minor axis. The report carries both
//! reference directions so the proxy can be audited.

use crate::geometry::{mask_dice, rasterize_ellipse, Ellipse, GeometryError};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

/// Class id of the thorax ellipse in detection output.
pub const CLASS_THORAX: usize = 0;
/// Class id of the heart ellipse in detection output.
pub const CLASS_HEART: usize = 1;

#[derive(Debug, Error, PartialEq)]
pub enum BiometricError {
    #[error("reference ratio must be positive, got {0}")]
    NonPositiveTrueRatio(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Cardiothoracic ratio: heart minor axis over thorax minor axis. The
/// semi-axis vs full-axis convention cancels in the ratio.
pub fn ctr(heart: &Ellipse, thorax: &Ellipse) -> f64 {
    heart.b() / thorax.b()
}

/// Precision of a predicted ratio against the reference:
/// `1 - |r_true - r_pred| / r_true`. Negative for gross errors; callers
/// clamp at 0 only when averaging for display.
pub fn ctr_precision(r_true: f64, r_pred: f64) -> Result<f64, BiometricError> {
    if !(r_true > 0.0) {
        return Err(BiometricError::NonPositiveTrueRatio(r_true));
    }
    Ok(1.0 - (r_true - r_pred).abs() / r_true)
}

/// Signed acute angle in degrees, in (-90, 90], between the heart's major
/// axis and the thorax's minor axis, both treated as undirected lines.
pub fn cardiac_axis_deg(heart: &Ellipse, thorax: &Ellipse) -> f64 {
    fold_deg((thorax.theta() + FRAC_PI_2 - heart.theta()).to_degrees())
}

/// Folds a degree angle into (-90, 90] (undirected-line convention).
pub fn fold_deg(deg: f64) -> f64 {
    let mut t = deg % 180.0;
    if t > 90.0 {
        t -= 180.0;
    } else if t <= -90.0 {
        t += 180.0;
    }
    t
}

/// Measurements derived from one (heart, thorax) pair, with the two
/// reference-line directions used by the axis proxy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMeasurements {
    pub ctr: f64,
    pub cardiac_axis_deg: f64,
    /// Direction of the heart's major axis, degrees in (-90, 90].
    pub heart_axis_deg: f64,
    /// Direction of the thorax's minor axis, degrees in (-90, 90].
    pub chest_axis_deg: f64,
}

pub fn measure_pair(heart: &Ellipse, thorax: &Ellipse) -> PairMeasurements {
    PairMeasurements {
        ctr: ctr(heart, thorax),
        cardiac_axis_deg: cardiac_axis_deg(heart, thorax),
        heart_axis_deg: fold_deg(heart.theta().to_degrees()),
        chest_axis_deg: fold_deg((thorax.theta() + FRAC_PI_2).to_degrees()),
    }
}

/// Full per-scene evaluation of a predicted pair against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiometricReport {
    pub measured: PairMeasurements,
    pub ctr_true: f64,
    /// Raw precision; may be negative, clamp only when aggregating.
    pub ctr_precision: f64,
    pub cardiac_axis_true_deg: f64,
    pub axis_error_deg: f64,
    pub dice_thorax: f64,
    pub dice_heart: f64,
    pub dice_all: f64,
}

/// Evaluates a predicted (heart, thorax) pair against ground truth. Dice is
/// computed from masks rasterized on a `mask_w` x `mask_h` grid at
/// supersample 1 (the native-resolution convention for bulk evaluation).
pub fn evaluate_pair(
    pred_heart: &Ellipse,
    pred_thorax: &Ellipse,
    gt_heart: &Ellipse,
    gt_thorax: &Ellipse,
    mask_w: usize,
    mask_h: usize,
) -> Result<BiometricReport, BiometricError> {
    let measured = measure_pair(pred_heart, pred_thorax);
    let ctr_true = ctr(gt_heart, gt_thorax);
    let precision = ctr_precision(ctr_true, measured.ctr)?;
    let axis_true = cardiac_axis_deg(gt_heart, gt_thorax);
    let dice_heart = mask_dice(
        &rasterize_ellipse(pred_heart, mask_w, mask_h, 1)?,
        &rasterize_ellipse(gt_heart, mask_w, mask_h, 1)?,
    )?;
    let dice_thorax = mask_dice(
        &rasterize_ellipse(pred_thorax, mask_w, mask_h, 1)?,
        &rasterize_ellipse(gt_thorax, mask_w, mask_h, 1)?,
    )?;
    Ok(BiometricReport {
        measured,
        ctr_true,
        ctr_precision: precision,
        cardiac_axis_true_deg: axis_true,
        axis_error_deg: fold_deg(measured.cardiac_axis_deg - axis_true).abs(),
        dice_thorax,
        dice_heart,
        dice_all: 0.5 * (dice_thorax + dice_heart),
    })
}

/// Dataset-level summary. `p_avg` clamps each per-case precision at 0
/// before averaging (the display convention); `p_avg_raw` does not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiometricAggregate {
    pub n: usize,
    pub dice_thorax: f64,
    pub dice_heart: f64,
    pub dice_all: f64,
    pub p_avg: f64,
    pub p_avg_raw: f64,
    pub mean_axis_error_deg: f64,
}

pub fn aggregate(reports: &[BiometricReport]) -> Option<BiometricAggregate> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&BiometricReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    Some(BiometricAggregate {
        n: reports.len(),
        dice_thorax: mean(&|r| r.dice_thorax),
        dice_heart: mean(&|r| r.dice_heart),
        dice_all: mean(&|r| r.dice_all),
        p_avg: mean(&|r| r.ctr_precision.max(0.0)),
        p_avg_raw: mean(&|r| r.ctr_precision),
        mean_axis_error_deg: mean(&|r| r.axis_error_deg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::fold_angle;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn ell(cx: f64, cy: f64, a: f64, b: f64, th: f64) -> Ellipse {
        Ellipse::new(cx, cy, a, b, th).unwrap()
    }

    #[test]
    fn ctr_is_minor_axis_ratio() {
        let heart = ell(0.0, 0.0, 4.0, 2.0, 0.3);
        let thorax = ell(0.0, 0.0, 9.0, 5.0, -0.2);
        assert_eq!(ctr(&heart, &thorax), 0.4);
        assert_eq!(ctr(&thorax, &thorax), 1.0);
    }

    #[test]
    fn ctr_unchanged_by_uniform_scaling() {
        let heart = ell(1.0, 2.0, 4.0, 2.0, 0.3);
        let thorax = ell(1.5, 2.5, 9.0, 5.0, -0.2);
        let scale = |e: &Ellipse| ell(3.0 * e.cx(), 3.0 * e.cy(), 3.0 * e.a(), 3.0 * e.b(), e.theta());
        assert_abs_diff_eq!(
            ctr(&scale(&heart), &scale(&thorax)),
            ctr(&heart, &thorax),
            epsilon = 1e-15
        );
    }

    #[test]
    fn precision_examples() {
        assert_eq!(ctr_precision(0.5, 0.5).unwrap(), 1.0);
        assert_eq!(ctr_precision(0.5, 0.45).unwrap(), 0.9);
        // Gross errors go negative; the raw value is reported as-is.
        assert_eq!(ctr_precision(0.5, 1.5).unwrap(), -1.0);
        assert!(ctr_precision(0.0, 0.5).is_err());
        assert!(ctr_precision(-0.2, 0.5).is_err());
    }

    #[test]
    fn precision_is_one_at_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = rng.gen_range(1e-3..10.0);
            assert_eq!(ctr_precision(x, x).unwrap(), 1.0);
        }
    }

    #[test]
    fn axis_examples() {
        // Equal rotations: heart major axis is perpendicular to the thorax
        // minor axis.
        let heart = ell(0.0, 0.0, 4.0, 2.0, 0.3);
        let thorax = ell(0.0, 0.0, 9.0, 5.0, 0.3);
        assert_abs_diff_eq!(cardiac_axis_deg(&heart, &thorax), 90.0, epsilon = 1e-12);
        // Heart rotated +45 degrees past the thorax.
        let heart45 = ell(0.0, 0.0, 4.0, 2.0, fold_angle(0.3 + FRAC_PI_4));
        assert_abs_diff_eq!(cardiac_axis_deg(&heart45, &thorax), 45.0, epsilon = 1e-12);
        let heart_m45 = ell(0.0, 0.0, 4.0, 2.0, fold_angle(0.3 - FRAC_PI_4));
        assert_abs_diff_eq!(cardiac_axis_deg(&heart_m45, &thorax), -45.0, epsilon = 1e-12);
    }

    #[test]
    fn axis_invariant_under_line_period_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let th_h = rng.gen_range(-1.5..1.5);
            let th_t = rng.gen_range(-1.5..1.5);
            let heart = ell(0.0, 0.0, 4.0, 2.0, th_h);
            let thorax = ell(0.0, 0.0, 9.0, 5.0, th_t);
            let v = cardiac_axis_deg(&heart, &thorax);
            assert!(v > -90.0 && v <= 90.0, "axis {v} out of range");
            // Adding pi to either angle leaves the line unchanged.
            let heart_pi = ell(0.0, 0.0, 4.0, 2.0, fold_angle(th_h + PI));
            assert_abs_diff_eq!(cardiac_axis_deg(&heart_pi, &thorax), v, epsilon = 1e-9);
        }
    }

    #[test]
    fn axis_and_ctr_invariant_under_rigid_motion_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let heart = ell(2.0, 1.0, 4.0, 2.0, rng.gen_range(-1.4..1.4));
            let thorax = ell(2.2, 0.9, 9.0, 5.0, rng.gen_range(-1.4..1.4));
            let rot: f64 = rng.gen_range(-1.0..1.0);
            let (s, dx, dy) = (rng.gen_range(0.5..2.0), rng.gen_range(-5.0..5.0), 3.0);
            let xf = |e: &Ellipse| {
                let (cx, cy) = (
                    s * (e.cx() * rot.cos() - e.cy() * rot.sin()) + dx,
                    s * (e.cx() * rot.sin() + e.cy() * rot.cos()) + dy,
                );
                ell(cx, cy, s * e.a(), s * e.b(), fold_angle(e.theta() + rot))
            };
            assert_abs_diff_eq!(
                cardiac_axis_deg(&xf(&heart), &xf(&thorax)),
                cardiac_axis_deg(&heart, &thorax),
                epsilon = 1e-9
            );
            assert_abs_diff_eq!(ctr(&xf(&heart), &xf(&thorax)), ctr(&heart, &thorax), epsilon = 1e-9);
        }
    }

    #[test]
    fn evaluate_identical_pair_is_perfect() {
        let heart = ell(200.0, 210.0, 90.0, 60.0, 0.4);
        let thorax = ell(205.0, 200.0, 180.0, 140.0, 0.1);
        let r = evaluate_pair(&heart, &thorax, &heart, &thorax, 420, 420).unwrap();
        assert_eq!(r.dice_thorax, 1.0);
        assert_eq!(r.dice_heart, 1.0);
        assert_eq!(r.dice_all, 1.0);
        assert_eq!(r.ctr_precision, 1.0);
        assert_eq!(r.axis_error_deg, 0.0);
    }

    #[test]
    fn evaluate_disjoint_prediction_has_zero_dice() {
        let gt_h = ell(80.0, 80.0, 20.0, 12.0, 0.0);
        let gt_t = ell(80.0, 80.0, 50.0, 35.0, 0.0);
        let pr_h = ell(300.0, 300.0, 20.0, 12.0, 0.0);
        let pr_t = ell(300.0, 300.0, 50.0, 35.0, 0.0);
        let r = evaluate_pair(&pr_h, &pr_t, &gt_h, &gt_t, 400, 400).unwrap();
        assert_eq!(r.dice_thorax, 0.0);
        assert_eq!(r.dice_heart, 0.0);
    }

    #[test]
    fn dice_of_heart_scaled_by_0_9() {
        // Predicted heart = ground truth scaled by 0.9 about its center.
        // Analytically the smaller ellipse is contained in the larger, so
        // dice = 2 * 0.81 / 1.81 = 162/181. The grid value at 1024 is
        // frozen as a regression constant.
        let gt_h = ell(512.0, 512.0, 300.0, 200.0, 0.5);
        let pr_h = ell(512.0, 512.0, 270.0, 180.0, 0.5);
        let gt_t = ell(512.0, 512.0, 480.0, 400.0, 0.1);
        let r = evaluate_pair(&pr_h, &gt_t, &gt_h, &gt_t, 1024, 1024).unwrap();
        assert_abs_diff_eq!(r.dice_heart, 162.0 / 181.0, epsilon = 2e-3);
        assert_abs_diff_eq!(r.dice_heart, 0.8951187915096165, epsilon = 1e-12);
    }

    #[test]
    fn aggregate_clamps_only_the_display_average() {
        let heart = ell(50.0, 50.0, 20.0, 10.0, 0.0);
        let thorax = ell(50.0, 50.0, 40.0, 25.0, 0.0);
        let mut r1 = evaluate_pair(&heart, &thorax, &heart, &thorax, 100, 100).unwrap();
        let mut r2 = r1;
        r1.ctr_precision = -0.5;
        r2.ctr_precision = 0.8;
        let agg = aggregate(&[r1, r2]).unwrap();
        assert_abs_diff_eq!(agg.p_avg, 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(agg.p_avg_raw, 0.15, epsilon = 1e-15);
        assert_eq!(agg.n, 2);
        assert!(aggregate(&[]).is_none());
    }
}
