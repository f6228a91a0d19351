//! Seeded generator of nested-ellipse scenes: a bright-ringed thoracic
//! ellipse containing a cardiac ellipse, rendered with speckle-like texture,
//! optional dark wedges from the top edge (acoustic-shadow stand-ins), and
//! additive Gaussian noise. Also the training-time augmentations: left-right
//! flip, uniform scale, shift, and extra noise.
//!
//! Determinism: every random choice draws from a ChaCha stream derived from
//! a `(seed, purpose tag)` pair, so a whole dataset is a pure function of
//! its master seed and config, and paired renders (for example the same
//! scene with shadows disabled) share their noise bit for bit.
//!
//! Centers are quantized to 1/64 px so the flip map `cx -> W - 1 - cx` is
//! exact in `f64`, which makes flip augmentation an exact involution and
//! keeps flipped masks bit-identical to mask-level flips.

mod dataset;

pub use dataset::{
    gen_dataset, load_split, read_pgm, write_pgm, DatasetConfig, DatasetError, DatasetSummary,
    Sample,
};

use crate::biometrics::{CLASS_HEART, CLASS_THORAX};
use crate::encoding::fold_angle;
use crate::geometry::Ellipse;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use thiserror::Error;

/// Gaussian ring profile width (std dev, px) of the boundary highlights.
pub const RING_SIGMA: f64 = 1.5;
/// Rejection budget for spec sampling before giving up.
pub const MAX_SPEC_ATTEMPTS: usize = 1000;
/// Rejection budget for augmentation parameter sampling.
pub const MAX_AUGMENT_ATTEMPTS: usize = 100;

const TAG_SPEC: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_SHADOW: u64 = 3;
const TAG_AUG: u64 = 4;
const TAG_TEXTURE: u64 = 5;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid range for {name}: [{lo}, {hi}]")]
    InvalidRange { name: &'static str, lo: f64, hi: f64 },
    #[error("could not satisfy scene invariants within {0} attempts")]
    RejectionExhausted(usize),
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent ChaCha stream for one purpose within one seed's scene.
pub(crate) fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    key[16..24].copy_from_slice(&0x517c_c1b7_2722_0a95u64.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Derives the per-scene seed of scene `index` in split `split`.
pub(crate) fn scene_seed(master: u64, split: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(split ^ splitmix64(index)))
}

fn hash01(ix: i64, iy: i64, seed: u64) -> f64 {
    let h = splitmix64(
        seed ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear value noise in [0, 1) with the given cell size.
fn value_noise(x: f64, y: f64, cell: f64, seed: u64) -> f64 {
    let gx = x / cell;
    let gy = y / cell;
    let x0 = gx.floor();
    let y0 = gy.floor();
    let (tx, ty) = (gx - x0, gy - y0);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let v00 = hash01(ix, iy, seed);
    let v10 = hash01(ix + 1, iy, seed);
    let v01 = hash01(ix, iy + 1, seed);
    let v11 = hash01(ix + 1, iy + 1, seed);
    let top = v00 + (v10 - v00) * tx;
    let bot = v01 + (v11 - v01) * tx;
    top + (bot - top) * ty
}

fn quantize64(v: f64) -> f64 {
    (v * 64.0).round() / 64.0
}

/// Grayscale image with values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, pixels: vec![0.0; width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel buffer size mismatch");
        Image { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Single-channel grid view for the detector.
    pub fn to_grid(&self) -> crate::encoding::GridMap {
        let mut g = crate::encoding::GridMap::zeros(1, self.height, self.width);
        g.data_mut().copy_from_slice(&self.pixels);
        g
    }

    /// Bilinear sample with clamp-to-edge addressing.
    fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let cx = x.clamp(0.0, (self.width - 1) as f64);
        let cy = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = cx.floor() as usize;
        let y0 = cy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = cx - x0 as f64;
        let ty = cy - y0 as f64;
        let top = self.get(x0, y0) + (self.get(x1, y0) - self.get(x0, y0)) * tx;
        let bot = self.get(x0, y1) + (self.get(x1, y1) - self.get(x0, y1)) * tx;
        top + (bot - top) * ty
    }
}

/// Sampling ranges for scene generation; all `(lo, hi)` pairs inclusive of
/// `lo`, exclusive of `hi` except where noted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneRanges {
    pub image_w: usize,
    pub image_h: usize,
    /// Thorax semi-major axis, px.
    pub thorax_a: (f64, f64),
    /// Thorax b/a ratio.
    pub thorax_aspect: (f64, f64),
    /// Center position as a fraction of (width-1, height-1).
    pub center_frac: (f64, f64),
    /// Cardiothoracic ratio heart.b / thorax.b.
    pub ctr: (f64, f64),
    /// Heart b/a ratio.
    pub heart_aspect: (f64, f64),
    /// Heart orientation relative to the thorax, radians (+/- this bound).
    pub heart_rel_angle_max: f64,
    /// Minimum center-to-center distance, px; keeps the two objects in
    /// distinct stride-4 grid cells so encoding never drops one.
    pub min_center_separation: f64,
    /// Margin between the thorax bounding box and the image border, px.
    pub margin: f64,
    pub noise: (f64, f64),
    pub shadow_count_max: u32,
}

impl Default for SceneRanges {
    fn default() -> Self {
        SceneRanges {
            image_w: 256,
            image_h: 192,
            thorax_a: (55.0, 72.0),
            thorax_aspect: (0.62, 0.85),
            center_frac: (0.40, 0.60),
            ctr: (0.35, 0.65),
            heart_aspect: (0.55, 0.80),
            heart_rel_angle_max: FRAC_PI_4,
            min_center_separation: 10.0,
            margin: 4.0,
            noise: (0.01, 0.05),
            shadow_count_max: 2,
        }
    }
}

impl SceneRanges {
    fn validate(&self) -> Result<(), SynthError> {
        let pairs: [(&'static str, (f64, f64)); 6] = [
            ("thorax_a", self.thorax_a),
            ("thorax_aspect", self.thorax_aspect),
            ("center_frac", self.center_frac),
            ("ctr", self.ctr),
            ("heart_aspect", self.heart_aspect),
            ("noise", self.noise),
        ];
        for (name, (lo, hi)) in pairs {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < 0.0 {
                return Err(SynthError::InvalidRange { name, lo, hi });
            }
        }
        if self.thorax_a.0 <= 0.0 {
            return Err(SynthError::InvalidRange {
                name: "thorax_a",
                lo: self.thorax_a.0,
                hi: self.thorax_a.1,
            });
        }
        if self.image_w < 16 || self.image_h < 16 {
            return Err(SynthError::InvalidRange {
                name: "image dims",
                lo: self.image_w as f64,
                hi: self.image_h as f64,
            });
        }
        Ok(())
    }
}

/// Full description of one scene; rendering is a pure function of this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_w: usize,
    pub image_h: usize,
    pub thorax: Ellipse,
    pub heart: Ellipse,
    pub noise_level: f64,
    pub shadow_count: u32,
    pub seed: u64,
}

/// Rendered scene with its ground-truth annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    /// Exactly one thorax (class 0) then one heart (class 1).
    pub annotations: Vec<(usize, Ellipse)>,
    /// The generating spec (pre-augmentation).
    pub spec: SceneSpec,
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Samples a scene spec satisfying all placement invariants: thorax inside
/// the image with margin, heart center inside the thorax and separated from
/// its center, heart boundary inside the thorax, heart.a <= 0.7 thorax.a.
pub fn sample_spec(seed: u64, ranges: &SceneRanges) -> Result<SceneSpec, SynthError> {
    ranges.validate()?;
    let mut rng = stream(seed, TAG_SPEC);
    let (w, h) = (ranges.image_w as f64, ranges.image_h as f64);
    for _ in 0..MAX_SPEC_ATTEMPTS {
        let ta = sample_range(&mut rng, ranges.thorax_a);
        let tb = ta * sample_range(&mut rng, ranges.thorax_aspect);
        let t_theta = rng.gen_range(-FRAC_PI_2..FRAC_PI_2);
        let tcx = quantize64(sample_range(&mut rng, ranges.center_frac) * (w - 1.0));
        let tcy = quantize64(sample_range(&mut rng, ranges.center_frac) * (h - 1.0));
        let Ok(thorax) = Ellipse::new(tcx, tcy, ta, tb, t_theta) else {
            continue;
        };
        let (ex, ey) = thorax.aabb_half_extents();
        let m = ranges.margin;
        if tcx - ex < m || tcx + ex > w - 1.0 - m || tcy - ey < m || tcy + ey > h - 1.0 - m {
            continue;
        }

        let ctr = sample_range(&mut rng, ranges.ctr);
        let hb = ctr * tb;
        let ha = hb / sample_range(&mut rng, ranges.heart_aspect);
        if ha > 0.7 * ta || ha <= hb {
            continue;
        }
        let dir = rng.gen_range(0.0..2.0 * PI);
        let r_lo = ranges.min_center_separation + 0.1;
        let r_hi = (0.3 * tb).max(r_lo + 1.0);
        let r = rng.gen_range(r_lo..r_hi);
        let hcx = quantize64(tcx + r * dir.cos());
        let hcy = quantize64(tcy + r * dir.sin());
        let h_theta = fold_angle(t_theta + rng.gen_range(-1.0..1.0) * ranges.heart_rel_angle_max);
        let Ok(heart) = Ellipse::new(hcx, hcy, ha, hb, h_theta) else {
            continue;
        };

        let sep = (hcx - tcx).hypot(hcy - tcy);
        if sep < ranges.min_center_separation || !thorax.contains(hcx, hcy) {
            continue;
        }
        // Heart fully inside the thorax, checked on 32 boundary points.
        let inside = (0..32).all(|k| {
            let t = 2.0 * PI * k as f64 / 32.0;
            let (ct, st) = (heart.theta().cos(), heart.theta().sin());
            let bx = ha * t.cos();
            let by = hb * t.sin();
            thorax.contains(hcx + bx * ct - by * st, hcy + bx * st + by * ct)
        });
        if !inside {
            continue;
        }

        return Ok(SceneSpec {
            image_w: ranges.image_w,
            image_h: ranges.image_h,
            thorax,
            heart,
            noise_level: sample_range(&mut rng, ranges.noise),
            shadow_count: rng.gen_range(0..=ranges.shadow_count_max),
            seed,
        });
    }
    Err(SynthError::RejectionExhausted(MAX_SPEC_ATTEMPTS))
}

/// Approximate unsigned distance from point to the ellipse boundary:
/// first-order Taylor of the implicit value around the boundary.
fn boundary_distance(e: &Ellipse, x: f64, y: f64) -> f64 {
    let dx = x - e.cx();
    let dy = y - e.cy();
    let (c, s) = (e.theta().cos(), e.theta().sin());
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    let q = (u / e.a()).powi(2) + (v / e.b()).powi(2);
    let gn = 2.0 * ((u / (e.a() * e.a())).powi(2) + (v / (e.b() * e.b())).powi(2)).sqrt();
    (q - 1.0).abs() / gn.max(1e-12)
}

struct ShadowWedge {
    apex_x: f64,
    axis: f64,
    half_width: f64,
    strength: f64,
}

impl ShadowWedge {
    /// Attenuation factor at a pixel: 1 outside, 1 - strength deep inside,
    /// with a soft angular edge.
    fn factor(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.apex_x;
        let dy = y + 1.0; // apex sits 1 px above the top edge
        let ang = dy.atan2(dx);
        let mut d = (ang - self.axis).abs();
        if d > PI {
            d = 2.0 * PI - d;
        }
        let edge = 0.035; // ~2 degree ramp
        let inside = ((self.half_width - d) / edge).clamp(0.0, 1.0);
        1.0 - self.strength * inside
    }
}

/// Renders the spec into an image: interior fill plus speckle texture,
/// Gaussian boundary rings on both ellipses (peak amplitude 1), shadow
/// wedges from the top edge, then per-pixel additive Gaussian noise of the
/// spec's level; clamped to [0, 1].
pub fn render(spec: &SceneSpec) -> Scene {
    let (w, h) = (spec.image_w, spec.image_h);
    let mut image = Image::new(w, h);
    let two_sigma2 = 2.0 * RING_SIGMA * RING_SIGMA;
    let tex_seed = splitmix64(spec.seed ^ TAG_TEXTURE);

    let mut shadow_rng = stream(spec.seed, TAG_SHADOW);
    let wedges: Vec<ShadowWedge> = (0..spec.shadow_count)
        .map(|_| ShadowWedge {
            apex_x: shadow_rng.gen_range(0.1..0.9) * (w as f64 - 1.0),
            axis: FRAC_PI_2 + shadow_rng.gen_range(-0.35..0.35),
            half_width: shadow_rng.gen_range(0.14..0.35), // 8..20 degrees
            strength: shadow_rng.gen_range(0.45..0.65),
        })
        .collect();

    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64, y as f64);
            let in_t = spec.thorax.contains(px, py);
            let in_h = spec.heart.contains(px, py);
            let base = if in_h {
                0.20
            } else if in_t {
                0.30
            } else {
                0.08
            };
            let tex_amp = if in_t { 0.10 } else { 0.03 };
            let tex = tex_amp * (value_noise(px, py, 6.0, tex_seed) - 0.5);
            let dt = boundary_distance(&spec.thorax, px, py);
            let dh = boundary_distance(&spec.heart, px, py);
            let rings = (-dt * dt / two_sigma2).exp() + (-dh * dh / two_sigma2).exp();
            let mut v = base + tex + rings;
            for wedge in &wedges {
                v *= wedge.factor(px, py);
            }
            image.set(x, y, v);
        }
    }

    if spec.noise_level > 0.0 {
        let mut noise_rng = stream(spec.seed, TAG_NOISE);
        for v in image.pixels.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut noise_rng);
            *v += spec.noise_level * n;
        }
    }
    for v in image.pixels.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    Scene {
        image,
        annotations: vec![(CLASS_THORAX, spec.thorax), (CLASS_HEART, spec.heart)],
        spec: spec.clone(),
    }
}

/// Which augmentations may fire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentFlags {
    pub flip: bool,
    pub scale: bool,
    pub shift: bool,
    pub noise: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags { flip: true, scale: true, shift: true, noise: true }
    }
}

impl AugmentFlags {
    pub const NONE: AugmentFlags =
        AugmentFlags { flip: false, scale: false, shift: false, noise: false };
}

#[derive(Debug, Clone, Copy)]
struct AugmentParams {
    flip: bool,
    scale: f64,
    shift: (f64, f64),
    noise_sigma: f64,
}

impl AugmentParams {
    fn is_geometric_identity(&self) -> bool {
        !self.flip && self.scale == 1.0 && self.shift == (0.0, 0.0)
    }
}

fn transform_ellipse(e: &Ellipse, p: &AugmentParams, w: usize, h: usize) -> Ellipse {
    let (c0x, c0y) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (mut cx, theta) = if p.flip {
        (w as f64 - 1.0 - e.cx(), fold_angle(-e.theta()))
    } else {
        (e.cx(), e.theta())
    };
    let mut cy = e.cy();
    let (mut a, mut b) = (e.a(), e.b());
    if p.scale != 1.0 {
        cx = (cx - c0x) * p.scale + c0x;
        cy = (cy - c0y) * p.scale + c0y;
        a *= p.scale;
        b *= p.scale;
    }
    cx += p.shift.0;
    cy += p.shift.1;
    Ellipse::new(cx, cy, a, b, theta).expect("positive scale preserves validity")
}

fn in_frame(e: &Ellipse, w: usize, h: usize) -> bool {
    let (ex, ey) = e.aabb_half_extents();
    let m = 2.0;
    e.cx() - ex >= m
        && e.cx() + ex <= w as f64 - 1.0 - m
        && e.cy() - ey >= m
        && e.cy() + ey <= h as f64 - 1.0 - m
}

fn apply_geometry(image: &Image, p: &AugmentParams) -> Image {
    if p.is_geometric_identity() {
        return image.clone();
    }
    let (w, h) = (image.width, image.height);
    let (c0x, c0y) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            // Invert shift and scale, then the flip.
            let mut sx = x as f64;
            let mut sy = y as f64;
            if p.shift != (0.0, 0.0) || p.scale != 1.0 {
                sx = (sx - p.shift.0 - c0x) / p.scale + c0x;
                sy = (sy - p.shift.1 - c0y) / p.scale + c0y;
            }
            if p.flip {
                sx = w as f64 - 1.0 - sx;
            }
            out.set(x, y, image.sample_bilinear(sx, sy));
        }
    }
    out
}

/// Core augmentation on an (image, annotations) pair. Parameters are
/// resampled until every transformed object stays in frame (at most
/// `MAX_AUGMENT_ATTEMPTS` tries); on exhaustion the input passes through
/// unchanged.
pub(crate) fn augment_sample(
    image: &Image,
    objects: &[(usize, Ellipse)],
    seed: u64,
    flags: &AugmentFlags,
) -> (Image, Vec<(usize, Ellipse)>) {
    let (w, h) = (image.width, image.height);
    let mut rng = stream(seed, TAG_AUG);
    for _ in 0..MAX_AUGMENT_ATTEMPTS {
        let p = AugmentParams {
            flip: flags.flip && rng.gen_bool(0.5),
            scale: if flags.scale { rng.gen_range(0.8..1.25) } else { 1.0 },
            shift: if flags.shift {
                (
                    rng.gen_range(-0.1..0.1) * w as f64,
                    rng.gen_range(-0.1..0.1) * h as f64,
                )
            } else {
                (0.0, 0.0)
            },
            noise_sigma: if flags.noise { rng.gen_range(0.0..0.05) } else { 0.0 },
        };
        let transformed: Vec<(usize, Ellipse)> =
            objects.iter().map(|&(c, ref e)| (c, transform_ellipse(e, &p, w, h))).collect();
        if !transformed.iter().all(|(_, e)| in_frame(e, w, h)) {
            continue;
        }
        let mut out = apply_geometry(image, &p);
        if p.noise_sigma > 0.0 {
            for v in out.pixels.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v = (*v + p.noise_sigma * n).clamp(0.0, 1.0);
            }
        }
        return (out, transformed);
    }
    (image.clone(), objects.to_vec())
}

/// Augments a scene: flip (p = 1/2), scale in [0.8, 1.25) about the image
/// center, shift up to +/-10% of each dimension, extra Gaussian noise with
/// sigma in [0, 0.05); image and annotations transform consistently.
pub fn augment(scene: &Scene, seed: u64, flags: &AugmentFlags) -> Scene {
    let (image, annotations) = augment_sample(&scene.image, &scene.annotations, seed, flags);
    Scene { image, annotations, spec: scene.spec.clone() }
}
