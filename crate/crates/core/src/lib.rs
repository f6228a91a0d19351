//! Anchor-free detection of rotated ellipses in grayscale scenes.
//!
//! The pipeline detects nested elliptical structures (a thorax-like outer
//! ellipse containing a heart-like inner one), regresses their full rotated
//! geometry, and derives cardiothoracic biometrics from the result:
//!
//! - [`geometry`]: rotated ellipses and rectangles, convex clipping,
//!   rotated-rect IoU, the distance-IoU penalty, and rasterization oracles.
//! - [`encoding`]: square/delta target encoding on a stride-4 grid, angle
//!   folding, and detection decoding.
//! - [`losses`]: penalty-reduced focal heatmap loss, masked L1 regression
//!   terms, the DIoU loss, and their gradients.
//! - [`synth`]: seeded synthetic scene generation, augmentation, and the
//!   on-disk dataset format (PGM images plus JSON annotations).
//! - [`detector`]: a small convolutional detector trained on CPU with
//!   hand-rolled reverse-mode differentiation and an Adam optimizer.
//! - [`biometrics`]: cardiothoracic ratio, cardiac axis, and dice-based
//!   evaluation reports.
//! - [`fit`]: direct gradient-based fitting of a single ellipse against a
//!   target, exercising the regression and IoU losses without a network.

pub mod biometrics;
pub mod detector;
pub mod encoding;
pub mod fit;
pub mod geometry;
pub mod losses;
pub mod synth;

pub use encoding::{decode, encode, Detection, EncodedTargets, GridMap, HeadMaps};
pub use geometry::{Ellipse, RotatedRect};
pub use losses::{LossBreakdown, LossWeights};
