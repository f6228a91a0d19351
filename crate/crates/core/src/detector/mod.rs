//! Small fully-convolutional detector trained on CPU.
//!
//! Architecture: a 4-block stem (dilated odd-kernel conv + ReLU, strides
//! 2,2,1,1) that downsamples by 4, then six parallel heads, each 3x3 conv
//! + ReLU + 1x1
//! conv: per-class heatmap, center offset, square length, and the three
//! shape deltas. Heatmap and axis-delta heads end in a sigmoid, the length
//! head is linear scaled by [`LEN_SCALE`], offset and angle-delta are
//! linear.
//!
//! Training uses reverse-mode differentiation over an explicit [`Tape`]:
//! the dense heatmap path and sparse per-cell regression paths record what
//! the backward pass needs, so gradients can only be requested for a
//! forward pass that actually ran. Regression heads are evaluated only at
//! supervised center cells during training and only at heatmap peaks during
//! inference, which keeps both passes cheap.

pub mod adam;
mod conv;
pub mod params;
pub mod train;

use crate::encoding::{decode, find_peaks, Detection, GridMap, HeadMaps};
use conv::{conv_forward, conv_out_dim, ConvCtx};
use params::{zeros_like, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

pub use adam::Adam;
pub use params::{load_checkpoint, save_checkpoint, CheckpointError};
pub use train::{evaluate, train, EpochRecord, EvalSummary, TrainConfig, TrainError, TrainOutput};

/// The linear length head predicts `length / LEN_SCALE`.
pub const LEN_SCALE: f64 = 64.0;
/// Initial heatmap 1x1 bias; sigmoid(-2.19) is roughly 0.1, so the net
/// starts out predicting background everywhere.
pub const HEATMAP_BIAS_INIT: f64 = -2.19;
/// Initial raw length bias; decodes to `LEN_SCALE * 2 = 128` pixels.
pub const LENGTH_BIAS_INIT: f64 = 2.0;
/// Offsets live in [0,1), so start at the cell center.
pub const OFFSET_BIAS_INIT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("bad network config: {0}")]
    Config(String),
    #[error(
        "input is {got_c}x{got_h}x{got_w}, expected {want_c} channel(s) with dims divisible by {stride}"
    )]
    BadInput { got_c: usize, got_h: usize, got_w: usize, want_c: usize, stride: usize },
    #[error("supervision cell ({x},{y}) outside {w}x{h} grid")]
    BadCell { x: usize, y: usize, w: usize, h: usize },
    #[error(transparent)]
    Decode(#[from] crate::encoding::DecodeError),
}

/// Network hyperparameters. The stem stride product is fixed at 4 so the
/// output grid is exactly the input downsampled by 4. Later stem blocks use
/// dilated 5x5 kernels: at the default geometry the receptive field at a
/// center cell spans ~160 px, enough to see the boundary of the largest
/// default object, while the 5-tap rows keep the sampling lattice dense
/// enough that a thin boundary ring cannot fall between taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyNetConfig {
    pub input_channels: usize,
    pub stem_channels: [usize; 4],
    pub stem_strides: [usize; 4],
    pub stem_kernels: [usize; 4],
    pub stem_dilations: [usize; 4],
    pub head_channels: usize,
    pub num_classes: usize,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        ToyNetConfig {
            input_channels: 1,
            stem_channels: [8, 16, 32, 64],
            stem_strides: [2, 2, 1, 1],
            stem_kernels: [3, 3, 5, 5],
            stem_dilations: [1, 2, 3, 6],
            head_channels: 64,
            num_classes: 2,
        }
    }
}

impl ToyNetConfig {
    /// Narrow variant for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ToyNetConfig {
            stem_channels: [2, 2, 4, 4],
            stem_kernels: [3, 3, 3, 3],
            stem_dilations: [1, 1, 2, 4],
            head_channels: 4,
            ..ToyNetConfig::default()
        }
    }

    /// Input-pixel padding that keeps stride-1 dims and exactly halves
    /// stride-2 dims for the block's odd kernel.
    fn stem_pad(&self, i: usize) -> usize {
        self.stem_dilations[i] * (self.stem_kernels[i] - 1) / 2
    }

    pub fn stride(&self) -> usize {
        self.stem_strides.iter().product()
    }

    fn validate(&self) -> Result<(), DetectorError> {
        if self.input_channels == 0
            || self.head_channels == 0
            || self.num_classes == 0
            || self.stem_channels.contains(&0)
        {
            return Err(DetectorError::Config("zero-sized dimension".into()));
        }
        if self.stem_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(DetectorError::Config("stem strides must be 1 or 2".into()));
        }
        if self.stem_dilations.contains(&0) {
            return Err(DetectorError::Config("stem dilations must be positive".into()));
        }
        if self.stem_kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(DetectorError::Config("stem kernels must be odd".into()));
        }
        if self.stride() != 4 {
            return Err(DetectorError::Config(format!(
                "stem stride product must be 4, got {}",
                self.stride()
            )));
        }
        Ok(())
    }
}

/// The six head branches in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HeadKind {
    Heatmap,
    Offset,
    SquareLength,
    DeltaA,
    DeltaB,
    DeltaTheta,
}

const ALL_HEADS: [HeadKind; 6] = [
    HeadKind::Heatmap,
    HeadKind::Offset,
    HeadKind::SquareLength,
    HeadKind::DeltaA,
    HeadKind::DeltaB,
    HeadKind::DeltaTheta,
];

impl HeadKind {
    fn name(self) -> &'static str {
        match self {
            HeadKind::Heatmap => "heatmap",
            HeadKind::Offset => "offset",
            HeadKind::SquareLength => "square_length",
            HeadKind::DeltaA => "delta_a",
            HeadKind::DeltaB => "delta_b",
            HeadKind::DeltaTheta => "delta_theta",
        }
    }

    fn out_channels(self, num_classes: usize) -> usize {
        match self {
            HeadKind::Heatmap => num_classes,
            HeadKind::Offset => 2,
            _ => 1,
        }
    }

    fn bias_init(self) -> f64 {
        match self {
            HeadKind::Heatmap => HEATMAP_BIAS_INIT,
            HeadKind::SquareLength => LENGTH_BIAS_INIT,
            HeadKind::Offset => OFFSET_BIAS_INIT,
            _ => 0.0,
        }
    }

    fn activate(self, raw: f64) -> f64 {
        match self {
            HeadKind::Heatmap | HeadKind::DeltaA | HeadKind::DeltaB => sigmoid(raw),
            HeadKind::SquareLength => raw * LEN_SCALE,
            HeadKind::Offset | HeadKind::DeltaTheta => raw,
        }
    }

    /// d(activated)/d(raw), expressed through the activated value.
    fn activation_grad(self, out: f64) -> f64 {
        match self {
            HeadKind::Heatmap | HeadKind::DeltaA | HeadKind::DeltaB => out * (1.0 - out),
            HeadKind::SquareLength => LEN_SCALE,
            HeadKind::Offset | HeadKind::DeltaTheta => 1.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn relu_in_place(g: &mut GridMap) {
    for v in g.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zero `d` wherever the recorded activation was not strictly positive.
fn mask_by_activation(d: &mut GridMap, act: &GridMap) {
    for (dv, av) in d.data_mut().iter_mut().zip(act.data()) {
        if *av <= 0.0 {
            *dv = 0.0;
        }
    }
}

/// Everything the backward pass needs from one training forward pass.
pub struct Tape {
    /// Input plus each stem block's post-ReLU activation (length 5; the
    /// last entry is the shared head input).
    stem_acts: Vec<GridMap>,
    stem_ctx: Vec<ConvCtx>,
    hm_ctx3: ConvCtx,
    hm_ctx1: ConvCtx,
    hm_mid: GridMap,
    hm_out: GridMap,
    sparse: Vec<SparseHeadTape>,
    cells: Vec<(usize, usize)>,
}

struct SparseHeadTape {
    kind: HeadKind,
    /// Per supervised cell: the 3x3 input patch (flattened `in_c*9`), the
    /// post-ReLU hidden vector, and the activated outputs.
    patches: Vec<Vec<f64>>,
    mid: Vec<Vec<f64>>,
    out: Vec<Vec<f64>>,
}

pub struct ToyNet {
    pub config: ToyNetConfig,
    pub params: ParamStore,
}

impl ToyNet {
    /// He-normal initialization with the documented head bias presets.
    pub fn init(config: &ToyNetConfig, seed: u64) -> Result<Self, DetectorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let he = |shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let mut t = Tensor::zeros(shape);
            for v in &mut t.data {
                *v = dist.sample(rng);
            }
            t
        };

        let mut in_c = config.input_channels;
        for (i, &out_c) in config.stem_channels.iter().enumerate() {
            let k = config.stem_kernels[i];
            params.insert(
                format!("stem.{i}.weight"),
                he(&[out_c, in_c, k, k], in_c * k * k, &mut rng),
            );
            params.insert(format!("stem.{i}.bias"), Tensor::zeros(&[out_c]));
            in_c = out_c;
        }
        let stem_out_c = config.stem_channels[3];
        for kind in ALL_HEADS {
            let name = kind.name();
            let out_c = kind.out_channels(config.num_classes);
            params.insert(
                format!("head.{name}.conv.weight"),
                he(&[config.head_channels, stem_out_c, 3, 3], stem_out_c * 9, &mut rng),
            );
            params.insert(
                format!("head.{name}.conv.bias"),
                Tensor::zeros(&[config.head_channels]),
            );
            params.insert(
                format!("head.{name}.out.weight"),
                he(&[out_c, config.head_channels, 1, 1], config.head_channels, &mut rng),
            );
            let mut bias = Tensor::zeros(&[out_c]);
            bias.data.fill(kind.bias_init());
            params.insert(format!("head.{name}.out.bias"), bias);
        }
        Ok(ToyNet { config: *config, params })
    }

    pub fn stride(&self) -> usize {
        self.config.stride()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params.get(name).expect("parameter present since init")
    }

    fn check_input(&self, img: &GridMap) -> Result<(), DetectorError> {
        let stride = self.stride();
        if img.channels() != self.config.input_channels
            || img.height() == 0
            || img.width() == 0
            || img.height() % stride != 0
            || img.width() % stride != 0
        {
            return Err(DetectorError::BadInput {
                got_c: img.channels(),
                got_h: img.height(),
                got_w: img.width(),
                want_c: self.config.input_channels,
                stride,
            });
        }
        Ok(())
    }

    /// Stem blocks; returns the input plus every post-ReLU activation.
    fn stem_forward(&self, img: &GridMap) -> (Vec<GridMap>, Vec<ConvCtx>) {
        let mut acts = Vec::with_capacity(5);
        let mut ctxs = Vec::with_capacity(4);
        acts.push(img.clone());
        for i in 0..4 {
            let w = self.p(&format!("stem.{i}.weight"));
            let b = self.p(&format!("stem.{i}.bias"));
            let (mut z, ctx) = conv_forward(
                acts.last().unwrap(),
                w,
                b,
                self.config.stem_strides[i],
                self.config.stem_pad(i),
                self.config.stem_dilations[i],
            );
            relu_in_place(&mut z);
            acts.push(z);
            ctxs.push(ctx);
        }
        (acts, ctxs)
    }

    /// One head evaluated densely over the whole grid.
    fn head_forward_dense(
        &self,
        kind: HeadKind,
        stem_out: &GridMap,
    ) -> (GridMap, ConvCtx, ConvCtx, GridMap) {
        let name = kind.name();
        let (mut mid, ctx3) = conv_forward(
            stem_out,
            self.p(&format!("head.{name}.conv.weight")),
            self.p(&format!("head.{name}.conv.bias")),
            1,
            1,
            1,
        );
        relu_in_place(&mut mid);
        let (mut out, ctx1) = conv_forward(
            &mid,
            self.p(&format!("head.{name}.out.weight")),
            self.p(&format!("head.{name}.out.bias")),
            1,
            0,
            1,
        );
        for v in out.data_mut() {
            *v = kind.activate(*v);
        }
        (out, ctx3, ctx1, mid)
    }

    /// One head evaluated at a single grid cell. Returns the input patch,
    /// hidden vector, and activated outputs.
    fn head_eval_cell(
        &self,
        kind: HeadKind,
        stem_out: &GridMap,
        x: usize,
        y: usize,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let name = kind.name();
        let w3 = self.p(&format!("head.{name}.conv.weight"));
        let b3 = self.p(&format!("head.{name}.conv.bias"));
        let w1 = self.p(&format!("head.{name}.out.weight"));
        let b1 = self.p(&format!("head.{name}.out.bias"));
        let in_c = stem_out.channels();
        let (gh, gw) = (stem_out.height(), stem_out.width());

        let mut patch = vec![0.0; in_c * 9];
        for ic in 0..in_c {
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= gh as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= gw as isize {
                        continue;
                    }
                    patch[(ic * 3 + ky) * 3 + kx] = stem_out.get(ic, sy as usize, sx as usize);
                }
            }
        }
        let hc = self.config.head_channels;
        let mut mid = vec![0.0; hc];
        for j in 0..hc {
            let row = &w3.data[j * in_c * 9..(j + 1) * in_c * 9];
            let z: f64 =
                b3.data[j] + row.iter().zip(&patch).map(|(w, p)| w * p).sum::<f64>();
            mid[j] = z.max(0.0);
        }
        let out_c = kind.out_channels(self.config.num_classes);
        let mut out = vec![0.0; out_c];
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &w1.data[o * hc..(o + 1) * hc];
            let raw: f64 =
                b1.data[o] + row.iter().zip(&mid).map(|(w, m)| w * m).sum::<f64>();
            *slot = kind.activate(raw);
        }
        (patch, mid, out)
    }

    /// Dense prediction of all six heads (no tape). Used by tests and as
    /// the reference the sparse paths must agree with.
    pub fn forward(&self, img: &GridMap) -> Result<HeadMaps, DetectorError> {
        self.check_input(img)?;
        let (acts, _) = self.stem_forward(img);
        let stem_out = acts.last().unwrap();
        let mut maps = Vec::with_capacity(6);
        for kind in ALL_HEADS {
            let (out, _, _, _) = self.head_forward_dense(kind, stem_out);
            maps.push(out);
        }
        let mut it = maps.into_iter();
        Ok(HeadMaps {
            heatmap: it.next().unwrap(),
            offset: it.next().unwrap(),
            square_length: it.next().unwrap(),
            delta_a: it.next().unwrap(),
            delta_b: it.next().unwrap(),
            delta_theta: it.next().unwrap(),
        })
    }

    /// Training forward pass: dense heatmap, regression heads only at the
    /// supervised `cells`. Off-cell regression entries are zero.
    pub fn forward_train(
        &self,
        img: &GridMap,
        cells: &[(usize, usize)],
    ) -> Result<(HeadMaps, Tape), DetectorError> {
        self.check_input(img)?;
        let (acts, ctxs) = self.stem_forward(img);
        let stem_out = acts.last().unwrap();
        let (gh, gw) = (stem_out.height(), stem_out.width());
        for &(x, y) in cells {
            if x >= gw || y >= gh {
                return Err(DetectorError::BadCell { x, y, w: gw, h: gh });
            }
        }

        let (hm_out, hm_ctx3, hm_ctx1, hm_mid) =
            self.head_forward_dense(HeadKind::Heatmap, stem_out);

        let mut heads = HeadMaps::zeros(self.config.num_classes, gh, gw);
        heads.heatmap = hm_out.clone();
        let mut sparse = Vec::with_capacity(5);
        for kind in ALL_HEADS.into_iter().skip(1) {
            let mut tape = SparseHeadTape {
                kind,
                patches: Vec::with_capacity(cells.len()),
                mid: Vec::with_capacity(cells.len()),
                out: Vec::with_capacity(cells.len()),
            };
            let target = match kind {
                HeadKind::Offset => &mut heads.offset,
                HeadKind::SquareLength => &mut heads.square_length,
                HeadKind::DeltaA => &mut heads.delta_a,
                HeadKind::DeltaB => &mut heads.delta_b,
                HeadKind::DeltaTheta => &mut heads.delta_theta,
                HeadKind::Heatmap => unreachable!(),
            };
            for &(x, y) in cells {
                let (patch, mid, out) = self.head_eval_cell(kind, stem_out, x, y);
                for (c, v) in out.iter().enumerate() {
                    target.set(c, y, x, *v);
                }
                tape.patches.push(patch);
                tape.mid.push(mid);
                tape.out.push(out);
            }
            sparse.push(tape);
        }

        let tape = Tape {
            stem_acts: acts,
            stem_ctx: ctxs,
            hm_ctx3,
            hm_ctx1,
            hm_mid,
            hm_out,
            sparse,
            cells: cells.to_vec(),
        };
        Ok((heads, tape))
    }

    /// Backpropagates head-output gradients through the taped forward pass.
    /// Returns a gradient tensor for every parameter (zero where unused).
    pub fn backward(&self, tape: &Tape, head_grads: &HeadMaps) -> ParamStore {
        let mut grads = zeros_like(&self.params);
        let stem_out = tape.stem_acts.last().unwrap();
        let mut d_stem = GridMap::zeros(stem_out.channels(), stem_out.height(), stem_out.width());

        // Dense heatmap head.
        {
            let mut d_raw = head_grads.heatmap.clone();
            for (dv, out) in d_raw.data_mut().iter_mut().zip(tape.hm_out.data()) {
                *dv *= HeadKind::Heatmap.activation_grad(*out);
            }
            let w1 = self.p("head.heatmap.out.weight");
            let (dw1, db1, dmid) =
                conv::conv_backward(&tape.hm_mid, &tape.hm_ctx1, w1, &d_raw, 1, 0, 1, true);
            add_grad(&mut grads, "head.heatmap.out.weight", &dw1);
            add_grad(&mut grads, "head.heatmap.out.bias", &db1);
            let mut dz = dmid.unwrap();
            mask_by_activation(&mut dz, &tape.hm_mid);
            let w3 = self.p("head.heatmap.conv.weight");
            let (dw3, db3, dx) =
                conv::conv_backward(stem_out, &tape.hm_ctx3, w3, &dz, 1, 1, 1, true);
            add_grad(&mut grads, "head.heatmap.conv.weight", &dw3);
            add_grad(&mut grads, "head.heatmap.conv.bias", &db3);
            accumulate_grid(&mut d_stem, &dx.unwrap());
        }

        // Sparse regression heads.
        let (gh, gw) = (stem_out.height(), stem_out.width());
        for st in &tape.sparse {
            let name = st.kind.name();
            let src = match st.kind {
                HeadKind::Offset => &head_grads.offset,
                HeadKind::SquareLength => &head_grads.square_length,
                HeadKind::DeltaA => &head_grads.delta_a,
                HeadKind::DeltaB => &head_grads.delta_b,
                HeadKind::DeltaTheta => &head_grads.delta_theta,
                HeadKind::Heatmap => unreachable!(),
            };
            let w1 = self.p(&format!("head.{name}.out.weight"));
            let w3 = self.p(&format!("head.{name}.conv.weight"));
            let in_c = stem_out.channels();
            let hc = self.config.head_channels;
            let out_c = st.kind.out_channels(self.config.num_classes);
            let mut dw1_local = vec![0.0; out_c * hc];
            let mut db1_local = vec![0.0; out_c];
            let mut dw3_local = vec![0.0; hc * in_c * 9];
            let mut db3_local = vec![0.0; hc];
            for (i, &(x, y)) in tape.cells.iter().enumerate() {
                let out = &st.out[i];
                let mid = &st.mid[i];
                let patch = &st.patches[i];
                let mut d_raw = vec![0.0; out_c];
                for o in 0..out_c {
                    d_raw[o] = src.get(o, y, x) * st.kind.activation_grad(out[o]);
                }
                let mut d_mid = vec![0.0; hc];
                for o in 0..out_c {
                    let g = d_raw[o];
                    if g == 0.0 {
                        continue;
                    }
                    db1_local[o] += g;
                    for j in 0..hc {
                        dw1_local[o * hc + j] += g * mid[j];
                        d_mid[j] += w1.data[o * hc + j] * g;
                    }
                }
                for j in 0..hc {
                    if mid[j] <= 0.0 {
                        d_mid[j] = 0.0;
                    }
                    let g = d_mid[j];
                    if g == 0.0 {
                        continue;
                    }
                    db3_local[j] += g;
                    let row = &w3.data[j * in_c * 9..(j + 1) * in_c * 9];
                    for (k, (wv, pv)) in row.iter().zip(patch).enumerate() {
                        dw3_local[j * in_c * 9 + k] += g * pv;
                        // Scatter the patch gradient back onto the stem grid.
                        let ic = k / 9;
                        let ky = (k % 9) / 3;
                        let kx = k % 3;
                        let sy = y as isize + ky as isize - 1;
                        let sx = x as isize + kx as isize - 1;
                        if sy >= 0 && sy < gh as isize && sx >= 0 && sx < gw as isize {
                            let cur = d_stem.get(ic, sy as usize, sx as usize);
                            d_stem.set(ic, sy as usize, sx as usize, cur + wv * g);
                        }
                    }
                }
            }
            add_slice(&mut grads, &format!("head.{name}.out.weight"), &dw1_local);
            add_slice(&mut grads, &format!("head.{name}.out.bias"), &db1_local);
            add_slice(&mut grads, &format!("head.{name}.conv.weight"), &dw3_local);
            add_slice(&mut grads, &format!("head.{name}.conv.bias"), &db3_local);
        }

        // Stem, last block first.
        let mut d = d_stem;
        for i in (0..4).rev() {
            mask_by_activation(&mut d, &tape.stem_acts[i + 1]);
            let w = self.p(&format!("stem.{i}.weight"));
            let (dw, db, dx) = conv::conv_backward(
                &tape.stem_acts[i],
                &tape.stem_ctx[i],
                w,
                &d,
                self.config.stem_strides[i],
                self.config.stem_pad(i),
                self.config.stem_dilations[i],
                i > 0,
            );
            add_grad(&mut grads, &format!("stem.{i}.weight"), &dw);
            add_grad(&mut grads, &format!("stem.{i}.bias"), &db);
            if let Some(dx) = dx {
                d = dx;
            }
        }
        grads
    }

    /// Sparse inference: dense stem + heatmap, then regression heads only
    /// at peak cells, decoded into at most `max_per_class` detections per
    /// class.
    pub fn infer(
        &self,
        img: &GridMap,
        max_per_class: usize,
        score_threshold: f64,
    ) -> Result<Vec<Detection>, DetectorError> {
        self.check_input(img)?;
        let (acts, _) = self.stem_forward(img);
        let stem_out = acts.last().unwrap();
        let (heatmap, _, _, _) = self.head_forward_dense(HeadKind::Heatmap, stem_out);
        let (gh, gw) = (heatmap.height(), heatmap.width());

        let mut cells = BTreeSet::new();
        for class in 0..self.config.num_classes {
            for &(x, y, _) in find_peaks(&heatmap, class, score_threshold)
                .iter()
                .take(max_per_class)
            {
                cells.insert((x, y));
            }
        }
        let mut heads = HeadMaps::zeros(self.config.num_classes, gh, gw);
        heads.heatmap = heatmap;
        for &(x, y) in &cells {
            for kind in ALL_HEADS.into_iter().skip(1) {
                let (_, _, out) = self.head_eval_cell(kind, stem_out, x, y);
                let target = match kind {
                    HeadKind::Offset => &mut heads.offset,
                    HeadKind::SquareLength => &mut heads.square_length,
                    HeadKind::DeltaA => &mut heads.delta_a,
                    HeadKind::DeltaB => &mut heads.delta_b,
                    HeadKind::DeltaTheta => &mut heads.delta_theta,
                    HeadKind::Heatmap => unreachable!(),
                };
                for (c, v) in out.iter().enumerate() {
                    target.set(c, y, x, *v);
                }
            }
        }
        Ok(decode(&heads, self.stride(), max_per_class, score_threshold)?)
    }

    /// Output grid dims for an input of the given size.
    pub fn grid_dims(&self, input_h: usize, input_w: usize) -> (usize, usize) {
        let (mut h, mut w) = (input_h, input_w);
        for i in 0..4 {
            let (k, s) = (self.config.stem_kernels[i], self.config.stem_strides[i]);
            let (p, d) = (self.config.stem_pad(i), self.config.stem_dilations[i]);
            h = conv_out_dim(h, k, s, p, d);
            w = conv_out_dim(w, k, s, p, d);
        }
        (h, w)
    }
}

fn add_grad(grads: &mut ParamStore, name: &str, t: &Tensor) {
    let e = grads.get_mut(name).expect("known parameter");
    debug_assert_eq!(e.shape, t.shape);
    for (a, b) in e.data.iter_mut().zip(&t.data) {
        *a += b;
    }
}

fn add_slice(grads: &mut ParamStore, name: &str, values: &[f64]) {
    let e = grads.get_mut(name).expect("known parameter");
    debug_assert_eq!(e.data.len(), values.len());
    for (a, b) in e.data.iter_mut().zip(values) {
        *a += b;
    }
}

fn accumulate_grid(acc: &mut GridMap, other: &GridMap) {
    debug_assert!(acc.same_shape(other));
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}
