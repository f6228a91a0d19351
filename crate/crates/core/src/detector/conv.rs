//! 2-D convolution forward/backward used by the detector.
//!
//! Convolutions are lowered to matrix products: the input window around
//! every output cell is unrolled into a column (`im2col`) and the kernel
//! becomes a `(out_c, in_c*k*k)` matrix. 1x1 stride-1 convolutions skip the
//! unroll entirely since the input already has the required layout.
//! Dilation spreads the kernel taps `dilation` pixels apart, widening the
//! receptive field at unchanged cost.

use super::params::Tensor;
use crate::encoding::GridMap;
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Forward context cached for the backward pass. `cols` is `None` on the
/// 1x1 fast path where the input itself serves as the column matrix.
#[derive(Debug)]
pub(crate) struct ConvCtx {
    pub cols: Option<Vec<f64>>,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) fn conv_out_dim(
    in_dim: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> usize {
    let extent = dilation * (k - 1) + 1;
    (in_dim + 2 * pad - extent) / stride + 1
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

/// Row-major GEMM: `c = a (m,k) * b (k,n)`, with optional transposes taken
/// as views so no operand is copied.
fn matmul(
    m: usize,
    kdim: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
) {
    let a_view = if ta {
        ArrayView2::from_shape((kdim, m), a).expect("lhs shape").reversed_axes()
    } else {
        ArrayView2::from_shape((m, kdim), a).expect("lhs shape")
    };
    let b_view = if tb {
        ArrayView2::from_shape((n, kdim), b).expect("rhs shape").reversed_axes()
    } else {
        ArrayView2::from_shape((kdim, n), b).expect("rhs shape")
    };
    let c_view = ArrayViewMut2::from_shape((m, n), c).expect("out shape");
    general_mat_mul(1.0, &a_view, &b_view, 0.0, &mut { c_view });
}

/// Unroll `input` into a `(in_c*k*k, out_h*out_w)` column matrix with zero
/// padding outside the frame.
fn im2col(
    input: &GridMap,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> (Vec<f64>, usize, usize) {
    let (c, h, w) = (input.channels(), input.height(), input.width());
    let out_h = conv_out_dim(h, k, stride, pad, dilation);
    let out_w = conv_out_dim(w, k, stride, pad, dilation);
    let n_cells = out_h * out_w;
    let mut cols = vec![0.0; c * k * k * n_cells];
    let data = input.data();
    for ic in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ic * k + ky) * k + kx;
                let dst_base = row * n_cells;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_base = (ic * h + iy as usize) * w;
                    let dst_row = dst_base + oy * out_w;
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[dst_row + ox] = data[src_base + ix as usize];
                    }
                }
            }
        }
    }
    (cols, out_h, out_w)
}

/// Scatter-add column gradients back onto the input grid.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    out_h: usize,
    out_w: usize,
) -> GridMap {
    let mut dx = GridMap::zeros(c, h, w);
    let n_cells = out_h * out_w;
    let data = dx.data_mut();
    for ic in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ic * k + ky) * k + kx;
                let src_base = row * n_cells;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = (ic * h + iy as usize) * w;
                    let src_row = src_base + oy * out_w;
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        data[dst_base + ix as usize] += dcols[src_row + ox];
                    }
                }
            }
        }
    }
    dx
}

/// `weight` is `(out_c, in_c, k, k)`, `bias` is `(out_c)`.
pub(crate) fn conv_forward(
    input: &GridMap,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> (GridMap, ConvCtx) {
    let out_c = weight.shape[0];
    let in_c = weight.shape[1];
    let k = weight.shape[2];
    debug_assert_eq!(in_c, input.channels());
    debug_assert_eq!(weight.shape[3], k);
    debug_assert_eq!(bias.data.len(), out_c);

    let (cols_owned, out_h, out_w) = if is_pointwise(k, stride, pad) {
        (None, input.height(), input.width())
    } else {
        let (cols, oh, ow) = im2col(input, k, stride, pad, dilation);
        (Some(cols), oh, ow)
    };
    let n_cells = out_h * out_w;
    let cols: &[f64] = cols_owned.as_deref().unwrap_or_else(|| input.data());

    let mut out = GridMap::zeros(out_c, out_h, out_w);
    matmul(out_c, in_c * k * k, n_cells, &weight.data, false, cols, false, out.data_mut());
    let out_data = out.data_mut();
    for (oc, b) in bias.data.iter().enumerate() {
        for v in &mut out_data[oc * n_cells..(oc + 1) * n_cells] {
            *v += b;
        }
    }
    (out, ConvCtx { cols: cols_owned, out_h, out_w })
}

/// Gradients of a convolution. `input` must be the forward input; `d_out`
/// has the forward output's shape. Set `need_dx` to `false` on the first
/// layer to skip the (unused) input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    input: &GridMap,
    ctx: &ConvCtx,
    weight: &Tensor,
    d_out: &GridMap,
    stride: usize,
    pad: usize,
    dilation: usize,
    need_dx: bool,
) -> (Tensor, Tensor, Option<GridMap>) {
    let out_c = weight.shape[0];
    let in_c = weight.shape[1];
    let k = weight.shape[2];
    let n_cells = ctx.out_h * ctx.out_w;
    debug_assert_eq!(d_out.channels(), out_c);
    debug_assert_eq!(d_out.height() * d_out.width(), n_cells);

    let cols: &[f64] = ctx.cols.as_deref().unwrap_or_else(|| input.data());

    let mut d_weight = Tensor::zeros(&weight.shape);
    matmul(out_c, n_cells, in_c * k * k, d_out.data(), false, cols, true, &mut d_weight.data);

    let mut d_bias = Tensor::zeros(&[out_c]);
    for oc in 0..out_c {
        d_bias.data[oc] = d_out.data()[oc * n_cells..(oc + 1) * n_cells].iter().sum();
    }

    let dx = if need_dx {
        let mut dcols = vec![0.0; in_c * k * k * n_cells];
        matmul(in_c * k * k, out_c, n_cells, &weight.data, true, d_out.data(), false, &mut dcols);
        Some(if ctx.cols.is_some() {
            col2im(
                &dcols,
                input.channels(),
                input.height(),
                input.width(),
                k,
                stride,
                pad,
                dilation,
                ctx.out_h,
                ctx.out_w,
            )
        } else {
            let mut g = GridMap::zeros(input.channels(), input.height(), input.width());
            g.data_mut().copy_from_slice(&dcols);
            g
        })
    } else {
        None
    };
    (d_weight, d_bias, dx)
}
