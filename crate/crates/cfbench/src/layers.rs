//! Layer primitives: forward passes, analytic backward passes, and the
//! auxiliary state (masks, winner indices) backward needs.
//!
//! Activations are batch-major tensors. Dense layers see `(B, N)`, spatial
//! layers see `(B, H, W, C)` channels-last. Conv weights are stored
//! `(F, kh, kw, C)` so the innermost loops run over contiguous channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Declarative layer description. A network is an ordered list of these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense { width: usize },
    Conv2d { filters: usize, filter_size: usize },
    Maxpool2d { pool_size: usize, stride: usize },
    Relu,
    Lwta { block_size: usize },
    Dropout { rate: f64 },
    SoftmaxReadout,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Maxpool2d { .. } => "maxpool2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Lwta { .. } => "lwta",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::SoftmaxReadout => "softmax-readout",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-layer auxiliary state recorded during forward, consumed by backward.
#[derive(Clone, Debug)]
pub enum LayerAux {
    None,
    /// Dropout multiplier per activation entry (0 or 1/(1-rate)).
    Mask(Vec<f64>),
    /// Flat input index of the winning entry, one per output entry
    /// (max-pool) or per block (LWTA uses output positions directly).
    Winners(Vec<usize>),
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

/// `w` is `(out, in)` row-major, `b` is `(out)`. Input is flattened to
/// `(B, in)` regardless of its spatial shape.
pub fn dense_forward(input: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let out_dim = w.shape()[0];
    let in_dim = w.shape()[1];
    let batch = input.shape()[0];
    debug_assert_eq!(input.len(), batch * in_dim);

    let x = input.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![0.0; batch * out_dim];
    for bi in 0..batch {
        let xrow = &x[bi * in_dim..(bi + 1) * in_dim];
        let orow = &mut out[bi * out_dim..(bi + 1) * out_dim];
        for (m, o) in orow.iter_mut().enumerate() {
            let wrow = &wd[m * in_dim..(m + 1) * in_dim];
            let mut acc = bd[m];
            for i in 0..in_dim {
                acc += xrow[i] * wrow[i];
            }
            *o = acc;
        }
    }
    Tensor::from_vec(&[batch, out_dim], out)
}

pub fn dense_backward(
    input: &Tensor,
    w: &Tensor,
    delta: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let out_dim = w.shape()[0];
    let in_dim = w.shape()[1];
    let batch = delta.shape()[0];

    let x = input.data();
    let wd = w.data();
    let dd = delta.data();

    let mut dw = vec![0.0; out_dim * in_dim];
    let mut db = vec![0.0; out_dim];
    let mut dx = vec![0.0; batch * in_dim];

    for bi in 0..batch {
        let xrow = &x[bi * in_dim..(bi + 1) * in_dim];
        let drow = &dd[bi * out_dim..(bi + 1) * out_dim];
        let dxrow = &mut dx[bi * in_dim..(bi + 1) * in_dim];
        for m in 0..out_dim {
            let g = drow[m];
            if g == 0.0 {
                continue;
            }
            db[m] += g;
            let wrow = &wd[m * in_dim..(m + 1) * in_dim];
            let dwrow = &mut dw[m * in_dim..(m + 1) * in_dim];
            for i in 0..in_dim {
                dwrow[i] += g * xrow[i];
                dxrow[i] += g * wrow[i];
            }
        }
    }
    (
        Tensor::from_vec(&[batch, in_dim], dx),
        Tensor::from_vec(&[out_dim, in_dim], dw),
        Tensor::from_vec(&[out_dim], db),
    )
}

// ---------------------------------------------------------------------------
// conv2d, stride 1, 'same' zero padding
// ---------------------------------------------------------------------------

/// Input `(B, H, W, C)`, weights `(F, k, k, C)`, bias `(F)`, output
/// `(B, H, W, F)`.
pub fn conv2d_forward(input: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (batch, h, wd_) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let c = input.shape()[3];
    let f = w.shape()[0];
    let k = w.shape()[1];
    let pad = k / 2;

    let x = input.data();
    let ker = w.data();
    let bias = b.data();
    let mut out = vec![0.0; batch * h * wd_ * f];

    for bi in 0..batch {
        for y in 0..h {
            for xcol in 0..wd_ {
                let obase = ((bi * h + y) * wd_ + xcol) * f;
                for fi in 0..f {
                    let mut acc = bias[fi];
                    for dy in 0..k {
                        let iy = y + dy;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let iy = iy - pad;
                        for dx in 0..k {
                            let ix = xcol + dx;
                            if ix < pad || ix - pad >= wd_ {
                                continue;
                            }
                            let ix = ix - pad;
                            let ibase = ((bi * h + iy) * wd_ + ix) * c;
                            let kbase = ((fi * k + dy) * k + dx) * c;
                            for ci in 0..c {
                                acc += x[ibase + ci] * ker[kbase + ci];
                            }
                        }
                    }
                    out[obase + fi] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[batch, h, wd_, f], out)
}

pub fn conv2d_backward(
    input: &Tensor,
    w: &Tensor,
    delta: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (batch, h, wd_) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let c = input.shape()[3];
    let f = w.shape()[0];
    let k = w.shape()[1];
    let pad = k / 2;

    let x = input.data();
    let ker = w.data();
    let dd = delta.data();

    let mut dw = vec![0.0; f * k * k * c];
    let mut db = vec![0.0; f];
    let mut dx = vec![0.0; batch * h * wd_ * c];

    for bi in 0..batch {
        for y in 0..h {
            for xcol in 0..wd_ {
                let obase = ((bi * h + y) * wd_ + xcol) * f;
                for fi in 0..f {
                    let g = dd[obase + fi];
                    if g == 0.0 {
                        continue;
                    }
                    db[fi] += g;
                    for dy in 0..k {
                        let iy = y + dy;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let iy = iy - pad;
                        for dx_ in 0..k {
                            let ix = xcol + dx_;
                            if ix < pad || ix - pad >= wd_ {
                                continue;
                            }
                            let ix = ix - pad;
                            let ibase = ((bi * h + iy) * wd_ + ix) * c;
                            let kbase = ((fi * k + dy) * k + dx_) * c;
                            for ci in 0..c {
                                dw[kbase + ci] += g * x[ibase + ci];
                                dx[ibase + ci] += g * ker[kbase + ci];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(&[batch, h, wd_, c], dx),
        Tensor::from_vec(&[f, k, k, c], dw),
        Tensor::from_vec(&[f], db),
    )
}

// ---------------------------------------------------------------------------
// max-pool
// ---------------------------------------------------------------------------

/// Non-overlapping when `stride == pool`; ties broken by the first (lowest
/// flat index) entry in scan order.
pub fn maxpool2d_forward(input: &Tensor, pool: usize, stride: usize) -> (Tensor, LayerAux) {
    let (batch, h, w, c) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let oh = (h - pool) / stride + 1;
    let ow = (w - pool) / stride + 1;

    let x = input.data();
    let mut out = vec![0.0; batch * oh * ow * c];
    let mut winners = vec![0usize; batch * oh * ow * c];

    for bi in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for py in 0..pool {
                        for px in 0..pool {
                            let iy = oy * stride + py;
                            let ix = ox * stride + px;
                            let idx = ((bi * h + iy) * w + ix) * c + ci;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((bi * oh + oy) * ow + ox) * c + ci;
                    out[o] = best;
                    winners[o] = best_idx;
                }
            }
        }
    }
    (
        Tensor::from_vec(&[batch, oh, ow, c], out),
        LayerAux::Winners(winners),
    )
}

pub fn maxpool2d_backward(input_shape: &[usize], delta: &Tensor, aux: &LayerAux) -> Tensor {
    let winners = match aux {
        LayerAux::Winners(w) => w,
        _ => unreachable!("max-pool backward without winner record"),
    };
    let mut dx = vec![0.0; input_shape.iter().product()];
    for (o, &src) in winners.iter().enumerate() {
        dx[src] += delta.data()[o];
    }
    Tensor::from_vec(input_shape, dx)
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    out
}

pub fn relu_backward(input: &Tensor, delta: &Tensor) -> Tensor {
    let mut dx = delta.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// LWTA
// ---------------------------------------------------------------------------

/// Within each block of `block` consecutive units the maximal entry passes
/// unchanged and all others are zeroed. Ties go to the lowest index.
pub fn lwta_forward(input: &Tensor, block: usize) -> Result<(Tensor, LayerAux)> {
    let width = input.shape()[1];
    if width % block != 0 {
        return Err(Error::config(format!(
            "lwta block size {block} does not divide layer width {width}"
        )));
    }
    let batch = input.shape()[0];
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    let mut winners = Vec::with_capacity(batch * width / block);

    for bi in 0..batch {
        let base = bi * width;
        for blk in (0..width).step_by(block) {
            let mut best = base + blk;
            for j in 1..block {
                let idx = base + blk + j;
                if x[idx] > x[best] {
                    best = idx;
                }
            }
            out[best] = x[best];
            winners.push(best);
        }
    }
    Ok((
        Tensor::from_vec(&[batch, width], out),
        LayerAux::Winners(winners),
    ))
}

pub fn lwta_backward(input_shape: &[usize], delta: &Tensor, aux: &LayerAux) -> Tensor {
    let winners = match aux {
        LayerAux::Winners(w) => w,
        _ => unreachable!("lwta backward without winner record"),
    };
    let mut dx = vec![0.0; input_shape.iter().product()];
    for &idx in winners {
        dx[idx] = delta.data()[idx];
    }
    Tensor::from_vec(input_shape, dx)
}

// ---------------------------------------------------------------------------
// dropout (inverted convention: eval is the identity)
// ---------------------------------------------------------------------------

pub fn dropout_forward(
    input: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut RngStream,
) -> (Tensor, LayerAux) {
    if mode == Mode::Eval || rate == 0.0 {
        return (input.clone(), LayerAux::None);
    }
    let scale = 1.0 / (1.0 - rate);
    let mut out = input.clone();
    let mut mask = vec![0.0; input.len()];
    for (m, v) in mask.iter_mut().zip(out.data_mut()) {
        if rng.next_f64() < rate {
            *v = 0.0;
        } else {
            *m = scale;
            *v *= scale;
        }
    }
    (out, LayerAux::Mask(mask))
}

pub fn dropout_backward(delta: &Tensor, aux: &LayerAux) -> Tensor {
    match aux {
        LayerAux::None => delta.clone(),
        LayerAux::Mask(mask) => {
            let mut dx = delta.clone();
            for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                *d *= m;
            }
            dx
        }
        _ => unreachable!("dropout backward with wrong aux"),
    }
}

// ---------------------------------------------------------------------------
// softmax readout
// ---------------------------------------------------------------------------

/// Row-wise numerically stable softmax over `(B, classes)` logits.
pub fn softmax_forward(logits: &Tensor) -> Tensor {
    let batch = logits.shape()[0];
    let classes = logits.shape()[1];
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..batch {
        let row = &x[bi * classes..(bi + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[bi * classes..(bi + 1) * classes];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::from_vec(&[batch, classes], out)
}

/// Gradient of mean cross-entropy w.r.t. the logits feeding the softmax:
/// `(p - onehot(y)) / B`.
pub fn softmax_ce_backward(probs: &Tensor, labels: &[u8]) -> Tensor {
    let batch = probs.shape()[0];
    let classes = probs.shape()[1];
    let mut delta = probs.clone();
    let inv_b = 1.0 / batch as f64;
    for (bi, &y) in labels.iter().enumerate() {
        let row = &mut delta.data_mut()[bi * classes..(bi + 1) * classes];
        row[y as usize] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv_b;
        }
    }
    delta
}
