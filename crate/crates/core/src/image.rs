//! Local branch and resampling: depthwise periodic convolution, pointwise
//! channel maps, pixel (un)shuffle, and time-conditioned normalization.

use rustfft::num_complex::Complex64;

use crate::autodiff::{Tape, Var};
use crate::error::{DriftError, Result};
use crate::grid::{rfft2_planes, Field};
use crate::linalg::{dense_spectral_norm, NormEstimate};
use crate::tensor::Tensor;

/// Periodic cross-correlation `y[i,j] = sum_ab k[a,b] x[i+a-r, j+b-r]`.
pub(crate) fn dwconv_kernel(x: &[f64], k: &[f64], dims: [usize; 4], ks: usize) -> Vec<f64> {
    let [b, c, h, w] = dims;
    let r = ks / 2;
    let mut out = vec![0.0; x.len()];
    for p in 0..b * c {
        let ch = p % c;
        let base = p * h * w;
        let xs = &x[base..base + h * w];
        let ys = &mut out[base..base + h * w];
        for a in 0..ks {
            for bj in 0..ks {
                let kv = k[(ch * ks + a) * ks + bj];
                if kv == 0.0 {
                    continue;
                }
                for i in 0..h {
                    let si = (i + h + a - r) % h;
                    let row = &xs[si * w..(si + 1) * w];
                    let yrow = &mut ys[i * w..(i + 1) * w];
                    let shift = (w + bj - r) % w;
                    // yrow[j] += kv * row[(j + shift) % w]
                    let (head, tail) = row.split_at(shift);
                    for (y, xv) in yrow.iter_mut().zip(tail.iter().chain(head)) {
                        *y += kv * xv;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn pointwise_kernel(x: &[f64], w: &[f64], bias: Option<&[f64]>, dims: [usize; 4], co: usize) -> Vec<f64> {
    let [b, ci, h, wd] = dims;
    let hw = h * wd;
    let mut out = vec![0.0; b * co * hw];
    for ib in 0..b {
        for o in 0..co {
            let dst = &mut out[(ib * co + o) * hw..(ib * co + o + 1) * hw];
            if let Some(bb) = bias {
                dst.iter_mut().for_each(|v| *v = bb[o]);
            }
            for i in 0..ci {
                let wv = w[o * ci + i];
                if wv == 0.0 {
                    continue;
                }
                let src = &x[(ib * ci + i) * hw..(ib * ci + i + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    out
}

/// Source index of each output element of a 2x2 pixel unshuffle:
/// `out[b, 4c + 2di + dj, i, j] = x[b, c, 2i + di, 2j + dj]`.
pub(crate) fn unshuffle_index(dims: [usize; 4]) -> Vec<usize> {
    let [b, c, h, w] = dims;
    let (h2, w2) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(b * c * h * w);
    for ib in 0..b {
        for oc in 0..4 * c {
            let (ch, di, dj) = (oc / 4, (oc / 2) % 2, oc % 2);
            for i in 0..h2 {
                for j in 0..w2 {
                    idx.push(((ib * c + ch) * h + 2 * i + di) * w + 2 * j + dj);
                }
            }
        }
    }
    idx
}

/// Source index of each output element of a 2x2 pixel shuffle on `[B, 4C, H, W]`.
pub(crate) fn shuffle_index(dims: [usize; 4]) -> Vec<usize> {
    let [b, c4, h, w] = dims;
    let c = c4 / 4;
    let mut idx = Vec::with_capacity(b * c4 * h * w);
    for ib in 0..b {
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let oc = ch * 4 + (y % 2) * 2 + x % 2;
                    idx.push(((ib * c4 + oc) * h + y / 2) * w + x / 2);
                }
            }
        }
    }
    idx
}

/// Per-channel `K x K` kernels, `[C, K, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseKernel {
    pub weights: Tensor,
}

impl DepthwiseKernel {
    pub fn new(weights: Tensor) -> Result<Self> {
        match weights.shape() {
            &[_, a, b] if a == b && a % 2 == 1 => Ok(Self { weights }),
            s => Err(DriftError::Shape(format!("depthwise kernel must be [C, K, K] with odd K, got {s:?}"))),
        }
    }

    /// Center tap 1 on every channel.
    pub fn identity(channels: usize, size: usize) -> Self {
        let mut w = Tensor::zeros(&[channels, size, size]);
        let r = size / 2;
        for c in 0..channels {
            w.data_mut()[(c * size + r) * size + r] = 1.0;
        }
        Self { weights: w }
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Real `C_out x C_in` matrix plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseLinear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl PointwiseLinear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match weight.shape() {
            &[o, _] if bias.len() == o => Ok(Self { weight, bias }),
            s => Err(DriftError::Shape(format!("pointwise weight {s:?} with bias of {}", bias.len()))),
        }
    }

    pub fn identity(c: usize) -> Self {
        let mut w = Tensor::zeros(&[c, c]);
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0;
        }
        Self {
            weight: w,
            bias: Tensor::zeros(&[c]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Operator norm of the linear part.
    pub fn spectral_norm(&self) -> NormEstimate {
        dense_spectral_norm(self.weight.data(), self.out_channels(), self.in_channels(), 5000, 1e-14)
    }
}

pub fn dwconv(x: &Field<f64>, k: &DepthwiseKernel) -> Result<Field<f64>> {
    if k.channels() != x.channels() {
        return Err(DriftError::Shape(format!(
            "kernel has {} channels, field has {}",
            k.channels(),
            x.channels()
        )));
    }
    Field::new(x.dims(), dwconv_kernel(x.data(), k.weights.data(), x.dims(), k.size()))
}

/// Operator norm of each channel's periodic convolution on an `h x w` grid:
/// the largest magnitude of the kernel's DFT.
pub fn dwconv_spectral_norm(k: &DepthwiseKernel, h: usize, w: usize) -> Result<Vec<f64>> {
    let ks = k.size();
    if h < ks || w < ks {
        return Err(DriftError::Shape(format!("grid {h}x{w} smaller than kernel {ks}")));
    }
    let r = ks / 2;
    let c = k.channels();
    // Cross-correlation with k is convolution with k flipped; the magnitude
    // spectrum is the same, so embed k directly at offsets (a - r, b - r).
    let mut planes = vec![0.0; c * h * w];
    for ch in 0..c {
        for a in 0..ks {
            for b in 0..ks {
                let i = (a + h - r) % h;
                let j = (b + w - r) % w;
                planes[(ch * h + i) * w + j] += k.weights.data()[(ch * ks + a) * ks + b];
            }
        }
    }
    let spec: Vec<Complex64> = rfft2_planes(&planes, c, h, w);
    let wf = w / 2 + 1;
    let scale = (h * w) as f64;
    Ok((0..c)
        .map(|ch| {
            spec[ch * h * wf..(ch + 1) * h * wf]
                .iter()
                .map(|v| v.norm() * scale)
                .fold(0.0, f64::max)
        })
        .collect())
}

pub fn pointwise(x: &Field<f64>, lin: &PointwiseLinear) -> Result<Field<f64>> {
    if lin.in_channels() != x.channels() {
        return Err(DriftError::Shape(format!(
            "pointwise expects {} channels, field has {}",
            lin.in_channels(),
            x.channels()
        )));
    }
    let [b, _, h, w] = x.dims();
    let co = lin.out_channels();
    let data = pointwise_kernel(x.data(), lin.weight.data(), Some(lin.bias.data()), x.dims(), co);
    Field::new([b, co, h, w], data)
}

/// `dwconv(x) + pointwise(x)`.
pub fn local_branch(x: &Field<f64>, k: &DepthwiseKernel, lin: &PointwiseLinear) -> Result<Field<f64>> {
    if lin.out_channels() != x.channels() {
        return Err(DriftError::Shape("local branch must preserve channel count".into()));
    }
    let a = dwconv(x, k)?;
    let b = pointwise(x, lin)?;
    Field::new(x.dims(), a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect())
}

pub fn pixel_unshuffle(x: &Field<f64>) -> Result<Field<f64>> {
    let [b, c, h, w] = x.dims();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(DriftError::Shape(format!("downsampling {h}x{w} would leave odd sides")));
    }
    let data = unshuffle_index(x.dims()).iter().map(|&s| x.data()[s]).collect();
    Field::new([b, 4 * c, h / 2, w / 2], data)
}

pub fn pixel_shuffle(x: &Field<f64>) -> Result<Field<f64>> {
    let [b, c4, h, w] = x.dims();
    if c4 % 4 != 0 {
        return Err(DriftError::Shape(format!("pixel shuffle needs a multiple of 4 channels, got {c4}")));
    }
    let data = shuffle_index(x.dims()).iter().map(|&s| x.data()[s]).collect();
    Field::new([b, c4 / 4, 2 * h, 2 * w], data)
}

/// Tape handles of a time-conditioned normalization.
#[derive(Clone, Copy, Debug)]
pub struct TcnVars {
    pub gain: Var,
    pub bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Channel layer norm followed by FiLM with `(gamma, delta) = net(t)`.
/// `t` is a `[B, 1]` node.
pub fn time_cond_norm(tape: &mut Tape, x: Var, t: Var, v: TcnVars, eps: f64) -> Result<Var> {
    let xn = tape.layer_norm(x, eps)?;
    let hdn = tape.linear(t, v.w1, Some(v.b1))?;
    let hdn = tape.gelu(hdn)?;
    let cond = tape.linear(hdn, v.w2, Some(v.b2))?;
    tape.film(xn, cond, v.gain, v.bias)
}
