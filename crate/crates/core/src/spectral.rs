//! Frequency branch of a DRIFT block.
//!
//! `rfft2 -> low/high split -> complex channel mixing on the low rectangle ->
//! radial band statistics -> band gate -> convex fusion -> irfft2`.
//!
//! The fusion `Y = a V_low + (1 - a) X_high` with `a` in `[0, 1]` never
//! produces a bin larger than the larger of its two inputs.

use std::rc::Rc;

use log::warn;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{MaskGrad, Tape, Var};
use crate::autodiff::sigmoid;
use crate::error::{DriftError, Result};
use crate::grid::{half_width, irfft2, rfft2, signed_row_freq, Field, FreqGrid, RowIndexing, Spectrum};
use crate::linalg::{power_iteration_norm, NormEstimate};
use crate::tensor::Tensor;

/// Per-bin statistic averaged within each radial band to drive the gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// `|X_high|^2 / (|X_low|^2 + |X_high|^2 + eps)`.
    #[default]
    EnergyFraction,
    /// `| |X_high| - |X_low| |`.
    MagDiff,
}

/// How the gate weights are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Learned band gate.
    #[default]
    Learned,
    /// Hard indicator of the low rectangle (`no_rg` ablation).
    HardIndicator,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub bands: usize,
    pub feature_mode: FeatureMode,
    pub eps: f64,
    pub rows: RowIndexing,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            bands: 8,
            feature_mode: FeatureMode::EnergyFraction,
            eps: 1e-8,
            rows: RowIndexing::Symmetric,
        }
    }
}

/// Learnable low-frequency rectangle, `kappa = sigmoid(theta) / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowMask {
    pub theta_row: f64,
    pub theta_col: f64,
}

impl Default for LowMask {
    fn default() -> Self {
        Self {
            theta_row: 0.0,
            theta_col: 0.0,
        }
    }
}

impl LowMask {
    pub fn new(theta_row: f64, theta_col: f64) -> Self {
        Self { theta_row, theta_col }
    }

    pub fn kappa_row(&self) -> f64 {
        0.5 * sigmoid(self.theta_row)
    }

    pub fn kappa_col(&self) -> f64 {
        0.5 * sigmoid(self.theta_col)
    }

    /// Area fraction `kappa_row * kappa_col <= 0.25`.
    pub fn sigma_lf(&self) -> f64 {
        self.kappa_row() * self.kappa_col()
    }

    /// Integer extents `floor(2 kappa n)` clamped to `[1, n]` for a
    /// half-plane of `h x wf` bins.
    pub fn extents(&self, h: usize, wf: usize) -> (usize, usize) {
        let ext = |kappa: f64, n: usize| ((2.0 * kappa * n as f64).floor() as usize).clamp(1, n);
        (ext(self.kappa_row(), h), ext(self.kappa_col(), wf))
    }

    /// Mask built from explicit extents, bypassing the logits.
    pub fn indicator_for_extents(h: usize, w: usize, rows: RowIndexing, kr: usize, kc: usize) -> Vec<f64> {
        let wf = half_width(w);
        let mut m = vec![0.0; h * wf];
        for i in 0..h {
            let fr = match rows {
                RowIndexing::Symmetric => signed_row_freq(i, h).unsigned_abs() as usize,
                RowIndexing::Literal => i,
            };
            if fr >= kr {
                continue;
            }
            for j in 0..kc.min(wf) {
                m[i * wf + j] = 1.0;
            }
        }
        m
    }

    /// 0/1 indicator over the `h x (w/2+1)` half-plane.
    pub fn indicator(&self, h: usize, w: usize, rows: RowIndexing) -> Vec<f64> {
        let (kr, kc) = self.extents(h, half_width(w));
        Self::indicator_for_extents(h, w, rows, kr, kc)
    }

    /// Straight-through surrogate: per-bin derivatives of a logistic ramp
    /// placed at the continuous cutoff, w.r.t. `(theta_row, theta_col)`.
    pub fn surrogate_grads(&self, h: usize, w: usize, rows: RowIndexing) -> (Vec<f64>, Vec<f64>) {
        let wf = half_width(w);
        let ramp = |theta: f64, n: usize, f: usize| {
            let s = sigmoid(theta);
            let soft = sigmoid(s * n as f64 - f as f64 - 0.5);
            (soft, soft * (1.0 - soft) * n as f64 * s * (1.0 - s))
        };
        let mut d_row = vec![0.0; h * wf];
        let mut d_col = vec![0.0; h * wf];
        for i in 0..h {
            let fr = match rows {
                RowIndexing::Symmetric => signed_row_freq(i, h).unsigned_abs() as usize,
                RowIndexing::Literal => i,
            };
            let (sr, dsr) = ramp(self.theta_row, h, fr);
            for j in 0..wf {
                let (sc, dsc) = ramp(self.theta_col, wf, j);
                d_row[i * wf + j] = dsr * sc;
                d_col[i * wf + j] = sr * dsc;
            }
        }
        (d_row, d_col)
    }
}

/// Radial band index map over the half-plane.
#[derive(Clone, Debug, PartialEq)]
pub struct BandLayout {
    pub h: usize,
    pub w: usize,
    pub bands: usize,
    index: Vec<usize>,
    counts: Vec<usize>,
}

impl BandLayout {
    /// Band of bin `k` is `min(floor(J * min(r, 1)), J - 1)`.
    pub fn new(h: usize, w: usize, bands: usize, rows: RowIndexing) -> Result<Self> {
        if bands == 0 {
            return Err(DriftError::Config("band count must be positive".into()));
        }
        let grid = FreqGrid::new(h, w, rows);
        let wf = half_width(w);
        let mut index = Vec::with_capacity(h * wf);
        let mut counts = vec![0; bands];
        for i in 0..h {
            for j in 0..wf {
                let r = grid.clamped(i, j);
                let b = ((bands as f64 * r).floor() as usize).min(bands - 1);
                index.push(b);
                counts[b] += 1;
            }
        }
        Ok(Self {
            h,
            w,
            bands,
            index,
            counts,
        })
    }

    pub fn wf(&self) -> usize {
        half_width(self.w)
    }

    pub fn band_of(&self, bin: usize) -> usize {
        self.index[bin]
    }

    pub fn index_map(&self) -> &[usize] {
        &self.index
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Bins of the outermost non-empty band.
    pub fn outer_band(&self) -> usize {
        (0..self.bands).rev().find(|&b| self.counts[b] > 0).unwrap_or(0)
    }

    /// Share of each band's bins covered by a 0/1 mask.
    pub fn coverage(&self, mask: &[f64]) -> Vec<f64> {
        let mut hits = vec![0.0; self.bands];
        for (k, &m) in mask.iter().enumerate() {
            hits[self.index[k]] += m;
        }
        hits.iter()
            .zip(&self.counts)
            .map(|(&h, &n)| if n == 0 { 0.0 } else { h / n as f64 })
            .collect()
    }
}

/// Shared complex `C x C` channel mixer, stored as `[C, C, 2]` (re, im).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMixer {
    pub channels: usize,
    pub weights: Tensor,
}

impl ComplexMixer {
    pub fn identity(channels: usize) -> Self {
        let mut w = Tensor::zeros(&[channels, channels, 2]);
        for c in 0..channels {
            w.data_mut()[(c * channels + c) * 2] = 1.0;
        }
        Self { channels, weights: w }
    }

    pub fn from_tensor(weights: Tensor) -> Result<Self> {
        match weights.shape() {
            &[a, b, 2] if a == b => Ok(Self { channels: a, weights }),
            s => Err(DriftError::Shape(format!("complex mixer must be [C, C, 2], got {s:?}"))),
        }
    }

    pub fn entry(&self, o: usize, i: usize) -> Complex64 {
        let k = (o * self.channels + i) * 2;
        Complex64::new(self.weights.data()[k], self.weights.data()[k + 1])
    }

    /// `rho_W = ||W||_2`, via power iteration on the real `2C x 2C` form.
    pub fn spectral_norm(&self) -> NormEstimate {
        let c = self.channels;
        let apply = |x: &[f64], adjoint: bool| {
            let mut out = vec![0.0; 2 * c];
            for o in 0..c {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..c {
                    let (w, v) = if adjoint {
                        (self.entry(i, o).conj(), Complex64::new(x[2 * i], x[2 * i + 1]))
                    } else {
                        (self.entry(o, i), Complex64::new(x[2 * i], x[2 * i + 1]))
                    };
                    acc += w * v;
                }
                out[2 * o] = acc.re;
                out[2 * o + 1] = acc.im;
            }
            out
        };
        power_iteration_norm(|x| apply(x, false), |y| apply(y, true), 2 * c, 2000, 1e-13, 7)
    }
}

/// Two-layer band gate `J -> 2J -> J` with GELU between and sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct BandGateWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl BandGateWeights {
    pub fn zeros(bands: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[2 * bands, bands]),
            b1: Tensor::zeros(&[2 * bands]),
            w2: Tensor::zeros(&[bands, 2 * bands]),
            b2: Tensor::zeros(&[bands]),
        }
    }

    pub fn bands(&self) -> usize {
        self.b2.len()
    }
}

/// Everything a standalone spectral-path evaluation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralParams {
    pub mask: LowMask,
    pub mixer: ComplexMixer,
    pub gate: BandGateWeights,
    pub config: SpectralConfig,
    pub gate_mode: GateMode,
}

impl SpectralParams {
    /// Identity-initialized mixer, zero gate except the band bias: +2 on
    /// bands mostly inside the low rectangle, -2 elsewhere.
    pub fn near_identity(channels: usize, h: usize, w: usize, config: SpectralConfig) -> Result<Self> {
        let mask = LowMask::default();
        let layout = BandLayout::new(h, w, config.bands, config.rows)?;
        let mut gate = BandGateWeights::zeros(config.bands);
        let cover = layout.coverage(&mask.indicator(h, w, config.rows));
        for (b, c) in gate.b2.data_mut().iter_mut().zip(cover) {
            *b = if c > 0.5 { 2.0 } else { -2.0 };
        }
        Ok(Self {
            mask,
            mixer: ComplexMixer::identity(channels),
            gate,
            config,
            gate_mode: GateMode::Learned,
        })
    }
}

fn check_same(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(DriftError::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Splits a spectrum into the low rectangle and its exact complement.
pub fn split_low_high(
    spec: &Spectrum<f64>,
    mask: &LowMask,
    rows: RowIndexing,
) -> Result<(Spectrum<f64>, Spectrum<f64>)> {
    let (h, w) = spec
        .origin()
        .ok_or_else(|| DriftError::Shape("split needs origin dims".into()))?;
    let ind = mask.indicator(h, w, rows);
    split_with_indicator(spec, &ind)
}

pub fn split_with_indicator(spec: &Spectrum<f64>, ind: &[f64]) -> Result<(Spectrum<f64>, Spectrum<f64>)> {
    let [_, _, h, wf] = spec.dims();
    if ind.len() != h * wf {
        return Err(DriftError::Shape("mask does not cover the half-plane".into()));
    }
    let zero = Complex64::new(0.0, 0.0);
    let mut low = Vec::with_capacity(spec.data().len());
    let mut high = Vec::with_capacity(spec.data().len());
    for (k, &v) in spec.data().iter().enumerate() {
        if ind[k % (h * wf)] != 0.0 {
            low.push(v);
            high.push(zero);
        } else {
            low.push(zero);
            high.push(v);
        }
    }
    Ok((spec.with_data(low)?, spec.with_data(high)?))
}

/// `V(k) = W X(k)` on bins where `ind(k) != 0`, zero elsewhere.
pub(crate) fn mix_kernel(x: &[Complex64], dims: [usize; 4], w: &ComplexMixer, ind: &[f64]) -> Vec<Complex64> {
    let [b, c, h, wf] = dims;
    let plane = h * wf;
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    let active: Vec<usize> = (0..plane).filter(|&k| ind[k] != 0.0).collect();
    for ib in 0..b {
        for o in 0..c {
            let dst = (ib * c + o) * plane;
            for i in 0..c {
                let wo = w.entry(o, i);
                if wo == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let src = (ib * c + i) * plane;
                for &k in &active {
                    out[dst + k] += wo * x[src + k];
                }
            }
        }
    }
    out
}

/// Complex channel mixing of the low part.
pub fn mix_low(low: &Spectrum<f64>, mixer: &ComplexMixer, ind: &[f64]) -> Result<Spectrum<f64>> {
    let dims = low.dims();
    if mixer.channels != dims[1] {
        return Err(DriftError::Shape(format!(
            "mixer is {0}x{0} but spectrum has {1} channels",
            mixer.channels, dims[1]
        )));
    }
    if ind.len() != dims[2] * dims[3] {
        return Err(DriftError::Shape("mask does not cover the half-plane".into()));
    }
    low.with_data(mix_kernel(low.data(), dims, mixer, ind))
}

/// Per-bin feature value.
pub(crate) fn bin_feature(low: Complex64, high: Complex64, mode: FeatureMode, eps: f64) -> f64 {
    match mode {
        FeatureMode::EnergyFraction => {
            let a = high.norm_sqr();
            a / (low.norm_sqr() + a + eps)
        }
        FeatureMode::MagDiff => (high.norm() - low.norm()).abs(),
    }
}

pub(crate) fn band_features_kernel(
    low: &[Complex64],
    high: &[Complex64],
    planes: usize,
    layout: &BandLayout,
    mode: FeatureMode,
    eps: f64,
) -> Vec<f64> {
    let plane = layout.h * layout.wf();
    let j = layout.bands;
    let mut out = vec![0.0; planes * j];
    for p in 0..planes {
        let acc = &mut out[p * j..(p + 1) * j];
        for k in 0..plane {
            acc[layout.band_of(k)] += bin_feature(low[p * plane + k], high[p * plane + k], mode, eps);
        }
        for (b, v) in acc.iter_mut().enumerate() {
            let n = layout.counts()[b];
            *v = if n == 0 { 0.0 } else { *v / n as f64 };
        }
    }
    out
}

/// Band-mean features `[B, C, J]`. Empty bands report 0.
pub fn band_features(
    low: &Spectrum<f64>,
    high: &Spectrum<f64>,
    layout: &BandLayout,
    mode: FeatureMode,
    eps: f64,
) -> Result<Tensor> {
    let dims = low.dims();
    check_same(&dims, &high.dims(), "band features")?;
    if dims[2] != layout.h || dims[3] != layout.wf() {
        return Err(DriftError::Shape("band layout does not match spectrum".into()));
    }
    let data = band_features_kernel(low.data(), high.data(), dims[0] * dims[1], layout, mode, eps);
    Tensor::new(vec![dims[0], dims[1], layout.bands], data)
}

/// Band gate `[B, C, J] -> [B, C, J]` values in `(0, 1)`.
pub fn gate_bands(features: &Tensor, gate: &BandGateWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let vars = GateVars {
        w1: tape.constant(gate.w1.clone()),
        b1: tape.constant(gate.b1.clone()),
        w2: tape.constant(gate.w2.clone()),
        b2: tape.constant(gate.b2.clone()),
    };
    let a = gate_on_tape(&mut tape, f, vars)?;
    Ok(tape.real(a)?.clone())
}

/// Per-bin gate `[B, C, H, W_fft]`, constant within each radial band.
pub fn gate(features: &Tensor, gate: &BandGateWeights, layout: &BandLayout) -> Result<Tensor> {
    let bands = gate_bands(features, gate)?;
    Ok(broadcast_bands(&bands, layout))
}

pub(crate) fn broadcast_bands(bands: &Tensor, layout: &BandLayout) -> Tensor {
    let j = layout.bands;
    let planes = bands.len() / j;
    let plane = layout.h * layout.wf();
    let mut out = Vec::with_capacity(planes * plane);
    for p in 0..planes {
        for k in 0..plane {
            out.push(bands.data()[p * j + layout.band_of(k)]);
        }
    }
    let mut shape = bands.shape()[..bands.shape().len() - 1].to_vec();
    shape.extend([layout.h, layout.wf()]);
    Tensor::new(shape, out).expect("broadcast shape")
}

/// Counts bins where `|a V + (1-a) X_high| > max(|V|, |X_high|)` beyond
/// `4 eps` relative slack. `alpha` is used as given, without clamping.
pub fn amplitude_violations(v: &[Complex64], xh: &[Complex64], alpha: &[f64]) -> usize {
    v.iter()
        .zip(xh)
        .zip(alpha)
        .filter(|((&a, &b), &al)| {
            let y = a * al + b * (1.0 - al);
            let bound = a.norm().max(b.norm());
            y.norm() > bound + 4.0 * f64::EPSILON * bound.max(f64::MIN_POSITIVE)
        })
        .count()
}

/// Convex per-bin fusion. Gates outside `[0, 1]` are clamped with a warning.
pub fn fuse(v_low: &Spectrum<f64>, x_high: &Spectrum<f64>, alpha: &Tensor) -> Result<Spectrum<f64>> {
    check_same(&v_low.dims(), &x_high.dims(), "fuse")?;
    if alpha.len() != v_low.data().len() {
        return Err(DriftError::Shape("fuse gate must have one weight per bin".into()));
    }
    let mut clamped = 0usize;
    let data = v_low
        .data()
        .iter()
        .zip(x_high.data())
        .zip(alpha.data())
        .map(|((&a, &b), &al)| {
            let al2 = al.clamp(0.0, 1.0);
            if al2 != al {
                clamped += 1;
            }
            a * al2 + b * (1.0 - al2)
        })
        .collect();
    if clamped > 0 {
        warn!("fuse: {clamped} gate values outside [0, 1] were clamped");
    }
    v_low.with_data(data)
}

/// Train/eval switch for operations that only exist at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Per-bin taper factors `1 - beta * mean_c(alpha)` on the outermost band,
/// 1 elsewhere. Shape `[B, C, H, W_fft]` (identical across channels).
pub(crate) fn taper_factors(alpha: &Tensor, beta: f64, layout: &BandLayout) -> Result<Tensor> {
    let [b, c, h, wf] = alpha.dims4()?;
    let outer = layout.outer_band();
    let plane = h * wf;
    let mut out = vec![1.0; alpha.len()];
    for ib in 0..b {
        for k in 0..plane {
            if layout.band_of(k) != outer {
                continue;
            }
            let mean = (0..c).map(|ic| alpha.data()[(ib * c + ic) * plane + k]).sum::<f64>() / c as f64;
            let f = 1.0 - beta * mean.clamp(0.0, 1.0);
            for ic in 0..c {
                out[(ib * c + ic) * plane + k] = f;
            }
        }
    }
    Tensor::new(vec![b, c, h, wf], out)
}

/// Inference-only damping of the outermost radial band by `1 - beta * mean_c(alpha)`.
pub fn taper(spec: &Spectrum<f64>, alpha: &Tensor, beta: f64, layout: &BandLayout, mode: Mode) -> Result<Spectrum<f64>> {
    if mode == Mode::Train {
        return Err(DriftError::TrainingMode("the outer-band taper is inference-only".into()));
    }
    if !(0.0..=0.5).contains(&beta) {
        return Err(DriftError::Config(format!("taper beta must lie in [0, 0.5], got {beta}")));
    }
    if alpha.len() != spec.data().len() {
        return Err(DriftError::Shape("taper gate must have one weight per bin".into()));
    }
    let f = taper_factors(alpha, beta, layout)?;
    spec.with_data(spec.data().iter().zip(f.data()).map(|(v, s)| v * *s).collect())
}

/// Tape handles for the gate network.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles for one spectral path.
#[derive(Clone, Copy, Debug)]
pub struct SpectralVars {
    pub theta: Var,
    pub mixer: Var,
    pub gate: GateVars,
}

/// Options that change what the spectral path computes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralRun {
    pub gate_mode: GateMode,
    /// Feed the gate as a constant (no gradient through alpha).
    pub detach_gate: bool,
    /// Inference taper strength; `None` disables it.
    pub taper_beta: Option<f64>,
    pub mode: Mode,
}

impl Default for SpectralRun {
    fn default() -> Self {
        Self {
            gate_mode: GateMode::Learned,
            detach_gate: false,
            taper_beta: None,
            mode: Mode::Train,
        }
    }
}

/// Tape nodes produced by one spectral path evaluation.
#[derive(Clone, Debug)]
pub struct SpectralTrace {
    pub x_hat: Var,
    pub low: Var,
    pub high: Var,
    pub v_low: Var,
    pub alpha: Var,
    pub fused: Var,
    pub output: Var,
    pub indicator: Rc<Vec<f64>>,
    pub layout: Rc<BandLayout>,
}

pub(crate) fn gate_on_tape(tape: &mut Tape, features: Var, g: GateVars) -> Result<Var> {
    let h = tape.linear(features, g.w1, Some(g.b1))?;
    let h = tape.gelu(h)?;
    let o = tape.linear(h, g.w2, Some(g.b2))?;
    tape.sigmoid(o)
}

/// Records the spectral path of one block on `tape`.
pub fn spectral_path_on_tape(
    tape: &mut Tape,
    x: Var,
    vars: SpectralVars,
    config: &SpectralConfig,
    run: &SpectralRun,
) -> Result<SpectralTrace> {
    let [_, _, h, w] = tape.real(x)?.dims4()?;
    let theta = tape.real(vars.theta)?;
    if theta.len() != 2 {
        return Err(DriftError::Shape("mask logits must hold two values".into()));
    }
    let mask = LowMask::new(theta.data()[0], theta.data()[1]);
    let indicator = Rc::new(mask.indicator(h, w, config.rows));
    let layout = Rc::new(BandLayout::new(h, w, config.bands, config.rows)?);
    let (d_row, d_col) = mask.surrogate_grads(h, w, config.rows);

    let x_hat = tape.rfft2(x)?;
    let low = tape.low_pass(
        x_hat,
        indicator.clone(),
        Some(MaskGrad {
            theta: vars.theta,
            d_row,
            d_col,
        }),
    )?;
    let high = tape.csub(x_hat, low)?;
    let v_low = tape.complex_mix(low, vars.mixer, indicator.clone())?;

    let alpha = match run.gate_mode {
        GateMode::Learned => {
            let feats = tape.band_features(low, high, layout.clone(), config.feature_mode, config.eps)?;
            let bands = gate_on_tape(tape, feats, vars.gate)?;
            let a = tape.band_broadcast(bands, layout.clone())?;
            if run.detach_gate {
                let v = tape.real(a)?.clone();
                tape.constant(v)
            } else {
                a
            }
        }
        GateMode::HardIndicator => {
            let [b, c, hh, wf] = tape.complex(x_hat)?.dims4()?;
            let plane = hh * wf;
            let data = (0..b * c * plane).map(|k| indicator[k % plane]).collect();
            tape.constant(Tensor::new(vec![b, c, hh, wf], data)?)
        }
    };
    let mut fused = tape.fuse(v_low, high, alpha)?;
    if let Some(beta) = run.taper_beta {
        if run.mode == Mode::Train {
            return Err(DriftError::TrainingMode("the outer-band taper is inference-only".into()));
        }
        if beta > 0.0 {
            let f = taper_factors(tape.real(alpha)?, beta, &layout)?;
            fused = tape.scale_bins(fused, f)?;
        }
    }
    let output = tape.irfft2(fused, w)?;
    Ok(SpectralTrace {
        x_hat,
        low,
        high,
        v_low,
        alpha,
        fused,
        output,
        indicator,
        layout,
    })
}

/// Cached intermediates of a standalone spectral-path evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBlockOut {
    pub fused: Spectrum<f64>,
    pub x_low: Spectrum<f64>,
    pub x_high: Spectrum<f64>,
    pub v_low: Spectrum<f64>,
    pub alpha: Tensor,
    pub amplitude_violations: usize,
}

/// Evaluates the spectral path of one block on its own.
pub fn spectral_block_forward(
    x: &Field<f64>,
    params: &SpectralParams,
    run: &SpectralRun,
) -> Result<(Field<f64>, SpectralBlockOut)> {
    if params.mixer.channels != x.channels() {
        return Err(DriftError::Shape("mixer width does not match field channels".into()));
    }
    let mut tape = Tape::new().with_amplitude_checks(true);
    let xv = tape.constant(Tensor::from(x.clone()));
    let vars = SpectralVars {
        theta: tape.constant(Tensor::new(vec![2], vec![params.mask.theta_row, params.mask.theta_col])?),
        mixer: tape.constant(params.mixer.weights.clone()),
        gate: GateVars {
            w1: tape.constant(params.gate.w1.clone()),
            b1: tape.constant(params.gate.b1.clone()),
            w2: tape.constant(params.gate.w2.clone()),
            b2: tape.constant(params.gate.b2.clone()),
        },
    };
    let run = SpectralRun {
        gate_mode: params.gate_mode,
        ..*run
    };
    let tr = spectral_path_on_tape(&mut tape, xv, vars, &params.config, &run)?;
    let (h, w) = (x.height(), x.width());
    let spec = |v: Var| -> Result<Spectrum<f64>> {
        let t = tape.complex(v)?;
        Spectrum::new(t.dims4()?, (h, w), t.data().to_vec())
    };
    let out = SpectralBlockOut {
        fused: spec(tr.fused)?,
        x_low: spec(tr.low)?,
        x_high: spec(tr.high)?,
        v_low: spec(tr.v_low)?,
        alpha: tape.real(tr.alpha)?.clone(),
        amplitude_violations: tape.amplitude_report().0,
    };
    let y = Field::try_from(tape.real(tr.output)?.clone())?;
    Ok((y, out))
}

/// Standalone rfft2 helper returning the split of a field.
pub fn field_split(x: &Field<f64>, mask: &LowMask, rows: RowIndexing) -> Result<(Spectrum<f64>, Spectrum<f64>)> {
    split_low_high(&rfft2(x), mask, rows)
}

/// Spatial view of a spectrum part.
pub fn to_field(spec: &Spectrum<f64>) -> Result<Field<f64>> {
    irfft2(spec)
}
