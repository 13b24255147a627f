//! Real/complex field containers and the forward-normalized 2D real FFT.
//!
//! Spectra use the half-plane layout `[B, C, H, W/2 + 1]`: rows hold the full
//! (aliased) set of row frequencies and columns hold the non-negative column
//! frequencies. The forward transform carries the `1/(H*W)` factor, so the DC
//! bin is the spatial mean and the inverse is a plain sum.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::num_traits::{Float, FromPrimitive};
use rustfft::{Fft, FftNum, FftPlanner};

use crate::error::{DriftError, Result};

/// Floating point types the FFT pipeline runs in.
pub trait Real: FftNum + Float + FromPrimitive + Default + Send + Sync {}
impl Real for f32 {}
impl Real for f64 {}

fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

fn from_f64<T: Real>(v: f64) -> T {
    T::from_f64(v).unwrap_or_else(T::nan)
}

/// Number of half-plane columns for a row length `w`.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Hermitian multiplicity of half-plane column `j` for an even row length `w`.
///
/// Columns `0` and `w/2` are self-conjugate and count once; every other
/// column stands for itself and its mirror.
pub fn multiplicity(j: usize, w: usize) -> f64 {
    if j == 0 || 2 * j == w {
        1.0
    } else {
        2.0
    }
}

/// Signed row frequency for row index `i` of an `h`-row spectrum.
pub fn signed_row_freq(i: usize, h: usize) -> i64 {
    if 2 * i <= h {
        i as i64
    } else {
        i as i64 - h as i64
    }
}

fn check_grid(h: usize, w: usize) -> Result<()> {
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(DriftError::Shape(format!(
            "grid must have even sides >= 2, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Real field `[B, C, H, W]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Field<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Field<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        check_grid(dims[2], dims[3])?;
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(DriftError::Shape(format!(
                "field of dims {dims:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DriftError::NonFinite("field".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        Self::new(dims, vec![T::zero(); dims.iter().product()])
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Result<Self> {
        let [b, c, h, w] = dims;
        let mut data = Vec::with_capacity(b * c * h * w);
        for ib in 0..b {
            for ic in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        data.push(f(ib, ic, i, j));
                    }
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn at(&self, b: usize, c: usize, i: usize, j: usize) -> T {
        let [_, cc, h, w] = self.dims;
        self.data[((b * cc + c) * h + i) * w + j]
    }

    /// Spatial plane for sample `b`, channel `c`.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn cast<U: Real>(&self) -> Field<U> {
        Field {
            dims: self.dims,
            data: self.data.iter().map(|&v| from_f64(to_f64(v))).collect(),
        }
    }

    /// Cyclic shift on the torus by `(di, dj)` rows/columns.
    pub fn roll(&self, di: usize, dj: usize) -> Self {
        let [b, c, h, w] = self.dims;
        let mut out = vec![T::zero(); self.data.len()];
        for p in 0..b * c {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h * w..(p + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    dst[((i + di) % h) * w + (j + dj) % w] = src[i * w + j];
                }
            }
        }
        Self { dims: self.dims, data: out }
    }
}

/// Half-plane spectrum `[B, C, H, W/2 + 1]` of a real `H x W` field.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<T> {
    dims: [usize; 4],
    origin: Option<(usize, usize)>,
    data: Vec<Complex<T>>,
}

impl<T: Real> Spectrum<T> {
    /// Builds a spectrum for an `h x w` origin grid. `dims` is `[B, C, h, w/2+1]`.
    pub fn new(dims: [usize; 4], origin: (usize, usize), data: Vec<Complex<T>>) -> Result<Self> {
        check_grid(origin.0, origin.1)?;
        if dims[2] != origin.0 || dims[3] != half_width(origin.1) {
            return Err(DriftError::Shape(format!(
                "spectrum dims {dims:?} do not match origin grid {origin:?}"
            )));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(DriftError::Shape("spectrum data length".into()));
        }
        Ok(Self { dims, origin: Some(origin), data })
    }

    /// A spectrum without origin information; it cannot be inverted.
    pub fn detached(dims: [usize; 4], data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(DriftError::Shape("spectrum data length".into()));
        }
        Ok(Self { dims, origin: None, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims,
            origin: self.origin,
            data: vec![Complex::new(T::zero(), T::zero()); self.data.len()],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn origin(&self) -> Option<(usize, usize)> {
        self.origin
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex<T>> {
        self.data
    }

    pub fn at(&self, b: usize, c: usize, i: usize, j: usize) -> Complex<T> {
        let [_, cc, h, wf] = self.dims;
        self.data[((b * cc + c) * h + i) * wf + j]
    }

    pub fn with_data(&self, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(DriftError::Shape("spectrum data length".into()));
        }
        Ok(Self { dims: self.dims, origin: self.origin, data })
    }

    /// Largest violation of the Hermitian constraint on the self-conjugate
    /// columns. Zero for any spectrum produced by [`rfft2`].
    pub fn hermitian_defect(&self) -> f64 {
        let [b, c, h, wf] = self.dims;
        let w = self.origin.map(|o| o.1).unwrap_or(2 * (wf - 1));
        let mut worst = 0.0f64;
        for p in 0..b * c {
            let plane = &self.data[p * h * wf..(p + 1) * h * wf];
            for j in [0, w / 2] {
                for i in 0..h {
                    let a = plane[i * wf + j];
                    let m = plane[((h - i) % h) * wf + j].conj();
                    worst = worst.max(to_f64((a - m).norm()));
                }
            }
        }
        worst
    }
}

/// Reusable row/column FFT plans for one `h x w` grid.
pub struct Rfft2Plan<T: Real> {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> Rfft2Plan<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::<T>::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            col_fwd: planner.plan_fft_forward(h),
            row_inv: planner.plan_fft_inverse(w),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    /// Forward-normalized transform of `planes` contiguous `h x w` planes.
    pub fn forward(&self, input: &[T], planes: usize) -> Vec<Complex<T>> {
        let (h, w) = (self.h, self.w);
        let wf = half_width(w);
        let scale = from_f64::<T>(1.0 / (h * w) as f64);
        let zero = Complex::new(T::zero(), T::zero());
        let mut out = vec![zero; planes * h * wf];
        let mut row = vec![zero; w];
        let mut col = vec![zero; h];
        for p in 0..planes {
            let src = &input[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h * wf..(p + 1) * h * wf];
            for i in 0..h {
                for (r, &v) in row.iter_mut().zip(&src[i * w..(i + 1) * w]) {
                    *r = Complex::new(v, T::zero());
                }
                self.row_fwd.process(&mut row);
                dst[i * wf..(i + 1) * wf].copy_from_slice(&row[..wf]);
            }
            for j in 0..wf {
                for i in 0..h {
                    col[i] = dst[i * wf + j];
                }
                self.col_fwd.process(&mut col);
                for i in 0..h {
                    dst[i * wf + j] = col[i] * scale;
                }
            }
        }
        out
    }

    /// `x(n) = Re sum_k m(k) X(k) e^{+2 pi i k.n}`.
    ///
    /// Imaginary parts that violate the Hermitian constraint on the
    /// self-conjugate columns are discarded, which makes this the real-linear
    /// inverse on the whole half-plane.
    pub fn inverse(&self, spec: &[Complex<T>], planes: usize) -> Vec<T> {
        let (h, w) = (self.h, self.w);
        let wf = half_width(w);
        let zero = Complex::new(T::zero(), T::zero());
        let mut out = vec![T::zero(); planes * h * w];
        let mut work = vec![zero; h * wf];
        let mut col = vec![zero; h];
        let mut row = vec![zero; w];
        for p in 0..planes {
            work.copy_from_slice(&spec[p * h * wf..(p + 1) * h * wf]);
            for j in 0..wf {
                for i in 0..h {
                    col[i] = work[i * wf + j];
                }
                self.col_inv.process(&mut col);
                for i in 0..h {
                    work[i * wf + j] = col[i];
                }
            }
            let dst = &mut out[p * h * w..(p + 1) * h * w];
            for i in 0..h {
                let half = &work[i * wf..(i + 1) * wf];
                row[..wf].copy_from_slice(half);
                for j in 1..w / 2 {
                    row[w - j] = half[j].conj();
                }
                self.row_inv.process(&mut row);
                for (d, r) in dst[i * w..(i + 1) * w].iter_mut().zip(&row) {
                    *d = r.re;
                }
            }
        }
        out
    }
}

/// Forward-normalized 2D real FFT over `planes` contiguous `h x w` planes.
pub fn rfft2_planes<T: Real>(input: &[T], planes: usize, h: usize, w: usize) -> Vec<Complex<T>> {
    Rfft2Plan::new(h, w).forward(input, planes)
}

/// Inverse of [`rfft2_planes`].
pub fn irfft2_planes<T: Real>(spec: &[Complex<T>], planes: usize, h: usize, w: usize) -> Vec<T> {
    Rfft2Plan::new(h, w).inverse(spec, planes)
}

/// 2D real FFT with forward normalization.
pub fn rfft2<T: Real>(field: &Field<T>) -> Spectrum<T> {
    let [b, c, h, w] = field.dims();
    let data = rfft2_planes(field.data(), b * c, h, w);
    Spectrum {
        dims: [b, c, h, half_width(w)],
        origin: Some((h, w)),
        data,
    }
}

/// Exact inverse of [`rfft2`]. Output is real by construction.
pub fn irfft2<T: Real>(spec: &Spectrum<T>) -> Result<Field<T>> {
    let (h, w) = spec
        .origin
        .ok_or_else(|| DriftError::Shape("spectrum has no origin dims; cannot invert".into()))?;
    let [b, c, _, _] = spec.dims;
    if cfg!(debug_assertions) {
        let defect = spec.hermitian_defect();
        if defect > 1e-6 {
            log::debug!("irfft2: non-Hermitian self-conjugate columns (defect {defect:e}); imaginary part discarded");
        }
    }
    let data = irfft2_planes(&spec.data, b * c, h, w);
    Field::new([b, c, h, w], data)
}

/// `sum_k m(k) |X(k)|^2` summed over all samples and channels.
///
/// Under forward normalization this equals the spatial mean square
/// `(1/(H W)) sum_x |u(x)|^2` of each plane (summed over planes).
pub fn spectral_energy<T: Real>(spec: &Spectrum<T>) -> f64 {
    let [b, c, h, wf] = spec.dims;
    let w = spec.origin.map(|o| o.1).unwrap_or(2 * (wf - 1));
    let mut total = 0.0;
    for p in 0..b * c {
        for i in 0..h {
            for j in 0..wf {
                let v = spec.data[(p * h + i) * wf + j];
                total += multiplicity(j, w) * to_f64(v.norm_sqr());
            }
        }
    }
    total
}

/// How rows are mapped to a frequency magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowIndexing {
    /// Rows above `H/2` alias to negative frequencies.
    #[default]
    Symmetric,
    /// Raw row index, as if every row were a positive frequency.
    Literal,
}

/// Normalized radial frequency map over the half-plane.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqGrid {
    pub h: usize,
    pub w: usize,
    radius: Vec<f64>,
}

impl FreqGrid {
    /// Symmetric rows are scaled by the row Nyquist `H/2`; columns by
    /// `W_fft - 1 = W/2`. The literal variant divides the raw row index by
    /// `H_fft - 1`.
    pub fn new(h: usize, w: usize, rows: RowIndexing) -> Self {
        let wf = half_width(w);
        let mut radius = Vec::with_capacity(h * wf);
        for i in 0..h {
            let ri = match rows {
                RowIndexing::Symmetric => signed_row_freq(i, h).unsigned_abs() as f64 / (h / 2) as f64,
                RowIndexing::Literal => i as f64 / (h - 1) as f64,
            };
            for j in 0..wf {
                let rj = j as f64 / (wf - 1) as f64;
                radius.push((ri * ri + rj * rj).sqrt());
            }
        }
        Self { h, w, radius }
    }

    pub fn wf(&self) -> usize {
        half_width(self.w)
    }

    /// Raw radius in `[0, sqrt 2]`.
    pub fn raw(&self, i: usize, j: usize) -> f64 {
        self.radius[i * self.wf() + j]
    }

    /// Radius clamped to `[0, 1]`.
    pub fn clamped(&self, i: usize, j: usize) -> f64 {
        self.raw(i, j).min(1.0)
    }

    pub fn raw_map(&self) -> &[f64] {
        &self.radius
    }
}

/// Integer wavenumber magnitude `|k|` of bin `(i, j)` with aliased rows.
pub fn wavenumber(i: usize, j: usize, h: usize) -> f64 {
    let ki = signed_row_freq(i, h) as f64;
    (ki * ki + (j * j) as f64).sqrt()
}

/// Shell-summed energy `E(k) = sum over |k| in [k - 1/2, k + 1/2) of m |X|^2`,
/// averaged over the batch and summed over channels. `E.len() = floor(|k|max) + 1`.
pub fn radial_spectrum<T: Real>(field: &Field<T>) -> Vec<f64> {
    let spec = rfft2(field);
    let [b, c, h, wf] = spec.dims;
    let w = field.width();
    let kmax = wavenumber(h / 2, wf - 1, h);
    let mut out = vec![0.0; kmax.round() as usize + 1];
    for p in 0..b * c {
        for i in 0..h {
            for j in 0..wf {
                let v = spec.data[(p * h + i) * wf + j];
                out[wavenumber(i, j, h).round() as usize] += multiplicity(j, w) * to_f64(v.norm_sqr());
            }
        }
    }
    for e in &mut out {
        *e /= b as f64;
    }
    out
}
