use std::rc::Rc;

use rustfft::num_complex::Complex64;

use super::{OpKind, Tape, Value, Var};
use crate::error::{DriftError, Result};
use crate::spectral::{amplitude_violations, band_features_kernel, BandLayout, ComplexMixer, FeatureMode};
use crate::tensor::{CTensor, Tensor};

/// Straight-through surrogate for the mask logits: per-bin derivatives of the
/// soft mask with respect to `theta = [row, col]`.
pub struct MaskGrad {
    pub theta: Var,
    pub d_row: Vec<f64>,
    pub d_col: Vec<f64>,
}

fn complex_val(t: CTensor) -> Value {
    Value::Complex(t)
}

impl Tape {
    /// `ind * x` over the half-plane (the same mask for every plane).
    pub fn low_pass(&mut self, x: Var, ind: Rc<Vec<f64>>, mask_grad: Option<MaskGrad>) -> Result<Var> {
        let tx = self.complex(x)?;
        let [_, _, h, wf] = tx.dims4()?;
        let plane = h * wf;
        if ind.len() != plane {
            return Err(DriftError::Shape("low-pass mask does not cover the half-plane".into()));
        }
        let zero = Complex64::new(0.0, 0.0);
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| if ind[k % plane] != 0.0 { v } else { zero })
            .collect();
        let out = CTensor::new(tx.shape().to_vec(), data)?;
        let shape = tx.shape().to_vec();
        Ok(self.push(
            complex_val(out),
            OpKind::LowPass,
            Some(Box::new(move |vals, g| {
                let g = g.as_complex().expect("complex cotangent");
                let dx: Vec<Complex64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| if ind[k % plane] != 0.0 { v } else { zero })
                    .collect();
                let mut res = vec![(x, complex_val(CTensor::new(shape.clone(), dx).expect("shape")))];
                if let Some(mg) = &mask_grad {
                    let xd = vals.complex(x).data();
                    let (mut dr, mut dc) = (0.0, 0.0);
                    for (k, (gv, xv)) in g.data().iter().zip(xd).enumerate() {
                        let ds = gv.re * xv.re + gv.im * xv.im;
                        dr += ds * mg.d_row[k % plane];
                        dc += ds * mg.d_col[k % plane];
                    }
                    res.push((mg.theta, Value::Real(Tensor::new(vec![2], vec![dr, dc]).expect("shape"))));
                }
                res
            })),
        ))
    }

    /// Per-bin `W x` over channels on bins with `ind != 0`. `w` is `[C, C, 2]`.
    pub fn complex_mix(&mut self, x: Var, w: Var, ind: Rc<Vec<f64>>) -> Result<Var> {
        let tx = self.complex(x)?;
        let dims = tx.dims4()?;
        let [b, c, h, wf] = dims;
        let mixer = ComplexMixer::from_tensor(self.real(w)?.clone())?;
        if mixer.channels != c {
            return Err(DriftError::Shape(format!("mixer is {0}x{0}, input has {c} channels", mixer.channels)));
        }
        if ind.len() != h * wf {
            return Err(DriftError::Shape("mix mask does not cover the half-plane".into()));
        }
        let out = CTensor::new(dims.to_vec(), crate::spectral::mix_kernel(tx.data(), dims, &mixer, &ind))?;
        Ok(self.push(
            complex_val(out),
            OpKind::ComplexMix,
            Some(Box::new(move |vals, g| {
                let g = g.as_complex().expect("complex cotangent").data();
                let xd = vals.complex(x).data();
                let wd = vals.real(w).data();
                let plane = h * wf;
                let active: Vec<usize> = (0..plane).filter(|&k| ind[k] != 0.0).collect();
                let mut dx = vec![Complex64::new(0.0, 0.0); xd.len()];
                let mut dw = vec![0.0; wd.len()];
                for ib in 0..b {
                    for o in 0..c {
                        let go = (ib * c + o) * plane;
                        for i in 0..c {
                            let wi = Complex64::new(wd[(o * c + i) * 2], wd[(o * c + i) * 2 + 1]);
                            let xi = (ib * c + i) * plane;
                            let mut acc = Complex64::new(0.0, 0.0);
                            for &k in &active {
                                dx[xi + k] += wi.conj() * g[go + k];
                                acc += g[go + k] * xd[xi + k].conj();
                            }
                            dw[(o * c + i) * 2] += acc.re;
                            dw[(o * c + i) * 2 + 1] += acc.im;
                        }
                    }
                }
                vec![
                    (x, complex_val(CTensor::new(vec![b, c, h, wf], dx).expect("shape"))),
                    (w, Value::Real(Tensor::new(vec![c, c, 2], dw).expect("shape"))),
                ]
            })),
        ))
    }

    /// Band means of the per-bin feature, `[B, C, J]`.
    pub fn band_features(
        &mut self,
        low: Var,
        high: Var,
        layout: Rc<BandLayout>,
        mode: FeatureMode,
        eps: f64,
    ) -> Result<Var> {
        let (tl, th) = (self.complex(low)?, self.complex(high)?);
        let [b, c, h, wf] = tl.dims4()?;
        if tl.shape() != th.shape() {
            return Err(DriftError::Shape("band features: low/high shapes differ".into()));
        }
        if h != layout.h || wf != layout.wf() {
            return Err(DriftError::Shape("band layout does not match spectrum".into()));
        }
        let j = layout.bands;
        let data = band_features_kernel(tl.data(), th.data(), b * c, &layout, mode, eps);
        let out = Tensor::new(vec![b, c, j], data)?;
        Ok(self.push(
            Value::Real(out),
            OpKind::BandFeatures,
            Some(Box::new(move |vals, g| {
                let g = g.as_real().expect("real cotangent").data();
                let (ld, hd) = (vals.complex(low).data(), vals.complex(high).data());
                let plane = h * wf;
                let zero = Complex64::new(0.0, 0.0);
                let mut dl = vec![zero; ld.len()];
                let mut dh = vec![zero; hd.len()];
                for p in 0..b * c {
                    for k in 0..plane {
                        let band = layout.band_of(k);
                        let n = layout.counts()[band] as f64;
                        let gk = g[p * j + band] / n;
                        let (lv, hv) = (ld[p * plane + k], hd[p * plane + k]);
                        let (gl, gh) = match mode {
                            FeatureMode::EnergyFraction => {
                                let (l2, a2) = (lv.norm_sqr(), hv.norm_sqr());
                                let den = l2 + a2 + eps;
                                let dfa = (l2 + eps) / (den * den);
                                let dfl = -a2 / (den * den);
                                (lv * (2.0 * dfl), hv * (2.0 * dfa))
                            }
                            FeatureMode::MagDiff => {
                                let d = hv.norm() - lv.norm();
                                let s = if d > 0.0 {
                                    1.0
                                } else if d < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                };
                                let unit = |z: Complex64| if z.norm() > 0.0 { z / z.norm() } else { zero };
                                (unit(lv) * -s, unit(hv) * s)
                            }
                        };
                        dl[p * plane + k] = gl * gk;
                        dh[p * plane + k] = gh * gk;
                    }
                }
                let shape = vec![b, c, h, wf];
                vec![
                    (low, complex_val(CTensor::new(shape.clone(), dl).expect("shape"))),
                    (high, complex_val(CTensor::new(shape, dh).expect("shape"))),
                ]
            })),
        ))
    }

    /// `[..., J] -> [..., H, W_fft]`, copying each band value to its bins.
    pub fn band_broadcast(&mut self, bands: Var, layout: Rc<BandLayout>) -> Result<Var> {
        let tb = self.real(bands)?;
        if tb.shape().last() != Some(&layout.bands) {
            return Err(DriftError::Shape("band broadcast: last axis must equal band count".into()));
        }
        let out = crate::spectral::broadcast_bands(tb, &layout);
        let in_shape = tb.shape().to_vec();
        Ok(self.push(
            Value::Real(out),
            OpKind::BandBroadcast,
            Some(Box::new(move |_, g| {
                let g = g.as_real().expect("real cotangent").data();
                let j = layout.bands;
                let plane = layout.h * layout.wf();
                let planes = g.len() / plane;
                let mut db = vec![0.0; planes * j];
                for p in 0..planes {
                    for k in 0..plane {
                        db[p * j + layout.band_of(k)] += g[p * plane + k];
                    }
                }
                vec![(bands, Value::Real(Tensor::new(in_shape.clone(), db).expect("shape")))]
            })),
        ))
    }

    /// `alpha * v + (1 - alpha) * xh`, bin-wise. Values of `alpha` are used as
    /// given; with amplitude checks on, bound violations are counted.
    pub fn fuse(&mut self, v: Var, xh: Var, alpha: Var) -> Result<Var> {
        let (tv, th, ta) = (self.complex(v)?, self.complex(xh)?, self.real(alpha)?);
        if tv.shape() != th.shape() || tv.shape() != ta.shape() {
            return Err(DriftError::Shape(format!(
                "fuse: {:?}, {:?}, gate {:?}",
                tv.shape(),
                th.shape(),
                ta.shape()
            )));
        }
        let data = tv
            .data()
            .iter()
            .zip(th.data())
            .zip(ta.data())
            .map(|((&a, &b), &al)| a * al + b * (1.0 - al))
            .collect();
        if self.amplitude_checks() {
            let bad = amplitude_violations(tv.data(), th.data(), ta.data());
            self.record_amplitude(bad, tv.len());
        }
        let out = CTensor::new(tv.shape().to_vec(), data)?;
        Ok(self.push(
            complex_val(out),
            OpKind::Fuse,
            Some(Box::new(move |vals, g| {
                let gc = g.as_complex().expect("complex cotangent");
                let (vd, hd, ad) = (vals.complex(v).data(), vals.complex(xh).data(), vals.real(alpha).data());
                let shape = gc.shape().to_vec();
                let mut dv = Vec::with_capacity(vd.len());
                let mut dh = Vec::with_capacity(vd.len());
                let mut da = Vec::with_capacity(vd.len());
                for k in 0..vd.len() {
                    let gk = gc.data()[k];
                    dv.push(gk * ad[k]);
                    dh.push(gk * (1.0 - ad[k]));
                    let diff = vd[k] - hd[k];
                    da.push(gk.re * diff.re + gk.im * diff.im);
                }
                vec![
                    (v, complex_val(CTensor::new(shape.clone(), dv).expect("shape"))),
                    (xh, complex_val(CTensor::new(shape.clone(), dh).expect("shape"))),
                    (alpha, Value::Real(Tensor::new(shape, da).expect("shape"))),
                ]
            })),
        ))
    }

    /// Bin-wise real scaling by constant factors of the same shape.
    pub fn scale_bins(&mut self, x: Var, factors: Tensor) -> Result<Var> {
        let tx = self.complex(x)?;
        if tx.shape() != factors.shape() {
            return Err(DriftError::Shape("scale_bins: factor shape mismatch".into()));
        }
        let data = tx.data().iter().zip(factors.data()).map(|(v, s)| v * *s).collect();
        let out = CTensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(
            complex_val(out),
            OpKind::ScaleBins,
            Some(Box::new(move |_, g| {
                let gc = g.as_complex().expect("complex cotangent");
                let d = gc.data().iter().zip(factors.data()).map(|(v, s)| v * *s).collect();
                vec![(x, complex_val(CTensor::new(gc.shape().to_vec(), d).expect("shape")))]
            })),
        ))
    }
}
