use super::{OpKind, Tape, Value, Var};
use crate::error::{DriftError, Result};
use crate::image::{dwconv_kernel, pointwise_kernel, shuffle_index, unshuffle_index};
use crate::tensor::Tensor;

fn real(t: Tensor) -> Value {
    Value::Real(t)
}

impl Tape {
    /// Depthwise periodic `K x K` cross-correlation, kernel `[C, K, K]`.
    pub fn dwconv(&mut self, x: Var, k: Var) -> Result<Var> {
        let tx = self.real(x)?;
        let [b, c, h, w] = tx.dims4()?;
        let tk = self.real(k)?;
        let ks = match tk.shape() {
            &[kc, a, bb] if kc == c && a == bb && a % 2 == 1 => a,
            s => return Err(DriftError::Shape(format!("dwconv kernel must be [{c}, K, K] with odd K, got {s:?}"))),
        };
        let out = Tensor::new(vec![b, c, h, w], dwconv_kernel(tx.data(), tk.data(), [b, c, h, w], ks))?;
        Ok(self.push(
            real(out),
            OpKind::DwConv,
            Some(Box::new(move |vals, g| {
                let g = g.as_real().expect("real cotangent").data();
                let xd = vals.real(x).data();
                let kd = vals.real(k).data();
                let r = ks / 2;
                let mut dx = vec![0.0; xd.len()];
                let mut dk = vec![0.0; kd.len()];
                for p in 0..b * c {
                    let ch = p % c;
                    let base = p * h * w;
                    for a in 0..ks {
                        for bj in 0..ks {
                            let kv = kd[(ch * ks + a) * ks + bj];
                            let mut acc = 0.0;
                            for i in 0..h {
                                let si = (i + h + a - r) % h;
                                for j in 0..w {
                                    let sj = (j + w + bj - r) % w;
                                    let gv = g[base + i * w + j];
                                    dx[base + si * w + sj] += kv * gv;
                                    acc += gv * xd[base + si * w + sj];
                                }
                            }
                            dk[(ch * ks + a) * ks + bj] += acc;
                        }
                    }
                }
                vec![
                    (x, real(Tensor::new(vec![b, c, h, w], dx).expect("shape"))),
                    (k, real(Tensor::new(vec![c, ks, ks], dk).expect("shape"))),
                ]
            })),
        ))
    }

    /// Per-pixel affine channel map, weight `[C_out, C_in]`, optional bias `[C_out]`.
    pub fn pointwise(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let tx = self.real(x)?;
        let [b, ci, h, wd] = tx.dims4()?;
        let tw = self.real(w)?;
        let co = match tw.shape() {
            &[o, i] if i == ci => o,
            s => return Err(DriftError::Shape(format!("pointwise weight must be [C_out, {ci}], got {s:?}"))),
        };
        let bvals = match bias {
            Some(bv) => {
                let tb = self.real(bv)?;
                if tb.len() != co {
                    return Err(DriftError::Shape("pointwise bias length".into()));
                }
                Some(tb.data().to_vec())
            }
            None => None,
        };
        let data = pointwise_kernel(tx.data(), tw.data(), bvals.as_deref(), [b, ci, h, wd], co);
        let out = Tensor::new(vec![b, co, h, wd], data)?;
        Ok(self.push(
            real(out),
            OpKind::Pointwise,
            Some(Box::new(move |vals, g| {
                let g = g.as_real().expect("real cotangent").data();
                let xd = vals.real(x).data();
                let wv = vals.real(w).data();
                let hw = h * wd;
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; co];
                for ib in 0..b {
                    for o in 0..co {
                        let gp = &g[(ib * co + o) * hw..(ib * co + o + 1) * hw];
                        db[o] += gp.iter().sum::<f64>();
                        for i in 0..ci {
                            let xs = (ib * ci + i) * hw;
                            let wo = wv[o * ci + i];
                            let mut acc = 0.0;
                            for (p, &gv) in gp.iter().enumerate() {
                                acc += gv * xd[xs + p];
                                dx[xs + p] += wo * gv;
                            }
                            dw[o * ci + i] += acc;
                        }
                    }
                }
                let mut res = vec![
                    (x, real(Tensor::new(vec![b, ci, h, wd], dx).expect("shape"))),
                    (w, real(Tensor::new(vec![co, ci], dw).expect("shape"))),
                ];
                if let Some(bv) = bias {
                    res.push((bv, real(Tensor::new(vec![co], db).expect("shape"))));
                }
                res
            })),
        ))
    }

    /// Normalization over channels at each pixel, without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.real(x)?;
        let [b, c, h, w] = tx.dims4()?;
        let hw = h * w;
        let xd = tx.data();
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; b * hw];
        for ib in 0..b {
            for p in 0..hw {
                let at = |ch: usize| (ib * c + ch) * hw + p;
                let mean = (0..c).map(|ch| xd[at(ch)]).sum::<f64>() / c as f64;
                let var = (0..c).map(|ch| (xd[at(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[ib * hw + p] = is;
                for ch in 0..c {
                    out[at(ch)] = (xd[at(ch)] - mean) * is;
                }
            }
        }
        let y = Tensor::new(vec![b, c, h, w], out)?;
        let yc = y.clone();
        Ok(self.push(
            real(y),
            OpKind::LayerNorm,
            Some(Box::new(move |_, g| {
                let g = g.as_real().expect("real cotangent").data();
                let yd = yc.data();
                let mut dx = vec![0.0; yd.len()];
                for ib in 0..b {
                    for p in 0..hw {
                        let at = |ch: usize| (ib * c + ch) * hw + p;
                        let mg = (0..c).map(|ch| g[at(ch)]).sum::<f64>() / c as f64;
                        let mgy = (0..c).map(|ch| g[at(ch)] * yd[at(ch)]).sum::<f64>() / c as f64;
                        let is = inv_std[ib * hw + p];
                        for ch in 0..c {
                            dx[at(ch)] = is * (g[at(ch)] - mg - yd[at(ch)] * mgy);
                        }
                    }
                }
                vec![(x, real(Tensor::new(vec![b, c, h, w], dx).expect("shape")))]
            })),
        ))
    }

    /// Feature-wise modulation: `x * (gain + cond[:, :C]) + bias + cond[:, C:]`
    /// with `cond: [B, 2C]`, `gain, bias: [C]`.
    pub fn film(&mut self, x: Var, cond: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.real(x)?;
        let [b, c, h, w] = tx.dims4()?;
        let tc = self.real(cond)?;
        if tc.shape() != [b, 2 * c] {
            return Err(DriftError::Shape(format!("film conditioning must be [{b}, {}], got {:?}", 2 * c, tc.shape())));
        }
        let (tg, tb) = (self.real(gain)?, self.real(bias)?);
        if tg.len() != c || tb.len() != c {
            return Err(DriftError::Shape("film gain/bias must have one entry per channel".into()));
        }
        let hw = h * w;
        let mut out = tx.data().to_vec();
        for ib in 0..b {
            for ch in 0..c {
                let s = tg.data()[ch] + tc.data()[ib * 2 * c + ch];
                let t = tb.data()[ch] + tc.data()[ib * 2 * c + c + ch];
                out[(ib * c + ch) * hw..(ib * c + ch + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v = *v * s + t);
            }
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(
            real(out),
            OpKind::Film,
            Some(Box::new(move |vals, g| {
                let g = g.as_real().expect("real cotangent").data();
                let xd = vals.real(x).data();
                let cd = vals.real(cond).data();
                let gd = vals.real(gain).data();
                let mut dx = vec![0.0; xd.len()];
                let mut dc = vec![0.0; cd.len()];
                let mut dg = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for ib in 0..b {
                    for ch in 0..c {
                        let s = gd[ch] + cd[ib * 2 * c + ch];
                        let (mut ds, mut dt) = (0.0, 0.0);
                        for k in (ib * c + ch) * hw..(ib * c + ch + 1) * hw {
                            dx[k] = g[k] * s;
                            ds += g[k] * xd[k];
                            dt += g[k];
                        }
                        dc[ib * 2 * c + ch] += ds;
                        dc[ib * 2 * c + c + ch] += dt;
                        dg[ch] += ds;
                        dbias[ch] += dt;
                    }
                }
                vec![
                    (x, real(Tensor::new(vec![b, c, h, w], dx).expect("shape"))),
                    (cond, real(Tensor::new(vec![b, 2 * c], dc).expect("shape"))),
                    (gain, real(Tensor::new(vec![c], dg).expect("shape"))),
                    (bias, real(Tensor::new(vec![c], dbias).expect("shape"))),
                ]
            })),
        ))
    }

    /// `[B, C, H, W] -> [B, 4C, H/2, W/2]`.
    pub fn pixel_unshuffle(&mut self, x: Var) -> Result<Var> {
        let tx = self.real(x)?;
        let dims = tx.dims4()?;
        let [b, c, h, w] = dims;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(DriftError::Shape(format!("pixel unshuffle needs even sides, got {h}x{w}")));
        }
        let idx = unshuffle_index(dims);
        self.permute(x, idx, vec![b, 4 * c, h / 2, w / 2], OpKind::PixelUnshuffle)
    }

    /// `[B, 4C, H, W] -> [B, C, 2H, 2W]`.
    pub fn pixel_shuffle(&mut self, x: Var) -> Result<Var> {
        let tx = self.real(x)?;
        let dims = tx.dims4()?;
        let [b, c4, h, w] = dims;
        if c4 % 4 != 0 {
            return Err(DriftError::Shape(format!("pixel shuffle needs a multiple of 4 channels, got {c4}")));
        }
        let idx = shuffle_index(dims);
        self.permute(x, idx, vec![b, c4 / 4, 2 * h, 2 * w], OpKind::PixelShuffle)
    }

    /// `out[k] = x[src[k]]` for a permutation `src`.
    fn permute(&mut self, x: Var, src: Vec<usize>, shape: Vec<usize>, op: OpKind) -> Result<Var> {
        let xd = self.real(x)?;
        let in_shape = xd.shape().to_vec();
        let data = src.iter().map(|&s| xd.data()[s]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            real(out),
            op,
            Some(Box::new(move |_, g| {
                let g = g.as_real().expect("real cotangent").data();
                let mut dx = vec![0.0; g.len()];
                for (k, &s) in src.iter().enumerate() {
                    dx[s] = g[k];
                }
                vec![(x, real(Tensor::new(in_shape.clone(), dx).expect("shape")))]
            })),
        ))
    }
}
