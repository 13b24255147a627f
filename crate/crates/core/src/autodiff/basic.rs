use super::{OpKind, Tape, Value, Var};
use crate::error::{DriftError, Result};
use crate::tensor::{CTensor, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(DriftError::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.real(a)?, self.real(b)?);
        same_shape(ta.shape(), tb.shape(), "add")?;
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(
            Value::Real(out),
            OpKind::Add,
            Some(Box::new(move |_, g| vec![(a, g.clone()), (b, g.clone())])),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.real(a)?, self.real(b)?);
        same_shape(ta.shape(), tb.shape(), "sub")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(
            Value::Real(out),
            OpKind::Sub,
            Some(Box::new(move |_, g| {
                let gt = g.as_real().expect("real cotangent");
                vec![(a, g.clone()), (b, Value::Real(gt.map(|v| -v)))]
            })),
        ))
    }

    /// `s * a` for a constant `s`.
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.real(a)?.map(|v| s * v);
        Ok(self.push(
            Value::Real(out),
            OpKind::Scale,
            Some(Box::new(move |_, g| {
                vec![(a, Value::Real(g.as_real().expect("real cotangent").map(|v| s * v)))]
            })),
        ))
    }

    /// Scalar `sum_k w_k x_k` against constant weights of the same shape.
    pub fn contract(&mut self, x: Var, w: Tensor) -> Result<Var> {
        let tx = self.real(x)?;
        same_shape(tx.shape(), w.shape(), "contract")?;
        let out = tx.dot(&w);
        Ok(self.push(
            Value::Real(Tensor::scalar(out)),
            OpKind::Contract,
            Some(Box::new(move |_, g| {
                let s = g.as_real().expect("real cotangent").data()[0];
                vec![(x, Value::Real(w.map(|v| s * v)))]
            })),
        ))
    }

    /// Scalar `Re sum_k conj(w_k) x_k` for a complex `x`.
    pub fn contract_complex(&mut self, x: Var, w: CTensor) -> Result<Var> {
        let tx = self.complex(x)?;
        same_shape(tx.shape(), w.shape(), "contract")?;
        let out = tx.real_dot(&w);
        Ok(self.push(
            Value::Real(Tensor::scalar(out)),
            OpKind::Contract,
            Some(Box::new(move |_, g| {
                let s = g.as_real().expect("real cotangent").data()[0];
                let d = w.data().iter().map(|v| v * s).collect();
                vec![(x, Value::Complex(CTensor::new(w.shape().to_vec(), d).expect("shape")))]
            })),
        ))
    }

    /// Complex difference `a - b`.
    pub fn csub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.complex(a)?, self.complex(b)?);
        same_shape(ta.shape(), tb.shape(), "csub")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = CTensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(
            Value::Complex(out),
            OpKind::CSub,
            Some(Box::new(move |_, g| {
                let gc = g.as_complex().expect("complex cotangent");
                let neg = CTensor::new(gc.shape().to_vec(), gc.data().iter().map(|v| -v).collect())
                    .expect("shape");
                vec![(a, g.clone()), (b, Value::Complex(neg))]
            })),
        ))
    }

    /// Affine map over the last axis: `y = x W^T + b`, `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let tx = self.real(x)?;
        let tw = self.real(w)?;
        let (n_out, n_in) = match tw.shape() {
            &[o, i] => (o, i),
            s => return Err(DriftError::Shape(format!("linear weight must be rank 2, got {s:?}"))),
        };
        let last = *tx.shape().last().ok_or_else(|| DriftError::Shape("linear on scalar".into()))?;
        if last != n_in {
            return Err(DriftError::Shape(format!("linear expects last dim {n_in}, got {last}")));
        }
        let bias = match b {
            Some(bv) => {
                let tb = self.real(bv)?;
                if tb.len() != n_out {
                    return Err(DriftError::Shape("linear bias length".into()));
                }
                Some(tb.data().to_vec())
            }
            None => None,
        };
        let rows = tx.len() / n_in;
        let mut out = vec![0.0; rows * n_out];
        for r in 0..rows {
            let xr = &tx.data()[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let wr = &tw.data()[o * n_in..(o + 1) * n_in];
                let mut acc = bias.as_ref().map_or(0.0, |bb| bb[o]);
                for (xv, wv) in xr.iter().zip(wr) {
                    acc += xv * wv;
                }
                out[r * n_out + o] = acc;
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n_out;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            Value::Real(out),
            OpKind::Linear,
            Some(Box::new(move |vals, g| {
                let g = g.as_real().expect("real cotangent").data();
                let xd = vals.real(x).data();
                let wd = vals.real(w).data();
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                let mut gb = vec![0.0; n_out];
                for r in 0..rows {
                    let xr = &xd[r * n_in..(r + 1) * n_in];
                    for o in 0..n_out {
                        let go = g[r * n_out + o];
                        if go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        for i in 0..n_in {
                            gx[r * n_in + i] += go * wd[o * n_in + i];
                            gw[o * n_in + i] += go * xr[i];
                        }
                    }
                }
                let mut res = vec![
                    (x, Value::Real(Tensor::new(vals.real(x).shape().to_vec(), gx).expect("shape"))),
                    (w, Value::Real(Tensor::new(vec![n_out, n_in], gw).expect("shape"))),
                ];
                if let Some(bv) = b {
                    res.push((bv, Value::Real(Tensor::new(vec![n_out], gb).expect("shape"))));
                }
                res
            })),
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.real(x)?.map(gelu);
        Ok(self.push(
            Value::Real(out),
            OpKind::Gelu,
            Some(Box::new(move |vals, g| {
                let xd = vals.real(x);
                let gd = g.as_real().expect("real cotangent");
                let data = xd.data().iter().zip(gd.data()).map(|(&xv, &gv)| gv * gelu_grad(xv)).collect();
                vec![(x, Value::Real(Tensor::new(xd.shape().to_vec(), data).expect("shape")))]
            })),
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.real(x)?.map(sigmoid);
        let y = out.clone();
        Ok(self.push(
            Value::Real(out),
            OpKind::Sigmoid,
            Some(Box::new(move |_, g| {
                let gd = g.as_real().expect("real cotangent");
                let data = y.data().iter().zip(gd.data()).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                vec![(x, Value::Real(Tensor::new(y.shape().to_vec(), data).expect("shape")))]
            })),
        ))
    }

    /// Per-channel scale of a `[B, C, H, W]` tensor by `s: [C]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let tx = self.real(x)?;
        let [b, c, h, w] = tx.dims4()?;
        let ts = self.real(s)?;
        if ts.len() != c {
            return Err(DriftError::Shape(format!("channel scale has {} entries for {c} channels", ts.len())));
        }
        let hw = h * w;
        let mut out = tx.data().to_vec();
        for (p, chunk) in out.chunks_mut(hw).enumerate() {
            let sc = ts.data()[p % c];
            chunk.iter_mut().for_each(|v| *v *= sc);
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(
            Value::Real(out),
            OpKind::ChannelScale,
            Some(Box::new(move |vals, g| {
                let g = g.as_real().expect("real cotangent").data();
                let xd = vals.real(x).data();
                let sd = vals.real(s).data();
                let mut gx = vec![0.0; xd.len()];
                let mut gs = vec![0.0; c];
                for p in 0..b * c {
                    let ch = p % c;
                    for k in p * hw..(p + 1) * hw {
                        gx[k] = g[k] * sd[ch];
                        gs[ch] += g[k] * xd[k];
                    }
                }
                vec![
                    (x, Value::Real(Tensor::new(vec![b, c, h, w], gx).expect("shape"))),
                    (s, Value::Real(Tensor::new(vec![c], gs).expect("shape"))),
                ]
            })),
        ))
    }
}
