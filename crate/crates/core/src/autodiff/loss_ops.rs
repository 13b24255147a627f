use std::rc::Rc;

use super::{OpKind, Tape, Value, Var};
use crate::error::{DriftError, Result};
use crate::tensor::{CTensor, Tensor};

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tape {
    /// Batch mean of `||pred_b - target_b||_p / ||target_b||_p`, `p` in {1, 2}.
    /// The subgradient of `|.|` at 0 is taken as 0.
    pub fn rel_lp(&mut self, pred: Var, target: &Tensor, p: u32) -> Result<Var> {
        let tp = self.real(pred)?;
        if tp.shape() != target.shape() {
            return Err(DriftError::Shape(format!(
                "rel_lp: prediction {:?} vs target {:?}",
                tp.shape(),
                target.shape()
            )));
        }
        if p != 1 && p != 2 {
            return Err(DriftError::Config(format!("rel_lp supports p = 1 or 2, got {p}")));
        }
        let b = tp.shape().first().copied().unwrap_or(1).max(1);
        let n = tp.len() / b;
        let mut num = vec![0.0; b];
        let mut den = vec![0.0; b];
        for s in 0..b {
            for k in s * n..(s + 1) * n {
                let e = tp.data()[k] - target.data()[k];
                let t = target.data()[k];
                if p == 1 {
                    num[s] += e.abs();
                    den[s] += t.abs();
                } else {
                    num[s] += e * e;
                    den[s] += t * t;
                }
            }
            if p == 2 {
                num[s] = num[s].sqrt();
                den[s] = den[s].sqrt();
            }
            if den[s] == 0.0 {
                return Err(DriftError::Config(format!(
                    "rel_lp: target sample {s} has zero L{p} norm, relative error undefined"
                )));
            }
        }
        let value = num.iter().zip(&den).map(|(a, d)| a / d).sum::<f64>() / b as f64;
        let target = target.clone();
        Ok(self.push(
            Value::Real(Tensor::scalar(value)),
            OpKind::RelLp,
            Some(Box::new(move |vals, g| {
                let g0 = g.as_real().expect("real cotangent").data()[0];
                let pd = vals.real(pred);
                let mut dx = vec![0.0; pd.len()];
                for s in 0..b {
                    let scale = g0 / (b as f64 * den[s]);
                    for k in s * n..(s + 1) * n {
                        let e = pd.data()[k] - target.data()[k];
                        dx[k] = if p == 1 {
                            scale * sign(e)
                        } else if num[s] > 0.0 {
                            scale * e / num[s]
                        } else {
                            0.0
                        };
                    }
                }
                vec![(pred, Value::Real(Tensor::new(pd.shape().to_vec(), dx).expect("shape")))]
            })),
        ))
    }

    /// `scale * sum_planes sum_k w(k) |X(k)|^2` for half-plane weights `w`
    /// (multiplicities folded into `w` by the caller).
    pub fn weighted_spectral_energy(&mut self, x: Var, weights: Rc<Vec<f64>>, scale: f64) -> Result<Var> {
        let tx = self.complex(x)?;
        let [_, _, h, wf] = tx.dims4()?;
        let plane = h * wf;
        if weights.len() != plane {
            return Err(DriftError::Shape("spectral weights do not cover the half-plane".into()));
        }
        let value = scale
            * tx.data()
                .iter()
                .enumerate()
                .map(|(k, v)| weights[k % plane] * v.norm_sqr())
                .sum::<f64>();
        Ok(self.push(
            Value::Real(Tensor::scalar(value)),
            OpKind::WeightedSpectralEnergy,
            Some(Box::new(move |vals, g| {
                let g0 = g.as_real().expect("real cotangent").data()[0];
                let xc = vals.complex(x);
                let d = xc
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v * (2.0 * scale * g0 * weights[k % plane]))
                    .collect();
                vec![(x, Value::Complex(CTensor::new(xc.shape().to_vec(), d).expect("shape")))]
            })),
        ))
    }
}
