use rustfft::num_complex::Complex64;

use super::{OpKind, Tape, Value, Var};
use crate::error::{DriftError, Result};
use crate::grid::{half_width, irfft2_planes, multiplicity, rfft2_planes};
use crate::tensor::{CTensor, Tensor};

impl Tape {
    /// Forward-normalized rFFT2 of a `[B, C, H, W]` tensor.
    ///
    /// Adjoint: `dx = irfft2(g / m) / (H W)`, with `m` the Hermitian
    /// multiplicity of each half-plane column.
    pub fn rfft2(&mut self, x: Var) -> Result<Var> {
        let tx = self.real(x)?;
        let [b, c, h, w] = tx.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(DriftError::Shape(format!("rfft2 needs even sides, got {h}x{w}")));
        }
        let wf = half_width(w);
        let data = rfft2_planes(tx.data(), b * c, h, w);
        let out = CTensor::new(vec![b, c, h, wf], data)?;
        Ok(self.push(
            Value::Complex(out),
            OpKind::Rfft2,
            Some(Box::new(move |_, g| {
                let g = g.as_complex().expect("complex cotangent");
                let scale = 1.0 / (h * w) as f64;
                let scaled: Vec<Complex64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v * (scale / multiplicity(k % wf, w)))
                    .collect();
                let dx = irfft2_planes(&scaled, b * c, h, w);
                vec![(x, Value::Real(Tensor::new(vec![b, c, h, w], dx).expect("shape")))]
            })),
        ))
    }

    /// Inverse of [`Tape::rfft2`] back to an `H x W` grid (`W` is the origin width).
    ///
    /// Adjoint: `dX = m * (H W) * rfft2(g)`.
    pub fn irfft2(&mut self, spec: Var, w: usize) -> Result<Var> {
        let ts = self.complex(spec)?;
        let [b, c, h, wf] = ts.dims4()?;
        if wf != half_width(w) || h % 2 != 0 || w % 2 != 0 {
            return Err(DriftError::Shape(format!(
                "irfft2: spectrum width {wf} does not match origin width {w}"
            )));
        }
        let data = irfft2_planes(ts.data(), b * c, h, w);
        let out = Tensor::new(vec![b, c, h, w], data)?;
        Ok(self.push(
            Value::Real(out),
            OpKind::Irfft2,
            Some(Box::new(move |_, g| {
                let g = g.as_real().expect("real cotangent");
                let hw = (h * w) as f64;
                let mut gs = rfft2_planes(g.data(), b * c, h, w);
                for (k, v) in gs.iter_mut().enumerate() {
                    *v *= hw * multiplicity(k % wf, w);
                }
                vec![(spec, Value::Complex(CTensor::new(vec![b, c, h, wf], gs).expect("shape")))]
            })),
        ))
    }
}
