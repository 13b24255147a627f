//! Dense f64 tensors used by the gradient engine.

use rustfft::num_complex::Complex64;

use crate::error::{DriftError, Result};
use crate::grid::Field;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(DriftError::Shape(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// `[B, C, H, W]` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok([b, c, h, w]),
            s => Err(DriftError::Shape(format!("expected rank-4 tensor, got {s:?}"))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl From<Field<f64>> for Tensor {
    fn from(f: Field<f64>) -> Self {
        let dims = f.dims();
        Self {
            shape: dims.to_vec(),
            data: f.into_data(),
        }
    }
}

impl From<&Field<f32>> for Tensor {
    fn from(f: &Field<f32>) -> Self {
        Self {
            shape: f.dims().to_vec(),
            data: f.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

impl TryFrom<Tensor> for Field<f64> {
    type Error = DriftError;

    fn try_from(t: Tensor) -> Result<Self> {
        let dims = t.dims4()?;
        Field::new(dims, t.data)
    }
}

/// Complex tensor, stored as `Complex64` values.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CTensor {
    shape: Vec<usize>,
    data: Vec<Complex64>,
}

impl CTensor {
    pub fn new(shape: Vec<usize>, data: Vec<Complex64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(DriftError::Shape(format!("complex shape {shape:?} vs {} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![Complex64::new(0.0, 0.0); shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok([b, c, h, w]),
            s => Err(DriftError::Shape(format!("expected rank-4 complex tensor, got {s:?}"))),
        }
    }

    pub fn add_assign(&mut self, other: &CTensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Real inner product treating re/im as independent coordinates.
    pub fn real_dot(&self, other: &CTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }
}
