//! Browser bindings: low/high spectral split of a field, gated fusion of
//! random bins, and stepping a Kolmogorov flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use wasm_bindgen::prelude::*;

use driftnet::datagen::NsSolver;
use driftnet::grid::{spectral_energy, Field, RowIndexing};
use driftnet::spectral::{amplitude_violations, field_split, to_field, LowMask};

/// Mask logit giving `kappa = sigmoid(theta) / 2`.
fn theta_for(kappa: f64) -> f64 {
    let p = (2.0 * kappa).clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

fn sample_vorticity(n: usize, seed: u64) -> Vec<f64> {
    let s = NsSolver::new(n, 0.0, 1e-3, 0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    s.inverse(&s.random_initial(&mut rng, n as f64 / 4.0, 1.0))
}

#[wasm_bindgen]
pub struct SplitView {
    field: Vec<f64>,
    low: Vec<f64>,
    high: Vec<f64>,
    pub sigma_lf: f64,
    pub rows_kept: usize,
    pub cols_kept: usize,
    pub energy_low: f64,
    pub energy_high: f64,
}

#[wasm_bindgen]
impl SplitView {
    pub fn field(&self) -> Vec<f64> {
        self.field.clone()
    }

    pub fn low(&self) -> Vec<f64> {
        self.low.clone()
    }

    pub fn high(&self) -> Vec<f64> {
        self.high.clone()
    }
}

/// Splits a random multi-scale `n x n` field into its low rectangle and the rest.
#[wasm_bindgen]
pub fn spectral_split(n: usize, seed: u64, kappa_row: f64, kappa_col: f64) -> Result<SplitView, JsError> {
    let n = n.clamp(8, 256) & !1;
    let field = sample_vorticity(n, seed);
    let x = Field::new([1, 1, n, n], field.clone()).map_err(|e| JsError::new(&e.to_string()))?;
    let mask = LowMask::new(theta_for(kappa_row), theta_for(kappa_col));
    let (lo, hi) = field_split(&x, &mask, RowIndexing::Symmetric).map_err(|e| JsError::new(&e.to_string()))?;
    let (rows_kept, cols_kept) = mask.extents(n, n / 2 + 1);
    Ok(SplitView {
        energy_low: spectral_energy(&lo),
        energy_high: spectral_energy(&hi),
        low: to_field(&lo).map_err(|e| JsError::new(&e.to_string()))?.into_data(),
        high: to_field(&hi).map_err(|e| JsError::new(&e.to_string()))?.into_data(),
        field,
        sigma_lf: mask.sigma_lf(),
        rows_kept,
        cols_kept,
    })
}

/// Fuses `bins` random complex pairs with gate `alpha` (not clamped) and
/// returns `|a V + (1-a) X| / max(|V|, |X|)` per bin, followed by the
/// violation count as the last element.
#[wasm_bindgen]
pub fn fusion_ratios(alpha: f64, bins: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || Complex64::from_polar(10f64.powf(rng.random_range(-2.0..2.0)), rng.random_range(0.0..std::f64::consts::TAU));
    let v: Vec<Complex64> = (0..bins).map(|_| draw()).collect();
    let x: Vec<Complex64> = (0..bins).map(|_| draw()).collect();
    let a = vec![alpha; bins];
    let mut out: Vec<f64> = v
        .iter()
        .zip(&x)
        .map(|(p, q)| (p * alpha + q * (1.0 - alpha)).norm() / p.norm().max(q.norm()))
        .collect();
    out.push(amplitude_violations(&v, &x, &a) as f64);
    out
}

/// Forced 2D Navier-Stokes flow in vorticity form on the unit torus.
#[wasm_bindgen]
pub struct Flow {
    solver: NsSolver,
    w_hat: Vec<Complex64>,
    steps: usize,
}

#[wasm_bindgen]
impl Flow {
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, viscosity: f64, seed: u64) -> Flow {
        let n = n.clamp(16, 128).next_power_of_two();
        let solver = NsSolver::new(n, viscosity.max(0.0), 1e-3, 4, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_hat = solver.random_initial(&mut rng, 4.0, 2.0);
        Flow { solver, w_hat, steps: 0 }
    }

    /// Advances `k` solver steps; returns false (and keeps the old state) on blow-up.
    pub fn step(&mut self, k: usize) -> bool {
        match self.solver.advance(&self.w_hat, k) {
            Ok(w) => {
                self.w_hat = w;
                self.steps += k;
                true
            }
            Err(_) => false,
        }
    }

    pub fn size(&self) -> usize {
        self.solver.n
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.solver.dt
    }

    pub fn vorticity(&self) -> Vec<f64> {
        self.solver.inverse(&self.w_hat)
    }

    pub fn energy(&self) -> f64 {
        self.solver.energy(&self.w_hat)
    }

    pub fn enstrophy(&self) -> f64 {
        self.solver.enstrophy(&self.w_hat)
    }
}
