//! Pseudo-spectral 2D incompressible Navier-Stokes in vorticity form on
//! `[0, 2 pi)^2`, with Kolmogorov forcing.
//!
//! `x` runs along columns and `y` along rows. Time stepping is RK4 with an
//! integrating factor for viscosity; the advection product is dealiased with
//! the 2/3 rule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{DriftError, Result};
use crate::grid::{half_width, multiplicity, signed_row_freq, Rfft2Plan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NsConfig {
    pub n: usize,
    pub viscosity: f64,
    pub forcing_k: usize,
    pub forcing_amp: f64,
    pub dt: f64,
    pub substeps: usize,
    /// Stored frames per trajectory.
    pub frames: usize,
    /// Frames simulated and discarded before storage starts.
    pub burn_in_frames: usize,
    /// Initial vorticity lives on `1 <= |k| <= ic_kmax`.
    pub ic_kmax: f64,
    /// RMS of the initial vorticity.
    pub ic_rms: f64,
    /// Store vorticity as a third channel.
    pub with_vorticity: bool,
    pub seed: u64,
}

impl Default for NsConfig {
    fn default() -> Self {
        Self::preset("turbulent").expect("known preset")
    }
}

impl NsConfig {
    /// `turbulent` (low viscosity) or `smooth` / `smoother` (higher viscosity).
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            n: 64,
            viscosity: 1e-3,
            forcing_k: 4,
            forcing_amp: 0.1,
            dt: 1e-3,
            substeps: 50,
            frames: 21,
            burn_in_frames: 20,
            ic_kmax: 4.0,
            ic_rms: 2.0,
            with_vorticity: false,
            seed: 0,
        };
        match name {
            "turbulent" => Ok(base),
            "smooth" | "smoother" => Ok(Self {
                viscosity: 1e-2,
                ..base
            }),
            other => Err(DriftError::Config(format!(
                "unknown preset {other:?} (expected turbulent or smooth)"
            ))),
        }
    }

    pub fn channels(&self) -> usize {
        if self.with_vorticity {
            3
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DriftError::Config(m));
        if self.n < 8 || !self.n.is_power_of_two() {
            return bad(format!("n must be a power of two >= 8, got {}", self.n));
        }
        if !(self.viscosity >= 0.0) || !self.viscosity.is_finite() {
            return bad(format!("viscosity must be finite and >= 0, got {}", self.viscosity));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.substeps == 0 {
            return bad("substeps must be positive".into());
        }
        if self.frames < 2 {
            return bad(format!("frames must be at least 2, got {}", self.frames));
        }
        if self.forcing_k >= self.n / 3 && self.forcing_amp != 0.0 {
            return bad(format!("forcing_k {} is outside the dealiased band for n = {}", self.forcing_k, self.n));
        }
        Ok(())
    }
}

/// Solver state and precomputed operators for one grid.
pub struct NsSolver {
    pub n: usize,
    pub viscosity: f64,
    pub dt: f64,
    plan: Rfft2Plan<f64>,
    kx: Vec<f64>,
    ky: Vec<f64>,
    k2: Vec<f64>,
    dealias: Vec<f64>,
    forcing: Vec<Complex64>,
    ef: Vec<f64>,
    ef_half: Vec<f64>,
}

impl NsSolver {
    pub fn new(n: usize, viscosity: f64, dt: f64, forcing_k: usize, forcing_amp: f64) -> Self {
        let wf = half_width(n);
        let cutoff = n as f64 / 3.0;
        let mut kx = Vec::with_capacity(n * wf);
        let mut ky = Vec::with_capacity(n * wf);
        let mut dealias = Vec::with_capacity(n * wf);
        for i in 0..n {
            let fy = signed_row_freq(i, n) as f64;
            for j in 0..wf {
                let fx = j as f64;
                kx.push(fx);
                ky.push(fy);
                dealias.push(if fx.abs() < cutoff && fy.abs() < cutoff { 1.0 } else { 0.0 });
            }
        }
        let k2: Vec<f64> = kx.iter().zip(&ky).map(|(a, b)| a * a + b * b).collect();
        let mut forcing = vec![Complex64::new(0.0, 0.0); n * wf];
        if forcing_amp != 0.0 && forcing_k > 0 {
            // -a k cos(k y) = -a k (e^{iky} + e^{-iky}) / 2
            let v = Complex64::new(-forcing_amp * forcing_k as f64 * 0.5, 0.0);
            forcing[forcing_k * wf] += v;
            forcing[(n - forcing_k) * wf] += v;
        }
        let ef = k2.iter().map(|k| (-viscosity * k * dt).exp()).collect();
        let ef_half = k2.iter().map(|k| (-viscosity * k * dt * 0.5).exp()).collect();
        Self {
            n,
            viscosity,
            dt,
            plan: Rfft2Plan::new(n, n),
            kx,
            ky,
            k2,
            dealias,
            forcing,
            ef,
            ef_half,
        }
    }

    pub fn from_config(cfg: &NsConfig) -> Self {
        Self::new(cfg.n, cfg.viscosity, cfg.dt, cfg.forcing_k, cfg.forcing_amp)
    }

    pub fn forward(&self, field: &[f64]) -> Vec<Complex64> {
        self.plan.forward(field, 1)
    }

    pub fn inverse(&self, spec: &[Complex64]) -> Vec<f64> {
        self.plan.inverse(spec, 1)
    }

    /// Streamfunction-derived velocity `(u_x, u_y)` spectra.
    pub fn velocity_hat(&self, w_hat: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let i = Complex64::new(0.0, 1.0);
        let mut ux = Vec::with_capacity(w_hat.len());
        let mut uy = Vec::with_capacity(w_hat.len());
        for k in 0..w_hat.len() {
            let psi = if self.k2[k] > 0.0 { w_hat[k] / self.k2[k] } else { Complex64::new(0.0, 0.0) };
            ux.push(i * self.ky[k] * psi);
            uy.push(-i * self.kx[k] * psi);
        }
        (ux, uy)
    }

    /// Physical-space velocity `(u_x, u_y)`.
    pub fn velocity(&self, w_hat: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
        let (ux, uy) = self.velocity_hat(w_hat);
        (self.inverse(&ux), self.inverse(&uy))
    }

    /// `-(u . grad w)` dealiased, plus forcing.
    fn rhs(&self, w_hat: &[Complex64]) -> Vec<Complex64> {
        let i = Complex64::new(0.0, 1.0);
        let (ux, uy) = self.velocity(w_hat);
        let wx: Vec<Complex64> = w_hat.iter().zip(&self.kx).map(|(w, k)| i * k * w).collect();
        let wy: Vec<Complex64> = w_hat.iter().zip(&self.ky).map(|(w, k)| i * k * w).collect();
        let (wx, wy) = (self.inverse(&wx), self.inverse(&wy));
        let adv: Vec<f64> = (0..ux.len()).map(|k| ux[k] * wx[k] + uy[k] * wy[k]).collect();
        let adv_hat = self.forward(&adv);
        adv_hat
            .iter()
            .enumerate()
            .map(|(k, a)| -a * self.dealias[k] + self.forcing[k])
            .collect()
    }

    /// One integrating-factor RK4 step.
    pub fn step(&self, w: &[Complex64]) -> Result<Vec<Complex64>> {
        let dt = self.dt;
        let n = w.len();
        let k1 = self.rhs(w);
        let a: Vec<Complex64> = (0..n).map(|k| self.ef_half[k] * (w[k] + k1[k] * (0.5 * dt))).collect();
        let k2 = self.rhs(&a);
        let b: Vec<Complex64> = (0..n).map(|k| self.ef_half[k] * w[k] + k2[k] * (0.5 * dt)).collect();
        let k3 = self.rhs(&b);
        let c: Vec<Complex64> = (0..n).map(|k| self.ef[k] * w[k] + self.ef_half[k] * k3[k] * dt).collect();
        let k4 = self.rhs(&c);
        let out: Vec<Complex64> = (0..n)
            .map(|k| {
                self.ef[k] * w[k]
                    + (self.ef[k] * k1[k] + self.ef_half[k] * (k2[k] + k3[k]) * 2.0 + k4[k]) * (dt / 6.0)
            })
            .collect();
        if out.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            let max_in = w.iter().map(|v| v.norm()).fold(0.0, f64::max);
            return Err(DriftError::Diverged(format!(
                "non-finite vorticity after one step (dt = {dt}, max |w_hat| before = {max_in:.3e}); reduce dt"
            )));
        }
        Ok(out)
    }

    /// Advances `steps` steps.
    pub fn advance(&self, w: &[Complex64], steps: usize) -> Result<Vec<Complex64>> {
        let mut cur = w.to_vec();
        for _ in 0..steps {
            cur = self.step(&cur)?;
        }
        Ok(cur)
    }

    /// Kinetic energy `(1/2) mean |u|^2`.
    pub fn energy(&self, w_hat: &[Complex64]) -> f64 {
        let wf = half_width(self.n);
        0.5 * w_hat
            .iter()
            .enumerate()
            .filter(|(k, _)| self.k2[*k] > 0.0)
            .map(|(k, v)| multiplicity(k % wf, self.n) * v.norm_sqr() / self.k2[k])
            .sum::<f64>()
    }

    /// Enstrophy `(1/2) mean w^2`.
    pub fn enstrophy(&self, w_hat: &[Complex64]) -> f64 {
        let wf = half_width(self.n);
        0.5 * w_hat
            .iter()
            .enumerate()
            .map(|(k, v)| multiplicity(k % wf, self.n) * v.norm_sqr())
            .sum::<f64>()
    }

    /// Largest stable `dt` estimate from an advective CFL number of 0.5.
    pub fn cfl_dt(&self, w_hat: &[Complex64]) -> f64 {
        let (ux, uy) = self.velocity(w_hat);
        let umax = ux.iter().chain(&uy).map(|v| v.abs()).fold(0.0, f64::max);
        let dx = 2.0 * std::f64::consts::PI / self.n as f64;
        if umax == 0.0 {
            f64::INFINITY
        } else {
            0.5 * dx / umax
        }
    }

    /// Random vorticity on the band `1 <= |k| <= kmax`, scaled to RMS `rms`.
    pub fn random_initial(&self, rng: &mut ChaCha8Rng, kmax: f64, rms: f64) -> Vec<Complex64> {
        let mut spec: Vec<Complex64> = (0..self.k2.len())
            .map(|k| {
                let kk = self.k2[k].sqrt();
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                if kk >= 1.0 && kk <= kmax {
                    Complex64::new(re, im)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        // Round trip through physical space enforces the Hermitian constraint.
        let field = self.inverse(&spec);
        spec = self.forward(&field);
        let ms = 2.0 * self.enstrophy(&spec);
        let s = if ms > 0.0 { rms / ms.sqrt() } else { 0.0 };
        spec.iter().map(|v| v * s).collect()
    }
}

/// Seeded generator for trajectory `index` of a dataset.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Simulates one trajectory: burn-in, then `frames` stored frames of
/// `(u_x, u_y[, w])`, each `[C, N, N]` in f32, concatenated.
pub fn simulate_trajectory(cfg: &NsConfig, index: u64) -> Result<Vec<f32>> {
    let solver = NsSolver::from_config(cfg);
    let mut rng = trajectory_rng(cfg.seed, index);
    let mut w = solver.random_initial(&mut rng, cfg.ic_kmax, cfg.ic_rms);
    w = solver.advance(&w, cfg.burn_in_frames * cfg.substeps)?;
    let cfl = solver.cfl_dt(&w);
    if cfg.dt > cfl {
        log::warn!("trajectory {index}: dt {} exceeds the advective CFL estimate {cfl:.3e}", cfg.dt);
    }
    let nn = cfg.n * cfg.n;
    let mut out = Vec::with_capacity(cfg.frames * cfg.channels() * nn);
    for f in 0..cfg.frames {
        if f > 0 {
            w = solver.advance(&w, cfg.substeps)?;
        }
        let (ux, uy) = solver.velocity(&w);
        out.extend(ux.iter().map(|&v| v as f32));
        out.extend(uy.iter().map(|&v| v as f32));
        if cfg.with_vorticity {
            out.extend(solver.inverse(&w).iter().map(|&v| v as f32));
        }
    }
    Ok(out)
}
