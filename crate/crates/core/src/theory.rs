//! Empirical stability diagnostics: per-block Lipschitz bounds against
//! power-iteration measurements, cumulative products, the discrete Grönwall
//! envelope, the Sobolev one-step defect bound, the bin-wise fusion amplitude
//! check and the block complexity benchmark.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use serde::Serialize;

use crate::autodiff::{Tape, Value, Var};
use crate::error::{DriftError, Result};
use crate::grid::Field;
use crate::image::{dwconv_spectral_norm, DepthwiseKernel, PointwiseLinear};
use crate::linalg::{norm, power_iteration_norm, NormEstimate};
use crate::losses::{sobolev_loss, SobolevWeight};
use crate::model::{DriftIds, DriftNet, ForwardOptions, ModelConfig, Variant};
use crate::spectral::{spectral_path_on_tape, ComplexMixer, GateMode, Mode, SpectralRun};
use crate::tensor::{CTensor, Tensor};
use crate::train::{par_map, Trajectories};

/// Relative deviation from linearity `|A(ax + by) - aAx - bAy| / (|a||Ax| + |b||Ay|)`
/// at random inputs.
pub fn linearity_defect(mut matvec: impl FnMut(&[f64]) -> Vec<f64>, dim: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(rng)).collect() };
    let (x, y) = (vec(&mut rng), vec(&mut rng));
    let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
    let (ax, ay, az) = (matvec(&x), matvec(&y), matvec(&z));
    let diff: Vec<f64> = az
        .iter()
        .zip(ax.iter().zip(&ay))
        .map(|(s, (p, q))| s - a * p - b * q)
        .collect();
    let scale = a.abs() * norm(&ax) + b.abs() * norm(&ay);
    if scale == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Ingredients of the per-block bound `sqrt(sigma_lf) rho_w + k_conv + k_lin`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundComponents {
    /// Area fraction of the low rectangle.
    pub sigma_lf: f64,
    /// Spectral norm of the complex channel mixer.
    pub rho_w: f64,
    /// Operator norm of the depthwise convolution.
    pub k_conv: f64,
    /// Operator norm of the pointwise linear map.
    pub k_lin: f64,
}

impl BoundComponents {
    pub fn bound(&self) -> f64 {
        self.sigma_lf.sqrt() * self.rho_w + self.k_conv + self.k_lin
    }
}

/// Measurement settings for block Lipschitz reports.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzOptions {
    /// Random linearization points for the gate-detached core.
    pub points: usize,
    /// Points for the gate-attached core and the full block (finite-difference JVPs).
    pub nonlinear_points: usize,
    pub iters: usize,
    pub tol: f64,
    pub seed: u64,
    /// Slack allowed above the bound.
    pub slack: f64,
}

impl Default for LipschitzOptions {
    fn default() -> Self {
        Self {
            points: 100,
            nonlinear_points: 3,
            iters: 200,
            tol: 1e-9,
            seed: 0,
            slack: 1e-3,
        }
    }
}

/// One block of a Lipschitz report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockLipschitz {
    pub name: String,
    pub level: usize,
    pub grid: (usize, usize),
    pub channels: usize,
    pub components: BoundComponents,
    pub bound: f64,
    /// Largest gain of the gate-detached core over all points.
    pub measured_core: f64,
    /// Whether every core power iteration converged.
    pub converged: bool,
    /// Largest gain of the core with the gate's input dependence kept.
    pub measured_gate_attached: f64,
    /// `measured_gate_attached - measured_core`; not part of the bound.
    pub gate_term: f64,
    /// Largest gain of the whole block (norm, layer scale and residual included).
    pub measured_full: f64,
    pub margin: f64,
    pub violation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CumulativeBound {
    pub per_block_bound: Vec<f64>,
    /// `prod (1 + bound)`.
    pub bound_product: f64,
    /// `prod (1 + measured core gain)`.
    pub measured_product: f64,
    pub a_attn: f64,
    pub a_mlp: f64,
    /// `(1 + a_attn + a_mlp)^L` for the same depth.
    pub reference_product: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LipschitzReport {
    pub blocks: Vec<BlockLipschitz>,
    pub cumulative: CumulativeBound,
}

impl LipschitzReport {
    pub fn violations(&self) -> Vec<&BlockLipschitz> {
        self.blocks.iter().filter(|b| b.violation).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "block,level,channels,sigma_lf,rho_w,k_conv,k_lin,bound,measured_core,gate_term,measured_full,margin,violation\n",
        );
        for b in &self.blocks {
            let c = &b.components;
            s += &format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                b.name,
                b.level,
                b.channels,
                c.sigma_lf,
                c.rho_w,
                c.k_conv,
                c.k_lin,
                b.bound,
                b.measured_core,
                b.gate_term,
                b.measured_full,
                b.margin,
                b.violation
            );
        }
        s
    }
}

/// `prod_l (1 + b_l)`; 1 for an empty list.
pub fn cumulative_bound(bounds: &[f64]) -> f64 {
    bounds.iter().map(|b| 1.0 + b).product()
}

/// Bound components of a block read from its parameters.
pub fn block_components(model: &DriftNet, ids: &DriftIds, level: usize) -> Result<BoundComponents> {
    let (h, w) = (model.grid.0 >> level, model.grid.1 >> level);
    let p = &model.params;
    let rho_w = if model.config.variant == Variant::NoLfm {
        0.0
    } else {
        ComplexMixer::from_tensor(p.get(ids.mixer).clone())?.spectral_norm().value
    };
    let k_conv = dwconv_spectral_norm(&DepthwiseKernel::new(p.get(ids.dw).clone())?, h, w)?
        .into_iter()
        .fold(0.0, f64::max);
    let k_lin = PointwiseLinear::new(p.get(ids.pw_w).clone(), p.get(ids.pw_b).clone())?
        .spectral_norm()
        .value;
    Ok(BoundComponents {
        sigma_lf: model.mask_of(ids).sigma_lf(),
        rho_w,
        k_conv,
        k_lin,
    })
}

/// Records the residual-free core `S + C + L` of a block: gated low-band
/// mixer, depthwise conv and bias-free pointwise map. With `alpha` given the
/// gate is that constant; otherwise it is computed from `x` and kept on the tape.
pub fn core_on_tape(model: &DriftNet, ids: &DriftIds, tape: &mut Tape, x: Var, alpha: Option<&Tensor>) -> Result<(Var, Tensor)> {
    let p = &model.params;
    let dw = tape.param(p, ids.dw);
    let conv = tape.dwconv(x, dw)?;
    let pw = tape.param(p, ids.pw_w);
    let lin = tape.pointwise(x, pw, None)?;
    let local = tape.add(conv, lin)?;
    if model.config.variant == Variant::NoLfm {
        return Ok((local, Tensor::zeros(&[0])));
    }
    let [_, _, _, w] = tape.real(x)?.dims4()?;
    let sv = DriftNet::spectral_vars(tape, p, ids);
    let run = SpectralRun {
        gate_mode: if model.config.variant == Variant::NoRg {
            GateMode::HardIndicator
        } else {
            GateMode::Learned
        },
        detach_gate: alpha.is_some(),
        taper_beta: None,
        mode: Mode::Eval,
    };
    let tr = spectral_path_on_tape(tape, x, sv, &model.config.spectral(), &run)?;
    let a = match alpha {
        Some(t) => tape.constant(t.clone()),
        None => tr.alpha,
    };
    let a_val = tape.real(a)?.clone();
    let zero = tape.constant_complex(CTensor::zeros(tape.complex(tr.v_low)?.shape()));
    let fused = tape.fuse(tr.v_low, zero, a)?;
    let s = tape.irfft2(fused, w)?;
    Ok((tape.add(s, local)?, a_val))
}

fn random_field(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Vec<f64> {
    (0..dims.iter().product::<usize>()).map(|_| StandardNormal.sample(rng)).collect()
}

fn eval_map(dims: [usize; 4], x: &[f64], f: &dyn Fn(&mut Tape, Var) -> Result<Var>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = tape.input(Tensor::new(dims.to_vec(), x.to_vec())?);
    let out = f(&mut tape, v)?;
    Ok(tape.real(out)?.data().to_vec())
}

fn vjp(dims: [usize; 4], x: &[f64], g: &[f64], f: &dyn Fn(&mut Tape, Var) -> Result<Var>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = tape.input(Tensor::new(dims.to_vec(), x.to_vec())?);
    let out = f(&mut tape, v)?;
    let shape = tape.real(out)?.shape().to_vec();
    let grads = tape.backward_with_seed(out, Value::Real(Tensor::new(shape, g.to_vec())?))?;
    Ok(grads.real(&tape, v).into_data())
}

/// Jacobian norm of a (possibly nonlinear) map at `x0`: central-difference
/// JVPs paired with exact VJPs.
fn jacobian_norm(
    dims: [usize; 4],
    x0: &[f64],
    f: &dyn Fn(&mut Tape, Var) -> Result<Var>,
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<NormEstimate> {
    let h = 1e-5;
    let mut err = None;
    let est = power_iteration_norm(
        |v| {
            let xp: Vec<f64> = x0.iter().zip(v).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x0.iter().zip(v).map(|(a, b)| a - h * b).collect();
            match (eval_map(dims, &xp, f), eval_map(dims, &xm, f)) {
                (Ok(p), Ok(m)) => p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect(),
                (Err(e), _) | (_, Err(e)) => {
                    err = Some(e);
                    vec![0.0; v.len()]
                }
            }
        },
        |g| vjp(dims, x0, g, f).unwrap_or_else(|_| vec![0.0; x0.len()]),
        x0.len(),
        iters,
        tol,
        seed,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(est),
    }
}

/// Lipschitz report row for one block of `model`.
pub fn block_lipschitz(
    model: &DriftNet,
    name: &str,
    ids: &DriftIds,
    level: usize,
    opts: &LipschitzOptions,
) -> Result<BlockLipschitz> {
    let comps = block_components(model, ids, level)?;
    let c = model.config.level_width(level);
    let (h, w) = (model.grid.0 >> level, model.grid.1 >> level);
    let dims = [1, c, h, w];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (level as u64) << 32);
    let mut measured_core: f64 = 0.0;
    let mut converged = true;
    let mut points = Vec::new();
    for k in 0..opts.points.max(1) {
        let x0 = random_field(&mut rng, dims);
        let alpha = {
            let mut tape = Tape::new();
            let v = tape.input(Tensor::new(dims.to_vec(), x0.clone())?);
            core_on_tape(model, ids, &mut tape, v, None)?.1
        };
        let lin = |tape: &mut Tape, v: Var| -> Result<Var> {
            let a = (!alpha.is_empty()).then_some(&alpha);
            Ok(core_on_tape(model, ids, tape, v, a)?.0)
        };
        let zero = vec![0.0; x0.len()];
        let mut failure = None;
        let est = power_iteration_norm(
            |v| {
                eval_map(dims, v, &lin).unwrap_or_else(|e| {
                    failure = Some(e);
                    vec![0.0; v.len()]
                })
            },
            |g| vjp(dims, &zero, g, &lin).unwrap_or_else(|_| vec![0.0; zero.len()]),
            x0.len(),
            opts.iters,
            opts.tol,
            opts.seed.wrapping_add(k as u64),
        );
        if let Some(e) = failure {
            return Err(e);
        }
        converged &= est.converged;
        measured_core = measured_core.max(est.value);
        if k < opts.nonlinear_points {
            points.push(x0);
        }
    }
    let t_val = 0.5;
    let attached = |tape: &mut Tape, v: Var| -> Result<Var> { Ok(core_on_tape(model, ids, tape, v, None)?.0) };
    let full = |tape: &mut Tape, v: Var| -> Result<Var> {
        let t = DriftNet::time_input(tape, &[t_val])?;
        let opts = ForwardOptions {
            mode: Mode::Eval,
            detach_gate: false,
            taper: false,
        };
        model.drift_block_on_tape(&model.params, tape, ids, v, t, &opts)
    };
    let (mut m_att, mut m_full): (f64, f64) = (0.0, 0.0);
    for (k, x0) in points.iter().enumerate() {
        let s = opts.seed.wrapping_add(1000 + k as u64);
        m_att = m_att.max(jacobian_norm(dims, x0, &attached, opts.iters, 1e-6, s)?.value);
        m_full = m_full.max(jacobian_norm(dims, x0, &full, opts.iters, 1e-6, s)?.value);
    }
    let bound = comps.bound();
    Ok(BlockLipschitz {
        name: name.to_string(),
        level,
        grid: (h, w),
        channels: c,
        components: comps,
        bound,
        measured_core,
        converged,
        measured_gate_attached: m_att,
        gate_term: m_att - measured_core,
        measured_full: m_full,
        margin: bound - measured_core,
        violation: measured_core > bound + opts.slack,
    })
}

/// Lipschitz report over every DRIFT block of `model`, blocks in parallel.
pub fn lipschitz_report(model: &DriftNet, opts: &LipschitzOptions, a_attn: f64, a_mlp: f64) -> Result<LipschitzReport> {
    let blocks = model.drift_blocks();
    let names: Vec<(usize, String, DriftIds)> = blocks
        .iter()
        .enumerate()
        .map(|(i, (lev, ids))| (*lev, format!("enc{lev}.drift{}", i % model.config.blocks_per_level), *ids))
        .collect();
    let rows = par_map(&names, |(lev, name, ids)| block_lipschitz(model, name, ids, *lev, opts))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let per: Vec<f64> = rows.iter().map(|r| r.bound).collect();
    let measured: Vec<f64> = rows.iter().map(|r| r.measured_core).collect();
    let cumulative = CumulativeBound {
        bound_product: cumulative_bound(&per),
        measured_product: cumulative_bound(&measured),
        reference_product: (1.0 + a_attn + a_mlp).powi(per.len() as i32),
        per_block_bound: per,
        a_attn,
        a_mlp,
    };
    Ok(LipschitzReport { blocks: rows, cumulative })
}

/// `e_m <= K^m e0 + (sum_{i<m} K^i) eta` for `m = 0..=steps`. The geometric
/// sum is accumulated term by term, so `K = 1` gives `e0 + m eta` exactly.
pub fn gronwall_envelope(k_bar: f64, eta_bar: f64, e0: f64, steps: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut pow = 1.0;
    let mut geo = 0.0;
    for _ in 0..=steps {
        out.push(pow * e0 + geo * eta_bar);
        geo += pow;
        pow *= k_bar;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GronwallEnvelope {
    /// Largest measured one-step gain `|F(a) - F(b)| / |a - b|` along rollouts.
    pub k_bar: f64,
    /// Largest measured one-step defect `|F(u_m) - u_{m+1}|`.
    pub eta_bar: f64,
    /// `envelope[m]`, `m = 0..=T`.
    pub envelope: Vec<f64>,
    /// Largest closed-loop error over trajectories at each step.
    pub measured: Vec<f64>,
    /// Steps where the measured error exceeds the envelope.
    pub violations: Vec<usize>,
}

fn rms_diff(a: &Field<f64>, b: &Field<f64>) -> f64 {
    let n = a.data().len() as f64;
    (a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt()
}

/// Measures gain and defect suprema along closed-loop rollouts of `trajs`
/// (RMS norm on normalized fields) and compares the errors with the envelope.
pub fn gronwall_from_rollouts(
    model: &DriftNet,
    data: &dyn Trajectories,
    trajs: &[usize],
    steps: usize,
) -> Result<GronwallEnvelope> {
    if steps == 0 || steps >= data.frames() {
        return Err(DriftError::Config(format!("steps must lie in 1..{}", data.frames())));
    }
    let opts = ForwardOptions::eval();
    let per = par_map(trajs, |&tr| -> Result<(f64, f64, Vec<f64>)> {
        let mut pred = data.frame(tr, 0)?;
        let (mut k_bar, mut eta_bar): (f64, f64) = (0.0, 0.0);
        let mut errs = vec![0.0];
        for m in 0..steps {
            let truth = data.frame(tr, m)?;
            let next_true = data.frame(tr, m + 1)?;
            let lead = data.lead_time(m);
            let f_true = model.forward(&truth, lead, &opts)?;
            let f_pred = model.forward(&pred, lead, &opts)?;
            eta_bar = eta_bar.max(rms_diff(&f_true, &next_true));
            let e = errs[m];
            if e > 0.0 {
                k_bar = k_bar.max(rms_diff(&f_pred, &f_true) / e);
            }
            errs.push(rms_diff(&f_pred, &next_true));
            pred = f_pred;
        }
        Ok((k_bar, eta_bar, errs))
    });
    let (mut k_bar, mut eta_bar) = (0.0f64, 0.0f64);
    let mut measured = vec![0.0f64; steps + 1];
    for r in per {
        let (k, e, errs) = r?;
        k_bar = k_bar.max(k);
        eta_bar = eta_bar.max(e);
        for (m, v) in errs.into_iter().enumerate() {
            measured[m] = measured[m].max(v);
        }
    }
    let envelope = gronwall_envelope(k_bar, eta_bar, 0.0, steps);
    let violations = (0..=steps)
        .filter(|&m| measured[m] > envelope[m] * (1.0 + 1e-9) + 1e-12)
        .collect();
    Ok(GronwallEnvelope {
        k_bar,
        eta_bar,
        envelope,
        measured,
        violations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SobolevDefect {
    /// Mean Sobolev loss over the samples.
    pub epsilon: f64,
    /// `lambda^(1/(2+s)) epsilon^(1/(2+s))`.
    pub bound: f64,
    /// Mean L2 norm (Parseval, forward normalization) of the errors.
    pub measured: f64,
    pub holds: bool,
}

/// Compares the mean error norm with the Sobolev defect bound.
pub fn sobolev_defect_bound(errors: &[Field<f64>], s: f64, lambda_hf: f64) -> Result<SobolevDefect> {
    if errors.is_empty() {
        return Err(DriftError::Config("no error samples".into()));
    }
    let sw = SobolevWeight { s, lambda_hf };
    let (mut eps, mut eta) = (0.0, 0.0);
    for e in errors {
        let zero = Field::zeros(e.dims())?;
        eps += sobolev_loss(e, &zero, &sw)?;
        // Sum of m(k)|e_k|^2 equals the mean square; averaged over the batch.
        let b = e.batch();
        let per = e.data().len() / b;
        for ib in 0..b {
            let ms = e.data()[ib * per..(ib + 1) * per].iter().map(|v| v * v).sum::<f64>() / per as f64;
            eta += ms.sqrt() / b as f64;
        }
    }
    let n = errors.len() as f64;
    let epsilon = eps / n;
    let measured = eta / n;
    let p = 1.0 / (2.0 + s);
    let bound = lambda_hf.powf(p) * epsilon.powf(p);
    Ok(SobolevDefect {
        epsilon,
        bound,
        measured,
        holds: measured <= bound * (1.0 + 1e-12),
    })
}

/// `amp * cos(2 pi (kx x + ky y))` on an `n x n` grid, single channel.
pub fn single_mode(n: usize, kx: usize, ky: usize, amp: f64) -> Result<Field<f64>> {
    Field::from_fn([1, 1, n, n], |_, _, i, j| {
        let ph = 2.0 * std::f64::consts::PI * ((ky * i) as f64 + (kx * j) as f64) / n as f64;
        amp * ph.cos()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FusionCheck {
    pub bins: usize,
    pub violations: usize,
    /// Largest `|y| - max(|v|, |x_high|)` observed.
    pub max_excess: f64,
}

/// Fuses `n_bins` random complex pairs through the tape fusion op with random
/// gates in `[0, 1]` (or the fixed `inject_alpha`) and counts bins where the
/// output exceeds the larger input magnitude by more than `4 eps` relative.
pub fn fusion_bin_check(n_bins: usize, seed: u64, inject_alpha: Option<f64>) -> Result<FusionCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chunk = 65_536;
    let (mut violations, mut max_excess, mut done) = (0, f64::NEG_INFINITY, 0);
    while done < n_bins {
        let n = chunk.min(n_bins - done);
        let draw = |rng: &mut ChaCha8Rng| {
            let mag = 10f64.powf(rng.random_range(-6.0..6.0));
            let ph = rng.random_range(0.0..std::f64::consts::TAU);
            Complex64::from_polar(mag, ph)
        };
        let v: Vec<Complex64> = (0..n).map(|_| draw(&mut rng)).collect();
        let x: Vec<Complex64> = (0..n).map(|_| draw(&mut rng)).collect();
        let a: Vec<f64> = (0..n)
            .map(|_| inject_alpha.unwrap_or_else(|| rng.random_range(0.0..=1.0)))
            .collect();
        let mut tape = Tape::new();
        let vv = tape.constant_complex(CTensor::new(vec![n], v.clone())?);
        let xv = tape.constant_complex(CTensor::new(vec![n], x.clone())?);
        let av = tape.constant(Tensor::new(vec![n], a)?);
        let y = tape.fuse(vv, xv, av)?;
        for ((yk, vk), xk) in tape.complex(y)?.data().iter().zip(&v).zip(&x) {
            let bound = vk.norm().max(xk.norm());
            let excess = yk.norm() - bound;
            max_excess = max_excess.max(excess / bound);
            if excess > 4.0 * f64::EPSILON * bound {
                violations += 1;
            }
        }
        done += n;
    }
    Ok(FusionCheck {
        bins: n_bins,
        violations,
        max_excess,
    })
}

/// Per-block timing against grid size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityFit {
    pub grids: Vec<usize>,
    /// Median seconds per block forward.
    pub seconds: Vec<f64>,
    /// Slope of `ln t` against `ln(HW ln HW)`.
    pub exponent: f64,
    pub r2: f64,
    /// `t(2n) / t(n)` for consecutive doublings.
    pub doubling_ratios: Vec<f64>,
}

impl ComplexityFit {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("grid,hw_log_hw,seconds\n");
        for (g, t) in self.grids.iter().zip(&self.seconds) {
            let hw = (g * g) as f64;
            s += &format!("{g},{},{t}\n", hw * hw.ln());
        }
        s
    }
}

/// Least-squares line `y = a + b x`; returns `(b, a, r2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Times one DRIFT block forward (`channels` wide) on each square grid.
pub fn bench_block(grids: &[usize], channels: usize, warmup: usize, iters: usize, seed: u64) -> Result<ComplexityFit> {
    if grids.len() < 2 || iters == 0 {
        return Err(DriftError::Config("need at least two grids and one timed iteration".into()));
    }
    let cfg = ModelConfig {
        in_channels: channels,
        width: channels,
        levels: 1,
        blocks_per_level: 1,
        ..ModelConfig::default()
    };
    let mut seconds = Vec::new();
    let opts = ForwardOptions::eval();
    for &n in grids {
        let model = DriftNet::new(cfg.clone(), n, n, seed)?;
        let ids = model.ids.encoder[0][0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![1, channels, n, n], random_field(&mut rng, [1, channels, n, n]))?;
        let run = || -> Result<()> {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let t = DriftNet::time_input(&mut tape, &[0.5])?;
            model.drift_block_on_tape(&model.params, &mut tape, &ids, v, t, &opts)?;
            Ok(())
        };
        for _ in 0..warmup {
            run()?;
        }
        let mut times = Vec::with_capacity(iters);
        for _ in 0..iters {
            let t0 = Instant::now();
            run()?;
            times.push(t0.elapsed().as_secs_f64());
        }
        seconds.push(median(times));
    }
    let xs: Vec<f64> = grids
        .iter()
        .map(|&g| {
            let hw = (g * g) as f64;
            (hw * hw.ln()).ln()
        })
        .collect();
    let ys: Vec<f64> = seconds.iter().map(|t| t.ln()).collect();
    let (exponent, _, r2) = linear_fit(&xs, &ys);
    let doubling_ratios = grids
        .windows(2)
        .zip(seconds.windows(2))
        .filter(|(g, _)| g[1] == 2 * g[0])
        .map(|(_, t)| t[1] / t[0])
        .collect();
    Ok(ComplexityFit {
        grids: grids.to_vec(),
        seconds,
        exponent,
        r2,
        doubling_ratios,
    })
}

/// Predicted time steps per second of the full network at its grid.
pub fn model_throughput(model: &DriftNet, warmup: usize, iters: usize, seed: u64) -> Result<f64> {
    let (h, w) = model.grid;
    let c = model.config.in_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Field::new([1, c, h, w], random_field(&mut rng, [1, c, h, w]))?;
    let opts = ForwardOptions::eval();
    for _ in 0..warmup {
        model.forward(&u, 0.5, &opts)?;
    }
    let mut times = Vec::with_capacity(iters.max(1));
    for _ in 0..iters.max(1) {
        let t0 = Instant::now();
        model.forward(&u, 0.5, &opts)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(1.0 / median(times))
}
