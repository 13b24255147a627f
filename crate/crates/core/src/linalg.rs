//! Matrix-free operator norm estimation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Outcome of a power iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Dominant singular value of a linear map given by `matvec` (`R^n -> R^m`)
/// and its adjoint `rmatvec` (`R^m -> R^n`), by power iteration on `A^T A`.
///
/// Stops when the relative change of the estimate drops below `tol`, or after
/// `max_iters`; the best estimate is returned either way.
pub fn power_iteration_norm(
    mut matvec: impl FnMut(&[f64]) -> Vec<f64>,
    mut rmatvec: impl FnMut(&[f64]) -> Vec<f64>,
    dim: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> NormEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    let mut sigma = 0.0;
    let mut best = 0.0f64;
    for it in 1..=max_iters.max(1) {
        let av = matvec(&v);
        let next = norm(&av);
        best = best.max(next);
        if next == 0.0 {
            return NormEstimate {
                value: 0.0,
                iterations: it,
                converged: true,
            };
        }
        let mut w = rmatvec(&av);
        let wn = normalize(&mut w);
        if wn == 0.0 {
            return NormEstimate {
                value: best,
                iterations: it,
                converged: true,
            };
        }
        v = w;
        if it > 1 && (next - sigma).abs() <= tol * next {
            return NormEstimate {
                value: best,
                iterations: it,
                converged: true,
            };
        }
        sigma = next;
    }
    NormEstimate {
        value: best,
        iterations: max_iters,
        converged: false,
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Spectral norm of a dense row-major `rows x cols` real matrix.
pub fn dense_spectral_norm(a: &[f64], rows: usize, cols: usize, iters: usize, tol: f64) -> NormEstimate {
    power_iteration_norm(
        |x| (0..rows).map(|r| (0..cols).map(|c| a[r * cols + c] * x[c]).sum()).collect(),
        |y| (0..cols).map(|c| (0..rows).map(|r| a[r * cols + c] * y[r]).sum()).collect(),
        cols,
        iters,
        tol,
        0x5eed,
    )
}
