//! Relative L_p objective, frequency-weighted auxiliary term, Sobolev loss
//! and the grouped task error.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DriftError, Result};
use crate::grid::{half_width, multiplicity, wavenumber, Field, FreqGrid, RowIndexing};
use crate::tensor::Tensor;

fn same_dims(a: &Field<f64>, b: &Field<f64>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(DriftError::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Batch mean of per-sample `||pred - target||_p / ||target||_p`.
pub fn rel_lp(pred: &Field<f64>, target: &Field<f64>, p: u32) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from(pred.clone()));
    let l = tape.rel_lp(x, &Tensor::from(target.clone()), p)?;
    Ok(tape.real(l)?.data()[0])
}

/// Radial weight `w(r) = r^alpha` scaled by `lambda`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqWeight {
    pub lambda: f64,
    pub alpha_exp: f64,
    #[serde(default)]
    pub rows: RowIndexing,
}

impl Default for FreqWeight {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            alpha_exp: 1.0,
            rows: RowIndexing::Symmetric,
        }
    }
}

impl FreqWeight {
    /// `r_clamped^alpha` per half-plane bin (no multiplicity).
    pub fn radial(&self, h: usize, w: usize) -> Vec<f64> {
        let grid = FreqGrid::new(h, w, self.rows);
        let wf = half_width(w);
        let mut out = Vec::with_capacity(h * wf);
        for i in 0..h {
            for j in 0..wf {
                let r = grid.clamped(i, j);
                out.push(if r == 0.0 && self.alpha_exp > 0.0 { 0.0 } else { r.powf(self.alpha_exp) });
            }
        }
        out
    }

    /// `m(k) * r^alpha` per half-plane bin.
    pub fn weights(&self, h: usize, w: usize) -> Vec<f64> {
        let wf = half_width(w);
        self.radial(h, w)
            .into_iter()
            .enumerate()
            .map(|(k, v)| v * multiplicity(k % wf, w))
            .collect()
    }
}

/// Sobolev weight `(1 + |k|^2)^s` on integer wavenumbers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SobolevWeight {
    pub s: f64,
    pub lambda_hf: f64,
}

impl SobolevWeight {
    /// `m(k) (1 + |k|^2)^s` per half-plane bin.
    pub fn weights(&self, h: usize, w: usize) -> Vec<f64> {
        let wf = half_width(w);
        let mut out = Vec::with_capacity(h * wf);
        for i in 0..h {
            for j in 0..wf {
                let k = wavenumber(i, j, h);
                out.push(multiplicity(j, w) * (1.0 + k * k).powf(self.s));
            }
        }
        out
    }
}

/// Records `rel_lp + lambda * mean_k m(k) w(r) |E(k)|^2` on a tape. With
/// `lambda = 0` the spectral term is not recorded at all.
pub fn freq_weighted_loss_on_tape(tape: &mut Tape, pred: Var, target: &Tensor, fw: &FreqWeight, p: u32) -> Result<Var> {
    let base = tape.rel_lp(pred, target, p)?;
    if fw.lambda == 0.0 {
        return Ok(base);
    }
    let [b, c, h, w] = tape.real(pred)?.dims4()?;
    let t = tape.constant(target.clone());
    let e = tape.sub(pred, t)?;
    let eh = tape.rfft2(e)?;
    let scale = fw.lambda / (b * c * h * w) as f64;
    let aux = tape.weighted_spectral_energy(eh, Rc::new(fw.weights(h, w)), scale)?;
    tape.add(base, aux)
}

pub fn freq_weighted_loss(pred: &Field<f64>, target: &Field<f64>, fw: &FreqWeight, p: u32) -> Result<f64> {
    same_dims(pred, target)?;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from(pred.clone()));
    let l = freq_weighted_loss_on_tape(&mut tape, x, &Tensor::from(target.clone()), fw, p)?;
    Ok(tape.real(l)?.data()[0])
}

/// Records `lambda_hf * sum_k m(k) (1 + |k|^2)^s |e_k|^2`, averaged over the batch.
pub fn sobolev_loss_on_tape(tape: &mut Tape, pred: Var, target: &Tensor, sw: &SobolevWeight) -> Result<Var> {
    let [b, _, h, w] = tape.real(pred)?.dims4()?;
    let t = tape.constant(target.clone());
    let e = tape.sub(pred, t)?;
    let eh = tape.rfft2(e)?;
    tape.weighted_spectral_energy(eh, Rc::new(sw.weights(h, w)), sw.lambda_hf / b as f64)
}

pub fn sobolev_loss(pred: &Field<f64>, target: &Field<f64>, sw: &SobolevWeight) -> Result<f64> {
    same_dims(pred, target)?;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from(pred.clone()));
    let l = sobolev_loss_on_tape(&mut tape, x, &Tensor::from(target.clone()), sw)?;
    Ok(tape.real(l)?.data()[0])
}

fn select_channels(f: &Field<f64>, chans: &[usize]) -> Result<Field<f64>> {
    let [b, _, h, w] = f.dims();
    let mut data = Vec::with_capacity(b * chans.len() * h * w);
    for ib in 0..b {
        for &c in chans {
            data.extend_from_slice(f.plane(ib, c));
        }
    }
    Field::new([b, chans.len(), h, w], data)
}

/// Unweighted mean over disjoint channel groups of the per-group relative L1 error.
pub fn qoi_task_error(pred: &Field<f64>, target: &Field<f64>, groups: &[Vec<usize>]) -> Result<f64> {
    same_dims(pred, target)?;
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
        return Err(DriftError::Config("task error needs non-empty channel groups".into()));
    }
    let mut seen = vec![false; pred.channels()];
    for &c in groups.iter().flatten() {
        if c >= seen.len() {
            return Err(DriftError::Config(format!("channel {c} out of range")));
        }
        if seen[c] {
            return Err(DriftError::Config(format!("channel {c} appears in more than one group")));
        }
        seen[c] = true;
    }
    let mut acc = 0.0;
    for g in groups {
        acc += rel_lp(&select_channels(pred, g)?, &select_channels(target, g)?, 1)?;
    }
    Ok(acc / groups.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_leaves;
    use crate::grid::{rfft2, spectral_energy};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn random_field(seed: u64, dims: [usize; 4]) -> Field<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn scaled(f: &Field<f64>, s: f64) -> Field<f64> {
        Field::new(f.dims(), f.data().iter().map(|v| v * s).collect()).unwrap()
    }

    fn plus(a: &Field<f64>, b: &Field<f64>) -> Field<f64> {
        Field::new(a.dims(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
    }

    /// `a cos(2 pi (kx i / H + ky j / W))` on one plane.
    fn mode(h: usize, w: usize, kx: usize, ky: usize, a: f64) -> Field<f64> {
        Field::from_fn([1, 1, h, w], |_, _, i, j| {
            a * (TAU * (kx as f64 * i as f64 / h as f64 + ky as f64 * j as f64 / w as f64)).cos()
        })
        .unwrap()
    }

    #[test]
    fn rel_lp_simple_cases() {
        let t = random_field(0, [2, 2, 8, 8]);
        for p in [1, 2] {
            assert_eq!(rel_lp(&t, &t, p).unwrap(), 0.0);
            assert!((rel_lp(&scaled(&t, 2.0), &t, p).unwrap() - 1.0).abs() < 1e-14);
        }
        assert!(rel_lp(&t, &Field::zeros(t.dims()).unwrap(), 1).is_err());
        assert!(rel_lp(&t, &t, 3).is_err());
    }

    #[test]
    fn rel_lp_matches_loop_oracle() {
        let (p, t) = (random_field(1, [3, 2, 8, 4]), random_field(2, [3, 2, 8, 4]));
        let per = 2 * 8 * 4;
        for q in [1u32, 2] {
            let mut acc = 0.0;
            for b in 0..3 {
                let (mut num, mut den) = (0.0, 0.0);
                for k in 0..per {
                    let (x, y) = (p.data()[b * per + k], t.data()[b * per + k]);
                    num += (x - y).abs().powi(q as i32);
                    den += y.abs().powi(q as i32);
                }
                acc += (num / den).powf(1.0 / q as f64);
            }
            assert!((rel_lp(&p, &t, q).unwrap() - acc / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_lambda_is_bit_identical_to_base() {
        let (p, t) = (random_field(3, [2, 2, 8, 8]), random_field(4, [2, 2, 8, 8]));
        let fw = FreqWeight {
            lambda: 0.0,
            ..FreqWeight::default()
        };
        for q in [1, 2] {
            assert_eq!(freq_weighted_loss(&p, &t, &fw, q).unwrap().to_bits(), rel_lp(&p, &t, q).unwrap().to_bits());
        }
        assert_eq!(freq_weighted_loss(&t, &t, &FreqWeight::default(), 1).unwrap(), 0.0);
    }

    #[test]
    fn weights_are_monotone_with_zero_dc() {
        let fw = FreqWeight::default();
        let r = fw.radial(16, 16);
        assert_eq!(r[0], 0.0);
        let grid = FreqGrid::new(16, 16, RowIndexing::Symmetric);
        let mut pairs: Vec<(f64, f64)> = grid.raw_map().iter().map(|&x| x.min(1.0)).zip(r).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pairs.windows(2).all(|p| p[1].1 >= p[0].1));
        let sw = SobolevWeight { s: 1.5, lambda_hf: 1.0 };
        let wts = sw.weights(8, 8);
        assert!(wts.iter().enumerate().all(|(k, &v)| v / multiplicity(k % 5, 8) >= 1.0));
    }

    #[test]
    fn single_mode_auxiliary_term() {
        let (h, w, kx, ky, a) = (16, 16, 3, 2, 0.7);
        let target = random_field(5, [1, 1, h, w]);
        let pred = plus(&target, &mode(h, w, kx, ky, a));
        let fw = FreqWeight {
            lambda: 0.3,
            alpha_exp: 1.0,
            rows: RowIndexing::Symmetric,
        };
        let r = FreqGrid::new(h, w, RowIndexing::Symmetric).clamped(kx, ky);
        // Only bin (kx, ky) carries a/2; it has multiplicity 2.
        let want = fw.lambda * r * 2.0 * (a / 2.0).powi(2) / (h * w) as f64;
        let aux = freq_weighted_loss(&pred, &target, &fw, 1).unwrap() - rel_lp(&pred, &target, 1).unwrap();
        assert!((aux - want).abs() < 1e-12, "{aux} vs {want}");
    }

    #[test]
    fn sobolev_cases() {
        let t = random_field(6, [1, 2, 8, 8]);
        let sw = SobolevWeight { s: 2.0, lambda_hf: 0.5 };
        assert_eq!(sobolev_loss(&t, &t, &sw).unwrap(), 0.0);
        let p = random_field(7, [1, 2, 8, 8]);
        let s0 = SobolevWeight { s: 0.0, lambda_hf: 0.5 };
        let e: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| a - b).collect();
        let mse_sum = e.iter().map(|v| v * v).sum::<f64>() / 64.0;
        assert!((sobolev_loss(&p, &t, &s0).unwrap() - 0.5 * mse_sum).abs() < 1e-12);

        let (h, w, kx, ky, a) = (16, 12, 2, 3, 1.3);
        let z = Field::zeros([1, 1, h, w]).unwrap();
        let m = mode(h, w, kx, ky, a);
        let k2 = (kx * kx + ky * ky) as f64;
        let want = 0.5 * (1.0 + k2).powf(2.0) * 2.0 * (a / 2.0).powi(2);
        assert!((sobolev_loss(&m, &z, &sw).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn task_error_groups() {
        let (p, t) = (random_field(8, [2, 3, 8, 8]), random_field(9, [2, 3, 8, 8]));
        let all = qoi_task_error(&p, &t, &[vec![0, 1, 2]]).unwrap();
        assert!((all - rel_lp(&p, &t, 1).unwrap()).abs() < 1e-15);
        let groups = vec![vec![0], vec![2, 1]];
        let oracle = (rel_lp(&select_channels(&p, &[0]).unwrap(), &select_channels(&t, &[0]).unwrap(), 1).unwrap()
            + rel_lp(&select_channels(&p, &[2, 1]).unwrap(), &select_channels(&t, &[2, 1]).unwrap(), 1).unwrap())
            / 2.0;
        assert!((qoi_task_error(&p, &t, &groups).unwrap() - oracle).abs() < 1e-15);
        // Three singleton groups against a per-channel loop.
        let mut acc = 0.0;
        for c in 0..3 {
            acc += (0..2)
                .map(|b| {
                    let n: f64 = p.plane(b, c).iter().zip(t.plane(b, c)).map(|(x, y)| (x - y).abs()).sum();
                    n / t.plane(b, c).iter().map(|y| y.abs()).sum::<f64>()
                })
                .sum::<f64>()
                / 2.0;
        }
        let three = qoi_task_error(&p, &t, &[vec![0], vec![1], vec![2]]).unwrap();
        assert!((three - acc / 3.0).abs() < 1e-12);
        // Two groups holding identical data score the same as one of them.
        let dup_p = Field::from_fn([1, 2, 4, 4], |_, _, i, j| (i + 2 * j) as f64 * 0.1 + 0.3).unwrap();
        let dup_t = Field::from_fn([1, 2, 4, 4], |_, _, i, j| (i * j) as f64 * 0.1 + 0.5).unwrap();
        let two = qoi_task_error(&dup_p, &dup_t, &[vec![0], vec![1]]).unwrap();
        let one = qoi_task_error(&dup_p, &dup_t, &[vec![0, 1]]).unwrap();
        assert!((two - one).abs() < 1e-15);
        assert!(qoi_task_error(&p, &t, &[vec![0, 1], vec![1]]).is_err());
        assert!(qoi_task_error(&p, &t, &[vec![3]]).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dims = [1, 2, 8, 8];
        // Keep the error away from zero so the L1 kink is not crossed.
        let target = random_field(11, dims);
        let pred = Field::new(
            dims,
            target
                .data()
                .iter()
                .map(|v| v + if rng.random::<bool>() { 1.0 } else { -1.0 } * rng.random_range(0.2..1.0))
                .collect(),
        )
        .unwrap();
        let tt = Tensor::from(target);
        let fw = FreqWeight {
            lambda: 0.5,
            ..FreqWeight::default()
        };
        let sw = SobolevWeight { s: 1.0, lambda_hf: 0.1 };
        for p in [1, 2] {
            let r = grad_check_leaves(
                &[("pred", crate::autodiff::real_leaf(Tensor::from(pred.clone())))],
                |tape, v| freq_weighted_loss_on_tape(tape, v[0], &tt, &fw, p),
                1e-5,
                None,
            )
            .unwrap();
            assert!(r.max_rel_err() < 1e-6, "p={p}: {:.3e}", r.max_rel_err());
        }
        let r = grad_check_leaves(
            &[("pred", crate::autodiff::real_leaf(Tensor::from(pred.clone())))],
            |tape, v| sobolev_loss_on_tape(tape, v[0], &tt, &sw),
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.max_rel_err() < 1e-6, "{:.3e}", r.max_rel_err());
    }

    #[test]
    fn auxiliary_gradient_is_weighted_error_spectrum() {
        // With forward normalization the adjoint of rfft2 is irfft2 / (H W), so
        // d/dpred of lambda/N sum_k m w |E_k|^2 is irfft2(2 lambda w E) / (N H W).
        let dims = [1, 1, 8, 8];
        let (p, t) = (random_field(12, dims), random_field(13, dims));
        let fw = FreqWeight {
            lambda: 0.4,
            ..FreqWeight::default()
        };
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from(p.clone()));
        let tt = tape.constant(Tensor::from(t.clone()));
        let e = tape.sub(x, tt).unwrap();
        let eh = tape.rfft2(e).unwrap();
        let aux = tape
            .weighted_spectral_energy(eh, Rc::new(fw.weights(8, 8)), fw.lambda / 64.0)
            .unwrap();
        let g = tape.backward(aux).unwrap().real(&tape, x);
        let err = Field::new(dims, p.data().iter().zip(t.data()).map(|(a, b)| a - b).collect()).unwrap();
        let spec = rfft2(&err);
        let radial = fw.radial(8, 8);
        let scaled: Vec<_> = spec.data().iter().zip(&radial).map(|(v, w)| v * (2.0 * fw.lambda * w)).collect();
        let back = crate::grid::irfft2(&spec.with_data(scaled).unwrap()).unwrap();
        for (a, b) in g.data().iter().zip(back.data()) {
            let want = b / (64.0 * 64.0);
            assert!((a - want).abs() < 1e-14, "{a} vs {want}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn freq_loss_dominates_base(seed in 0u64..1000, lambda in 0.0f64..2.0) {
            let (p, t) = (random_field(seed, [1, 2, 8, 8]), random_field(seed + 1, [1, 2, 8, 8]));
            let fw = FreqWeight { lambda, ..FreqWeight::default() };
            prop_assert!(freq_weighted_loss(&p, &t, &fw, 1).unwrap() >= rel_lp(&p, &t, 1).unwrap());
        }

        #[test]
        fn rel_lp_is_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0) {
            let (p, t) = (random_field(seed, [1, 2, 4, 4]), random_field(seed + 7, [1, 2, 4, 4]));
            for q in [1, 2] {
                let a = rel_lp(&p, &t, q).unwrap();
                let b = rel_lp(&scaled(&p, c), &scaled(&t, c), q).unwrap();
                prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            }
        }

        #[test]
        fn sobolev_dominates_spectral_energy(seed in 0u64..1000, s in 0.0f64..3.0) {
            let (p, t) = (random_field(seed, [1, 1, 8, 8]), random_field(seed + 3, [1, 1, 8, 8]));
            let sw = SobolevWeight { s, lambda_hf: 0.7 };
            let err = Field::new(p.dims(), p.data().iter().zip(t.data()).map(|(a, b)| a - b).collect()).unwrap();
            let energy = spectral_energy(&rfft2(&err));
            prop_assert!(sobolev_loss(&p, &t, &sw).unwrap() >= 0.7 * energy * (1.0 - 1e-12));
        }
    }
}
