//! Finite-difference checks for every differentiable tape op, each on a
//! small random instance. Outputs are reduced to a scalar by contracting
//! against fixed random weights, so the check sees every output entry.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rustfft::num_complex::Complex64;
use std::f64::consts::TAU;


use super::{grad_check_leaves, GradCheckReport, OpKind, Tape, Value, Var};
use crate::error::Result;
use crate::grid::{half_width, RowIndexing};
use crate::spectral::{BandLayout, FeatureMode, LowMask};
use crate::tensor::{CTensor, Tensor};

pub const STEP: f64 = 1e-5;
/// Pass threshold for a single op.
pub const TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: OpKind,
    pub case: &'static str,
    pub report: GradCheckReport,
    /// Ops recorded while building the case, for coverage accounting.
    pub recorded: Vec<OpKind>,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err() < TOLERANCE
    }
}

const B: usize = 2;
const C: usize = 3;
const H: usize = 8;
const W: usize = 6;

/// Magnitudes in [0.5, 1.5] with random sign, keeping every test point away
/// from kinks and vanishing derivatives.
fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let u = Uniform::new(0.5, 1.5).expect("range");
    let data = (0..n)
        .map(|_| if rng.random::<bool>() { u.sample(rng) } else { -u.sample(rng) })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Magnitudes in [0.5, 1.5] with uniform phase.
fn cnormal(rng: &mut ChaCha8Rng, shape: &[usize]) -> CTensor {
    let n = shape.iter().product();
    let u = Uniform::new(0.5, 1.5).expect("range");
    let data = (0..n)
        .map(|_| Complex64::from_polar(u.sample(rng), rng.random_range(0.0..TAU)))
        .collect();
    CTensor::new(shape.to_vec(), data).expect("shape")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let u = Uniform::new(lo, hi).expect("range");
    Tensor::new(shape.to_vec(), (0..n).map(|_| u.sample(rng)).collect()).expect("shape")
}

/// Scalar `<w, y - y0>` for fixed random `w` and the output `y0` at the
/// unperturbed leaves. Subtracting `y0` keeps the reduced value small, so
/// round-off in the sum does not swamp the central difference.
fn reduce(tape: &mut Tape, y: Var, base: &Value, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match base {
        Value::Real(b) => {
            let c = tape.constant(b.clone());
            let d = tape.sub(y, c)?;
            tape.contract(d, normal(&mut rng, b.shape()))
        }
        Value::Complex(b) => {
            let c = tape.constant_complex(b.clone());
            let d = tape.csub(y, c)?;
            tape.contract_complex(d, cnormal(&mut rng, b.shape()))
        }
    }
}

struct Case {
    op: OpKind,
    name: &'static str,
    leaves: Vec<(&'static str, Value)>,
    build: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
}

fn case(
    op: OpKind,
    name: &'static str,
    leaves: Vec<(&'static str, Value)>,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        op,
        name,
        leaves,
        build: Box::new(build),
    }
}

fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| Value::Real(normal(rng, s));
    let z = |rng: &mut ChaCha8Rng, s: &[usize]| Value::Complex(cnormal(rng, s));
    let wf = half_width(W);
    let img = [B, C, H, W];
    let spec = [B, C, H, wf];
    let layout = Rc::new(BandLayout::new(H, W, 3, RowIndexing::Symmetric)?);
    let ind = Rc::new(LowMask::new(0.3, -0.2).indicator(H, W, RowIndexing::Symmetric));

    let mut out = vec![
        case(OpKind::Add, "add", vec![("a", r(&mut rng, &img)), ("b", r(&mut rng, &img))], move |t, v| {
            t.add(v[0], v[1])
        }),
        case(OpKind::Sub, "sub", vec![("a", r(&mut rng, &img)), ("b", r(&mut rng, &img))], move |t, v| {
            t.sub(v[0], v[1])
        }),
        case(OpKind::Scale, "scale", vec![("x", r(&mut rng, &img))], move |t, v| {
            t.scale(v[0], -1.7)
        }),
        case(OpKind::CSub, "csub", vec![("a", z(&mut rng, &spec)), ("b", z(&mut rng, &spec))], move |t, v| {
            t.csub(v[0], v[1])
        }),
        case(OpKind::Rfft2, "rfft2", vec![("x", r(&mut rng, &img))], move |t, v| {
            t.rfft2(v[0])
        }),
        case(OpKind::Irfft2, "irfft2", vec![("spec", z(&mut rng, &spec))], move |t, v| {
            t.irfft2(v[0], W)
        }),
        {
            let ind = ind.clone();
            case(OpKind::LowPass, "low_pass", vec![("spec", z(&mut rng, &spec))], move |t, v| {
                t.low_pass(v[0], ind.clone(), None)
            })
        },
        {
            let ind = ind.clone();
            case(
                OpKind::ComplexMix,
                "complex_mix",
                vec![("spec", z(&mut rng, &spec)), ("weights", r(&mut rng, &[C, C, 2]))],
                move |t, v| {
                    t.complex_mix(v[0], v[1], ind.clone())
                },
            )
        },
    ];
    for (name, mode) in [("band_features_energy", FeatureMode::EnergyFraction), ("band_features_magdiff", FeatureMode::MagDiff)] {
        let layout = layout.clone();
        out.push(case(
            OpKind::BandFeatures,
            name,
            vec![("low", z(&mut rng, &spec)), ("high", z(&mut rng, &spec))],
            move |t, v| {
                t.band_features(v[0], v[1], layout.clone(), mode, 1e-8)
            },
        ));
    }
    {
        let layout = layout.clone();
        out.push(case(OpKind::BandBroadcast, "band_broadcast", vec![("bands", r(&mut rng, &[B, C, 3]))], move |t, v| {
            t.band_broadcast(v[0], layout.clone())
        }));
    }
    out.push(case(
        OpKind::Fuse,
        "fuse",
        vec![
            ("low", z(&mut rng, &spec)),
            ("high", z(&mut rng, &spec)),
            ("alpha", Value::Real(uniform(&mut rng, &spec, 0.1, 0.9))),
        ],
        move |t, v| {
            t.fuse(v[0], v[1], v[2])
        },
    ));
    let factors = uniform(&mut rng, &spec, 0.5, 1.0);
    out.push(case(OpKind::ScaleBins, "scale_bins", vec![("spec", z(&mut rng, &spec))], move |t, v| {
        t.scale_bins(v[0], factors.clone())
    }));
    out.push(case(
        OpKind::Linear,
        "linear",
        vec![("x", r(&mut rng, &[B, C, 4])), ("w", r(&mut rng, &[5, 4])), ("b", r(&mut rng, &[5]))],
        move |t, v| {
            t.linear(v[0], v[1], Some(v[2]))
        },
    ));
    out.push(case(OpKind::Gelu, "gelu", vec![("x", r(&mut rng, &img))], move |t, v| {
        t.gelu(v[0])
    }));
    out.push(case(OpKind::Sigmoid, "sigmoid", vec![("x", r(&mut rng, &img))], move |t, v| {
        t.sigmoid(v[0])
    }));
    out.push(case(
        OpKind::DwConv,
        "dwconv",
        vec![("x", r(&mut rng, &img)), ("kernel", r(&mut rng, &[C, 3, 3]))],
        move |t, v| {
            t.dwconv(v[0], v[1])
        },
    ));
    out.push(case(
        OpKind::Pointwise,
        "pointwise",
        vec![("x", r(&mut rng, &img)), ("w", r(&mut rng, &[4, C])), ("b", r(&mut rng, &[4]))],
        move |t, v| {
            t.pointwise(v[0], v[1], Some(v[2]))
        },
    ));
    out.push(case(OpKind::LayerNorm, "layer_norm", vec![("x", r(&mut rng, &img))], move |t, v| {
        t.layer_norm(v[0], 1e-6)
    }));
    out.push(case(
        OpKind::Film,
        "film",
        vec![
            ("x", r(&mut rng, &img)),
            ("cond", r(&mut rng, &[B, 2 * C])),
            ("gain", r(&mut rng, &[C])),
            ("bias", r(&mut rng, &[C])),
        ],
        move |t, v| {
            t.film(v[0], v[1], v[2], v[3])
        },
    ));
    out.push(case(
        OpKind::ChannelScale,
        "channel_scale",
        vec![("x", r(&mut rng, &img)), ("s", r(&mut rng, &[C]))],
        move |t, v| {
            t.channel_scale(v[0], v[1])
        },
    ));
    out.push(case(OpKind::PixelShuffle, "pixel_shuffle", vec![("x", r(&mut rng, &[B, 4, 3, 2]))], move |t, v| {
        t.pixel_shuffle(v[0])
    }));
    out.push(case(OpKind::PixelUnshuffle, "pixel_unshuffle", vec![("x", r(&mut rng, &img))], move |t, v| {
        t.pixel_unshuffle(v[0])
    }));
    for (name, p) in [("rel_l1", 1), ("rel_l2", 2)] {
        let pred = normal(&mut rng, &img);
        let offset = normal(&mut rng, &img);
        let target = Tensor::new(img.to_vec(), pred.data().iter().zip(offset.data()).map(|(p, o)| p + o).collect())?;
        out.push(case(OpKind::RelLp, name, vec![("pred", Value::Real(pred))], move |t, v| {
            t.rel_lp(v[0], &target, p)
        }));
    }
    let weights = Rc::new(uniform(&mut rng, &[H, wf], 0.5, 2.0).data().to_vec());
    out.push(case(
        OpKind::WeightedSpectralEnergy,
        "weighted_spectral_energy",
        vec![("spec", z(&mut rng, &spec))],
        move |t, v| t.weighted_spectral_energy(v[0], weights.clone(), 0.37),
    ));
    out.push(case(OpKind::Contract, "contract", vec![("x", r(&mut rng, &img))], move |_, v| Ok(v[0])));
    out.push(case(OpKind::Contract, "contract_complex", vec![("x", z(&mut rng, &spec))], move |_, v| Ok(v[0])));
    Ok(out)
}

fn record(tape: &mut Tape, leaves: &[(&str, Value)]) -> Vec<Var> {
    leaves
        .iter()
        .map(|(_, v)| match v {
            Value::Real(t) => tape.input(t.clone()),
            Value::Complex(t) => tape.input_complex(t.clone()),
        })
        .collect()
}

/// Runs every case, checking all entries of every leaf.
pub fn op_gradient_checks(seed: u64) -> Result<Vec<OpCheck>> {
    let w_seed = seed ^ 0x5eed;
    cases(seed)?
        .into_iter()
        .map(|c| {
            let mut tape = Tape::new();
            let vars = record(&mut tape, &c.leaves);
            let y = (c.build)(&mut tape, &vars)?;
            let base = tape.value(y).clone();
            reduce(&mut tape, y, &base, w_seed)?;
            let recorded = tape.ops().collect();
            let report = grad_check_leaves(
                &c.leaves,
                |t, v| {
                    let y = (c.build)(t, v)?;
                    reduce(t, y, &base, w_seed)
                },
                STEP,
                None,
            )?;
            Ok(OpCheck {
                op: c.op,
                case: c.name,
                report,
                recorded,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    #[test]
    fn every_differentiable_op_is_checked() {
        let checks = op_gradient_checks(0).unwrap();
        let covered: BTreeSet<OpKind> = checks.iter().map(|c| c.op).collect();
        let expected: BTreeSet<OpKind> = OpKind::DIFFERENTIABLE.iter().copied().collect();
        assert_eq!(covered, expected);
        for c in &checks {
            assert!(c.recorded.contains(&c.op), "{} does not record {}", c.case, c.op);
        }
    }

    #[test]
    fn all_op_gradients_match_finite_differences() {
        for seed in 0..6 {
            for c in op_gradient_checks(seed).unwrap() {
                let worst = c.report.worst().unwrap();
                assert!(
                    c.passed(),
                    "{} ({}): {} rel err {:.3e} >= {:.0e}",
                    c.case,
                    c.op,
                    worst.name,
                    worst.max_rel_err,
                    TOLERANCE
                );
            }
        }
    }
}
