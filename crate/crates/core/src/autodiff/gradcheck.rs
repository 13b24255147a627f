//! Central-difference verification of tape gradients (f64).

use rustfft::num_complex::Complex64;

use super::{Tape, Value, Var};
use crate::error::{DriftError, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{CTensor, Tensor};

/// Floor of the relative-error denominator `max(|a|, |b|, floor)`.
pub const DENOM_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub step: f64,
    pub dtype: &'static str,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupError> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

fn picks(len: usize, max_per_group: Option<usize>) -> Vec<usize> {
    match max_per_group {
        Some(m) if m < len => (0..m).map(|k| k * len / m).collect(),
        _ => (0..len).collect(),
    }
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.real(v)?;
    if !t.is_scalar() {
        return Err(DriftError::Tape("gradient check needs a scalar loss".into()));
    }
    Ok(t.data()[0])
}

/// Checks parameter gradients of `build`, which records a scalar loss reading
/// parameters from the given store. Straight-through parameters are skipped.
pub fn grad_check(
    store: &ParamStore,
    build: impl Fn(&ParamStore, &mut Tape) -> Result<Var>,
    h: f64,
    max_per_group: Option<usize>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let loss = build(store, &mut tape)?;
    let grads = tape.backward(loss)?.params(store);
    let mut work = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(s, &mut t)?;
        scalar_of(&t, l)
    };
    let mut groups = Vec::new();
    for id in store.ids() {
        let entry = store.entry(id);
        if entry.kind == ParamKind::StraightThrough {
            continue;
        }
        let mut worst: f64 = 0.0;
        let idx = picks(entry.value.len(), max_per_group);
        for &k in &idx {
            let orig = entry.value.data()[k];
            work.get_mut(id).data_mut()[k] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            worst = worst.max(rel_err(grads.get(id).data()[k], (fp - fm) / (2.0 * h)));
        }
        groups.push(GroupError {
            name: entry.name.clone(),
            max_rel_err: worst,
            checked: idx.len(),
        });
    }
    Ok(GradCheckReport {
        groups,
        step: h,
        dtype: "f64",
    })
}

/// Checks gradients with respect to explicit leaf values (real or complex,
/// with real and imaginary parts perturbed separately). `build` receives the
/// leaves as tape inputs in order.
pub fn grad_check_leaves(
    leaves: &[(&str, Value)],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    h: f64,
    max_per_group: Option<usize>,
) -> Result<GradCheckReport> {
    let record = |tape: &mut Tape, vals: &[Value]| -> Vec<Var> {
        vals.iter()
            .map(|v| match v {
                Value::Real(t) => tape.input(t.clone()),
                Value::Complex(t) => tape.input_complex(t.clone()),
            })
            .collect()
    };
    let base: Vec<Value> = leaves.iter().map(|(_, v)| v.clone()).collect();
    let mut tape = Tape::new();
    let vars = record(&mut tape, &base);
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let eval = |vals: &[Value]| -> Result<f64> {
        let mut t = Tape::new();
        let vs = record(&mut t, vals);
        let l = build(&mut t, &vs)?;
        scalar_of(&t, l)
    };
    let mut work = base.clone();
    let mut groups = Vec::new();
    for (li, (name, value)) in leaves.iter().enumerate() {
        let mut worst: f64 = 0.0;
        let idx = picks(value.shape().iter().product(), max_per_group);
        match value {
            Value::Real(t) => {
                let g = grads.real(&tape, vars[li]);
                for &k in &idx {
                    let set = |w: &mut Vec<Value>, v: f64| {
                        if let Value::Real(tt) = &mut w[li] {
                            tt.data_mut()[k] = v;
                        }
                    };
                    let orig = t.data()[k];
                    set(&mut work, orig + h);
                    let fp = eval(&work)?;
                    set(&mut work, orig - h);
                    let fm = eval(&work)?;
                    set(&mut work, orig);
                    worst = worst.max(rel_err(g.data()[k], (fp - fm) / (2.0 * h)));
                }
            }
            Value::Complex(t) => {
                let g = grads.complex(&tape, vars[li]);
                for &k in &idx {
                    let set = |w: &mut Vec<Value>, v: Complex64| {
                        if let Value::Complex(tt) = &mut w[li] {
                            tt.data_mut()[k] = v;
                        }
                    };
                    let orig = t.data()[k];
                    for (dir, analytic) in [(Complex64::new(h, 0.0), g.data()[k].re), (Complex64::new(0.0, h), g.data()[k].im)] {
                        set(&mut work, orig + dir);
                        let fp = eval(&work)?;
                        set(&mut work, orig - dir);
                        let fm = eval(&work)?;
                        set(&mut work, orig);
                        worst = worst.max(rel_err(analytic, (fp - fm) / (2.0 * h)));
                    }
                }
            }
        }
        groups.push(GroupError {
            name: (*name).to_string(),
            max_rel_err: worst,
            checked: idx.len(),
        });
    }
    Ok(GradCheckReport {
        groups,
        step: h,
        dtype: "f64",
    })
}

/// Real leaf helper.
pub fn real_leaf(t: Tensor) -> Value {
    Value::Real(t)
}

/// Complex leaf helper.
pub fn complex_leaf(t: CTensor) -> Value {
    Value::Complex(t)
}
