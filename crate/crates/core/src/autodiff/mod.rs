//! Reverse-mode differentiation over a tensor tape.
//!
//! Every operation appends a node holding its value and a backward closure
//! that maps the output cotangent to cotangents of its inputs. Complex values
//! carry cotangents as `dL/dRe + i dL/dIm`, i.e. real and imaginary parts are
//! independent real coordinates of the real scalar loss.
//!
//! Nodes are appended in topological order, so the backward sweep is a single
//! reverse scan that visits each node once.

mod basic;
pub mod checks;
mod fft;
mod gradcheck;
mod image_ops;
mod loss_ops;
mod optim;
mod spectral_ops;

use std::cell::Cell;
use std::fmt;

pub use gradcheck::{complex_leaf, grad_check, grad_check_leaves, real_leaf, rel_err, GradCheckReport, GroupError, DENOM_FLOOR};
pub use optim::{cosine_lr, AdamW, AdamWConfig, AdamWState};
pub use basic::{gelu, gelu_grad, sigmoid};
pub use spectral_ops::MaskGrad;

use crate::error::{DriftError, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{CTensor, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Real(Tensor),
    Complex(CTensor),
}

impl Value {
    pub fn shape(&self) -> &[usize] {
        match self {
            Value::Real(t) => t.shape(),
            Value::Complex(t) => t.shape(),
        }
    }

    pub fn as_real(&self) -> Option<&Tensor> {
        match self {
            Value::Real(t) => Some(t),
            Value::Complex(_) => None,
        }
    }

    pub fn as_complex(&self) -> Option<&CTensor> {
        match self {
            Value::Complex(t) => Some(t),
            Value::Real(_) => None,
        }
    }

    fn accumulate(&mut self, other: &Value) {
        match (self, other) {
            (Value::Real(a), Value::Real(b)) => a.add_assign(b),
            (Value::Complex(a), Value::Complex(b)) => a.add_assign(b),
            _ => panic!("cotangent kind mismatch"),
        }
    }
}

/// Every operation the tape knows. Differentiable kinds must each have a
/// finite-difference check; the registry test enforces that.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Input,
    Constant,
    Param,
    Add,
    Sub,
    Scale,
    CSub,
    Rfft2,
    Irfft2,
    LowPass,
    ComplexMix,
    BandFeatures,
    BandBroadcast,
    Fuse,
    ScaleBins,
    Linear,
    Gelu,
    Sigmoid,
    DwConv,
    Pointwise,
    LayerNorm,
    Film,
    ChannelScale,
    PixelShuffle,
    PixelUnshuffle,
    RelLp,
    WeightedSpectralEnergy,
    Contract,
}

impl OpKind {
    pub const DIFFERENTIABLE: &'static [OpKind] = &[
        OpKind::Add,
        OpKind::Sub,
        OpKind::Scale,
        OpKind::CSub,
        OpKind::Rfft2,
        OpKind::Irfft2,
        OpKind::LowPass,
        OpKind::ComplexMix,
        OpKind::BandFeatures,
        OpKind::BandBroadcast,
        OpKind::Fuse,
        OpKind::ScaleBins,
        OpKind::Linear,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::DwConv,
        OpKind::Pointwise,
        OpKind::LayerNorm,
        OpKind::Film,
        OpKind::ChannelScale,
        OpKind::PixelShuffle,
        OpKind::PixelUnshuffle,
        OpKind::RelLp,
        OpKind::WeightedSpectralEnergy,
        OpKind::Contract,
    ];
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

pub(crate) type BackwardFn = Box<dyn Fn(&Values<'_>, &Value) -> Vec<(Var, Value)>>;

struct Node {
    value: Value,
    op: OpKind,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

/// Read access to node values inside backward closures.
pub struct Values<'a>(&'a [Node]);

impl Values<'_> {
    pub fn real(&self, v: Var) -> &Tensor {
        self.0[v.0].value.as_real().expect("real node")
    }

    pub fn complex(&self, v: Var) -> &CTensor {
        self.0[v.0].value.as_complex().expect("complex node")
    }
}

/// A recording of one forward evaluation.
pub struct Tape {
    nodes: Vec<Node>,
    check_amplitude: bool,
    violations: Cell<usize>,
    checked_bins: Cell<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_amplitude: false,
            violations: Cell::new(0),
            checked_bins: Cell::new(0),
        }
    }

    /// Debug mode: every fusion checks the bin-wise amplitude bound.
    pub fn with_amplitude_checks(mut self, on: bool) -> Self {
        self.check_amplitude = on;
        self
    }

    pub fn amplitude_checks(&self) -> bool {
        self.check_amplitude
    }

    /// `(violations, bins checked)` accumulated by fusion nodes.
    pub fn amplitude_report(&self) -> (usize, usize) {
        (self.violations.get(), self.checked_bins.get())
    }

    pub(crate) fn record_amplitude(&self, violations: usize, bins: usize) {
        self.violations.set(self.violations.get() + violations);
        self.checked_bins.set(self.checked_bins.get() + bins);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Value, op: OpKind, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            backward,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Value::Real(t), OpKind::Input, None)
    }

    pub fn input_complex(&mut self, t: CTensor) -> Var {
        self.push(Value::Complex(t), OpKind::Input, None)
    }

    /// Value that gradients are never requested for.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Value::Real(t), OpKind::Constant, None)
    }

    pub fn constant_complex(&mut self, t: CTensor) -> Var {
        self.push(Value::Complex(t), OpKind::Constant, None)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(Value::Real(store.get(id).clone()), OpKind::Param, None);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> OpKind {
        self.nodes[v.0].op
    }

    pub fn real(&self, v: Var) -> Result<&Tensor> {
        self.nodes[v.0]
            .value
            .as_real()
            .ok_or_else(|| DriftError::Tape(format!("node {} is complex, expected real", v.0)))
    }

    pub fn complex(&self, v: Var) -> Result<&CTensor> {
        self.nodes[v.0]
            .value
            .as_complex()
            .ok_or_else(|| DriftError::Tape(format!("node {} is real, expected complex", v.0)))
    }

    /// Ops recorded on this tape, in order.
    pub fn ops(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().map(|n| n.op)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let value = self.real(loss)?;
        if !value.is_scalar() {
            return Err(DriftError::Tape(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                value.shape()
            )));
        }
        self.backward_with_seed(loss, Value::Real(Tensor::new(value.shape().to_vec(), vec![1.0])?))
    }

    /// Vector-Jacobian product: propagates an explicit cotangent `seed` for `out`.
    pub fn backward_with_seed(&self, out: Var, seed: Value) -> Result<Gradients> {
        let node = self
            .nodes
            .get(out.0)
            .ok_or_else(|| DriftError::Tape("seed node does not exist".into()))?;
        let kinds_match = matches!(
            (&node.value, &seed),
            (Value::Real(_), Value::Real(_)) | (Value::Complex(_), Value::Complex(_))
        );
        if !kinds_match || node.value.shape() != seed.shape() {
            return Err(DriftError::Tape(format!(
                "seed of shape {:?} does not match node shape {:?}",
                seed.shape(),
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Value>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for id in (0..=out.0).rev() {
            let (lower, upper) = grads.split_at_mut(id);
            let Some(g) = upper[0].as_ref() else { continue };
            let Some(bw) = self.nodes[id].backward.as_ref() else { continue };
            for (parent, contrib) in bw(&Values(&self.nodes), g) {
                debug_assert!(parent.0 < id, "tape order violated");
                match &mut lower[parent.0] {
                    Some(acc) => acc.accumulate(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| n.param.map(|p| (i, p)))
                .collect(),
        })
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Value>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Cotangent of `v`; `None` if no path from the seed reaches it.
    pub fn wrt(&self, v: Var) -> Option<&Value> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Real cotangent of `v`, zeros if unreachable.
    pub fn real(&self, tape: &Tape, v: Var) -> Tensor {
        match self.wrt(v) {
            Some(Value::Real(t)) => t.clone(),
            _ => Tensor::zeros(tape.value(v).shape()),
        }
    }

    pub fn complex(&self, tape: &Tape, v: Var) -> CTensor {
        match self.wrt(v) {
            Some(Value::Complex(t)) => t.clone(),
            _ => CTensor::zeros(tape.value(v).shape()),
        }
    }

    /// Gradients for every parameter of `store` (zero where unused).
    pub fn params(&self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for &(node, id) in &self.params {
            if let Some(Value::Real(g)) = self.grads.get(node).and_then(|g| g.as_ref()) {
                out.accumulate(id, g);
            }
        }
        out
    }
}
