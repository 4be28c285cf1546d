//! Minimal layer toolkit with hand-written forward and backward passes.
//!
//! Layers cache what their backward pass needs during `forward`. Parameter
//! gradients accumulate into [`Param::grad`] until the caller zeroes them,
//! so one optimizer step may span several backward passes.

mod batchnorm;
mod conv;
mod dense;
mod dropout;
pub mod gradcheck;
mod loss;
mod lstm;
mod residual;

use rand::Rng;

use crate::tensor::Tensor;

pub use batchnorm::BatchNorm2d;
pub use conv::{Conv2d, GlobalAvgPool, MaxPool2d, Relu};
pub use dense::Dense;
pub use dropout::Dropout;
pub use loss::{softmax, softmax_cross_entropy};
pub use lstm::{BiLstm, LstmCell, SequenceEnds};
pub use residual::ResidualBlock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.dims());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, dims: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(dims))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(name: impl Into<String>, dims: &[usize], bound: f64, rng: &mut R) -> Self {
        let value = if bound > 0.0 {
            Tensor::from_fn(dims, |_| rng.random_range(-bound..=bound))
        } else {
            Tensor::zeros(dims)
        };
        Self::new(name, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

pub trait Layer {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> crate::Result<Tensor>;

    /// Returns the gradient with respect to the last forward input and
    /// accumulates parameter gradients.
    fn backward(&mut self, grad_out: &Tensor) -> crate::Result<Tensor>;

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));

    /// Persistent non-trainable state (batch-norm running statistics).
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor)) {}
}

pub fn zero_grads(layer: &mut dyn Layer) {
    layer.visit_params(&mut |p| p.zero_grad());
}

pub fn param_count(layer: &mut dyn Layer) -> usize {
    let mut n = 0;
    layer.visit_params(&mut |p| n += p.value.len());
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    GlobalAverage,
}

/// Architecture description of a single layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        ch: usize,
    },
    ResidualBlock {
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    },
    BiLstm {
        input: usize,
        hidden: usize,
    },
    Dropout {
        p: f64,
    },
    Pool {
        kind: PoolKind,
        size: usize,
    },
}

impl LayerSpec {
    pub fn validate(&self) -> crate::Result<()> {
        let dims_ok = match *self {
            LayerSpec::Dense { input, output } => input > 0 && output > 0,
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => in_ch > 0 && out_ch > 0 && kernel > 0 && stride > 0,
            LayerSpec::BatchNorm { ch } => ch > 0,
            LayerSpec::ResidualBlock { in_ch, out_ch, stride } => in_ch > 0 && out_ch > 0 && stride > 0,
            LayerSpec::BiLstm { input, hidden } => input > 0 && hidden > 0,
            LayerSpec::Dropout { p } => (0.0..1.0).contains(&p),
            LayerSpec::Pool { kind, size } => kind == PoolKind::GlobalAverage || size > 0,
        };
        if dims_ok {
            Ok(())
        } else {
            Err(crate::Error::InvalidConfig(format!("invalid layer spec {self:?}")))
        }
    }
}

pub(crate) fn expect_dims(t: &Tensor, n: usize, what: &str) -> crate::Result<()> {
    if t.ndim() != n {
        return Err(crate::Error::shape(format!(
            "{what}: expected {n}-D input, got {:?}",
            t.dims()
        )));
    }
    Ok(())
}

pub(crate) fn no_forward(what: &str) -> crate::Error {
    crate::Error::shape(format!("{what}: backward called before forward"))
}
