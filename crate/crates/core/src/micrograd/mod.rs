//! Minimal tensor and reverse-mode autodiff engine: exactly the layers the
//! landmark network uses, plus Adam and a central-difference gradient checker.

mod adam;
mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::finite_difference_check;
pub use graph::{Graph, Mode, NodeId};
pub use scalar::{gemm, Scalar, Trans};
pub use tensor::Tensor;

use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum MicrogradError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },
    #[error("dropout rate must lie in [0, 1), got {0}")]
    DropoutRate(f64),
}

/// Layer kinds supported by the engine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    MaxPool2x2,
    Dense,
    Relu,
    Softmax,
    Dropout,
}

/// Static description of one layer of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub fan_in: usize,
    pub fan_out: usize,
    pub dropout_rate: f64,
}

pub fn conv3x3_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, MicrogradError> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let k = g.input(kernels.clone());
    let b = g.input(bias.clone());
    let y = g.conv3x3(x, k, b)?;
    Ok(g.value(y).clone())
}

pub fn maxpool2x2_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, MicrogradError> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let y = g.maxpool2x2(x)?;
    Ok(g.value(y).clone())
}

pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, MicrogradError> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let w = g.input(weights.clone());
    let b = g.input(bias.clone());
    let y = g.dense(x, w, b)?;
    Ok(g.value(y).clone())
}

pub fn softmax<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let y = g.softmax(x);
    g.value(y).clone()
}

pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>, MicrogradError> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let y = g.dropout(x, rate, mode, rng)?;
    Ok(g.value(y).clone())
}
