//! Minimal dense NCHW tensor engine with reverse-mode differentiation.
//!
//! Only the operations the pyramid compiler, the toy backbone and the
//! prediction heads emit are supported. Values are recorded on a tape owned by
//! an [`ExecState`]; [`ExecState::backward`] walks the tape in reverse and
//! accumulates parameter gradients into its [`ParamStore`].

mod checkpoint;
mod graph_exec;
mod grad_check;
pub mod kernels;
mod optim;
mod state;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, restore_checkpoint, save_checkpoint, CheckpointEntry, CheckpointManifest};
pub use graph_exec::{forward, instrumented_counts, GraphModule};
pub use grad_check::{grad_check, relative_error, GradCheckOp, GradCheckShape, GRAD_CHECK_EPS};
pub use optim::{sgd_step, SgdConfig};
pub use state::{BnLayer, ConvLayer, ExecState, Gradients, Param, ParamId, ParamStore, Var, BN_EPS, BN_MOMENTUM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// `Wide` keeps every activation in f64. `Narrow` rounds each op's output
/// through f32, emulating single-precision storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Wide,
    Narrow,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape-mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no-forward-pass: tape is empty")]
    NoForwardPass,
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Dense `(batch, channels, height, width)` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        assert!(shape.iter().all(|&d| d >= 1), "all dims must be >= 1: {shape:?}");
        Tensor4 { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        let mut t = Tensor4::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) || data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Samples every element from `N(0, std^2)`.
    pub fn randn(shape: [usize; 4], std: f64, rng: &mut impl rand::Rng) -> Self {
        let mut t = Tensor4::zeros(shape);
        for v in &mut t.data {
            *v = std * standard_normal(rng);
        }
        t
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Copies example `n` out as a batch of one.
    pub fn example(&self, n: usize) -> Tensor4 {
        let per = self.len() / self.batch();
        Tensor4 {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Concatenates along the batch axis.
    pub fn stack_batch(items: &[Tensor4]) -> Result<Tensor4, TensorError> {
        let first = items.first().ok_or_else(|| TensorError::ShapeMismatch("empty batch".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            if t.shape[1..] != [c, h, w] {
                return Err(TensorError::ShapeMismatch(format!("{:?} vs {:?}", t.shape, first.shape)));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 { shape: [n, c, h, w], data })
    }

    pub fn dot(&self, other: &Tensor4) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub(crate) fn round_narrow(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Box-Muller standard normal draw.
pub fn standard_normal(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructors_check_shapes() {
        assert!(Tensor4::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor4::from_vec([1, 0, 2, 2], vec![]).is_err());
        let t = Tensor4::from_vec([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.example(1).data(), &[3.0, 4.0]);
        let s = Tensor4::stack_batch(&[t.example(0), t.example(1)]).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-12);
    }
}
