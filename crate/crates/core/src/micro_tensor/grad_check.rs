//! Central-difference gradient checking for the tape ops.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::state::{BnLayer, ConvLayer, ExecState, ParamStore, Var};
use super::{Mode, Tensor4, TensorError};
use crate::rng::rng_from;

pub const GRAD_CHECK_EPS: f64 = 1e-5;

/// Denominator floor so gradients that are zero analytically do not turn
/// round-off into huge ratios.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradCheckOp {
    Conv3x3,
    Conv3x3Stride2,
    Depthwise3x3,
    Pointwise,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    Sum,
    GlobalPool,
    MaxPool,
    Upsample,
    ConvBlockFull,
    ConvBlockSeparable,
}

impl GradCheckOp {
    pub const ALL: [GradCheckOp; 13] = [
        GradCheckOp::Conv3x3,
        GradCheckOp::Conv3x3Stride2,
        GradCheckOp::Depthwise3x3,
        GradCheckOp::Pointwise,
        GradCheckOp::BatchNormTrain,
        GradCheckOp::BatchNormEval,
        GradCheckOp::Relu,
        GradCheckOp::Sum,
        GradCheckOp::GlobalPool,
        GradCheckOp::MaxPool,
        GradCheckOp::Upsample,
        GradCheckOp::ConvBlockFull,
        GradCheckOp::ConvBlockSeparable,
    ];

    fn arity(self) -> usize {
        match self {
            GradCheckOp::Sum | GradCheckOp::GlobalPool => 2,
            _ => 1,
        }
    }

    /// Inputs whose values sit near a kink or a max tie get spread-out values instead.
    fn needs_spacing(self) -> bool {
        matches!(
            self,
            GradCheckOp::Relu
                | GradCheckOp::GlobalPool
                | GradCheckOp::MaxPool
                | GradCheckOp::ConvBlockFull
                | GradCheckOp::ConvBlockSeparable
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradCheckShape {
    pub batch: usize,
    pub channels: usize,
    pub side: usize,
}

impl GradCheckShape {
    pub fn new(batch: usize, channels: usize, side: usize) -> Self {
        GradCheckShape { batch, channels, side }
    }

    fn dims(self) -> [usize; 4] {
        [self.batch, self.channels, self.side, self.side]
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Default)]
struct Layers {
    conv: Vec<ConvLayer>,
    bn: Option<BnLayer>,
}

fn build(op: GradCheckOp, c: usize, params: &mut ParamStore, rng: &mut crate::rng::Rng) -> Layers {
    let mut l = Layers::default();
    match op {
        GradCheckOp::Conv3x3 => l.conv.push(params.conv_layer("c", c, c, 3, 1, 1, true, rng)),
        // as in the graph: no bias ahead of BN
        GradCheckOp::ConvBlockFull => l.conv.push(params.conv_layer("c", c, c, 3, 1, 1, false, rng)),
        GradCheckOp::Conv3x3Stride2 => l.conv.push(params.conv_layer("c", c, c + 1, 3, 2, 1, true, rng)),
        GradCheckOp::Depthwise3x3 => l.conv.push(params.conv_layer("c", c, c, 3, 1, c, false, rng)),
        GradCheckOp::Pointwise => l.conv.push(params.conv_layer("c", c, c + 2, 1, 1, 1, true, rng)),
        GradCheckOp::ConvBlockSeparable => {
            l.conv.push(params.conv_layer("dw", c, c, 3, 1, c, false, rng));
            l.conv.push(params.conv_layer("pw", c, c, 1, 1, 1, false, rng));
        }
        _ => {}
    }
    if matches!(
        op,
        GradCheckOp::BatchNormTrain | GradCheckOp::BatchNormEval | GradCheckOp::ConvBlockFull | GradCheckOp::ConvBlockSeparable
    ) {
        let bn = params.bn_layer("bn", c);
        // non-trivial affine and running statistics
        for (id, lo, hi) in [(bn.gamma, 0.5, 1.5), (bn.beta, -0.5, 0.5), (bn.running_mean, -0.5, 0.5), (bn.running_var, 0.5, 1.5)] {
            for v in params.get_mut(id).value.data_mut() {
                *v = rng.gen_range(lo..hi);
            }
        }
        l.bn = Some(bn);
    }
    l
}

fn apply(op: GradCheckOp, l: &Layers, s: &mut ExecState, xs: &[Var]) -> Result<Var, TensorError> {
    Ok(match op {
        GradCheckOp::Conv3x3 | GradCheckOp::Conv3x3Stride2 | GradCheckOp::Depthwise3x3 | GradCheckOp::Pointwise => {
            s.conv(xs[0], &l.conv[0])?
        }
        GradCheckOp::BatchNormTrain | GradCheckOp::BatchNormEval => s.batch_norm(xs[0], l.bn.as_ref().expect("bn"))?,
        GradCheckOp::Relu => s.relu(xs[0]),
        GradCheckOp::Sum => s.add(xs)?,
        GradCheckOp::GlobalPool => s.global_pool(xs[0], xs[1])?,
        GradCheckOp::MaxPool => s.max_pool(xs[0], 2)?,
        GradCheckOp::Upsample => s.upsample(xs[0], 2),
        GradCheckOp::ConvBlockFull | GradCheckOp::ConvBlockSeparable => {
            let mut y = s.relu(xs[0]);
            for c in &l.conv {
                y = s.conv(y, c)?;
            }
            s.batch_norm(y, l.bn.as_ref().expect("bn"))?
        }
    })
}

/// Distinct values at least `step` apart and at least `step / 2` from zero, shuffled.
fn spaced(dims: [usize; 4], rng: &mut crate::rng::Rng) -> Tensor4 {
    let n: usize = dims.iter().product();
    let step = (4.0 / n as f64).max(0.01);
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * step).collect();
    vals.shuffle(rng);
    Tensor4::from_vec(dims, vals).expect("sized")
}

fn loss(op: GradCheckOp, l: &Layers, s: &mut ExecState, inputs: &[Tensor4], weights: &Tensor4) -> Result<f64, TensorError> {
    s.reset_tape();
    let xs: Vec<Var> = inputs.iter().map(|t| s.leaf(t.clone())).collect();
    let y = apply(op, l, s, &xs)?;
    Ok(s.value(y).dot(weights))
}

/// Worst relative error between analytic and central-difference gradients of
/// `sum(w * op(x))` over every input element and every trainable parameter.
pub fn grad_check(op: GradCheckOp, shape: GradCheckShape, seed: u64) -> Result<f64, TensorError> {
    let mut rng = rng_from(seed);
    let mut params = ParamStore::new();
    let layers = build(op, shape.channels, &mut params, &mut rng);
    let inputs: Vec<Tensor4> = (0..op.arity())
        .map(|i| {
            if op.needs_spacing() && i == 0 {
                spaced(shape.dims(), &mut rng)
            } else {
                Tensor4::randn(shape.dims(), 1.0, &mut rng)
            }
        })
        .collect();
    let mode = if op == GradCheckOp::BatchNormEval { Mode::Eval } else { Mode::Train };
    let mut s = ExecState::new(params, mode);

    let xs: Vec<Var> = inputs.iter().map(|t| s.leaf(t.clone())).collect();
    let y = apply(op, &layers, &mut s, &xs)?;
    let weights = Tensor4::randn(s.value(y).shape(), 1.0, &mut rng);
    s.params.zero_grad();
    let grads = s.backward(vec![(y, weights.clone())])?;
    let analytic_inputs: Vec<Tensor4> = xs
        .iter()
        .map(|&x| grads.wrt(x).cloned().unwrap_or_else(|| Tensor4::zeros(s.value(x).shape())))
        .collect();

    let mut worst: f64 = 0.0;
    for (k, analytic) in analytic_inputs.iter().enumerate() {
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += GRAD_CHECK_EPS;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= GRAD_CHECK_EPS;
            let num = (loss(op, &layers, &mut s, &plus, &weights)? - loss(op, &layers, &mut s, &minus, &weights)?)
                / (2.0 * GRAD_CHECK_EPS);
            worst = worst.max(relative_error(analytic.data()[i], num));
        }
    }
    let ids: Vec<_> = s.params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let analytic = s.params.get(id).grad.clone();
        for i in 0..analytic.len() {
            let orig = s.params.get(id).value.data()[i];
            s.params.get_mut(id).value.data_mut()[i] = orig + GRAD_CHECK_EPS;
            let lp = loss(op, &layers, &mut s, &inputs, &weights)?;
            s.params.get_mut(id).value.data_mut()[i] = orig - GRAD_CHECK_EPS;
            let lm = loss(op, &layers, &mut s, &inputs, &weights)?;
            s.params.get_mut(id).value.data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic.data()[i], (lp - lm) / (2.0 * GRAD_CHECK_EPS)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv3x3_small_image() {
        let e = grad_check(GradCheckOp::Conv3x3, GradCheckShape::new(1, 3, 4), 1).unwrap();
        assert!(e <= 1e-4, "{e}");
    }

    #[test]
    fn global_pool_attention() {
        let e = grad_check(GradCheckOp::GlobalPool, GradCheckShape::new(2, 3, 4), 2).unwrap();
        assert!(e <= 1e-4, "{e}");
    }

    #[test]
    fn batch_norm_train_batch_four() {
        let e = grad_check(GradCheckOp::BatchNormTrain, GradCheckShape::new(4, 3, 3), 3).unwrap();
        assert!(e <= 1e-4, "{e}");
    }

    #[test]
    fn every_op_passes() {
        for op in GradCheckOp::ALL {
            for seed in 0..2 {
                let e = grad_check(op, GradCheckShape::new(2, 2, 4), seed).unwrap();
                assert!(e <= 1e-4, "{op:?} seed {seed}: {e}");
            }
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-12);
    }
}
