use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::kernels::{self, BnCache, OpCount};
use super::{standard_normal, Mode, Precision, Tensor4, TensorError};

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor4,
    pub grad: Tensor4,
    pub velocity: Tensor4,
    /// Running BN statistics are stored as non-trainable parameters.
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub groups: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

fn vector(c: usize, v: f64) -> Tensor4 {
    Tensor4::filled([1, c, 1, 1], v)
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor4, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            grad: Tensor4::zeros(value.shape()),
            velocity: Tensor4::zeros(value.shape()),
            value,
            trainable,
        });
        id
    }

    /// Conv with He-normal weights: std = sqrt(2 / fan_in).
    #[allow(clippy::too_many_arguments)]
    pub fn conv_layer(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        rng: &mut impl rand::Rng,
    ) -> ConvLayer {
        let cin_g = cin / groups;
        let std = (2.0 / (cin_g * kernel * kernel) as f64).sqrt();
        let mut w = Tensor4::zeros([cout, cin_g, kernel, kernel]);
        for v in w.data_mut() {
            *v = std * standard_normal(rng);
        }
        let weight = self.add(format!("{name}.weight"), w, true);
        let bias = bias.then(|| self.add(format!("{name}.bias"), vector(cout, 0.0), true));
        ConvLayer { weight, bias, stride, groups }
    }

    pub fn bn_layer(&mut self, name: &str, channels: usize) -> BnLayer {
        BnLayer {
            gamma: self.add(format!("{name}.gamma"), vector(channels, 1.0), true),
            beta: self.add(format!("{name}.beta"), vector(channels, 0.0), true),
            running_mean: self.add(format!("{name}.running_mean"), vector(channels, 0.0), false),
            running_var: self.add(format!("{name}.running_var"), vector(channels, 1.0), false),
        }
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

/// Handle to a value recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Relu(Var),
    Conv { x: Var, layer: ConvLayer },
    Bn { layer: BnLayer, cache: BnCache },
    Add(Vec<Var>),
    GlobalPool { a: Var, b: Var, gate: Vec<f64>, argmax: Vec<usize> },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, factor: usize },
}

#[derive(Debug, Clone)]
struct Entry {
    op: Op,
    /// Input of the op for the ones whose backward needs it beyond `Var`.
    input: Option<Var>,
    value: Tensor4,
}

/// Gradients with respect to every tape value reached by `backward`.
#[derive(Debug, Clone)]
pub struct Gradients {
    vars: Vec<Option<Tensor4>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor4> {
        self.vars.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Parameters, mode and the tape of one forward pass.
#[derive(Debug, Clone)]
pub struct ExecState {
    pub params: ParamStore,
    pub mode: Mode,
    pub precision: Precision,
    /// Weight of the old running statistic in Train-mode BN updates.
    pub bn_momentum: f64,
    tape: Vec<Entry>,
    mac_counter: u64,
    other_ops: u64,
}

impl ExecState {
    pub fn new(params: ParamStore, mode: Mode) -> Self {
        ExecState { params, mode, precision: Precision::Wide, bn_momentum: BN_MOMENTUM, tape: Vec::new(), mac_counter: 0, other_ops: 0 }
    }

    pub fn mac_counter(&self) -> u64 {
        self.mac_counter
    }

    /// Non-MAC arithmetic (adds, compares, normalisation, activations).
    pub fn other_ops(&self) -> u64 {
        self.other_ops
    }

    pub fn reset_counters(&mut self) {
        self.mac_counter = 0;
        self.other_ops = 0;
    }

    /// Drops recorded activations; parameters and counters are kept.
    pub fn reset_tape(&mut self) {
        self.tape.clear();
    }

    pub fn tape_len(&self) -> usize {
        self.tape.len()
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.tape[v.0].value
    }

    fn record(&mut self, op: Op, input: Option<Var>, mut value: Tensor4, count: OpCount) -> Var {
        if self.precision == Precision::Narrow {
            value.round_narrow();
        }
        self.mac_counter += count.macs;
        self.other_ops += count.other;
        self.tape.push(Entry { op, input, value });
        Var(self.tape.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor4) -> Var {
        self.record(Op::Leaf, None, value, OpCount::default())
    }

    /// Copies a value into a fresh leaf so no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (y, c) = kernels::relu(self.value(x));
        self.record(Op::Relu(x), None, y, c)
    }

    pub fn conv(&mut self, x: Var, layer: &ConvLayer) -> Result<Var, TensorError> {
        let w = &self.params.get(layer.weight).value;
        let bias = layer.bias.map(|b| self.params.get(b).value.data());
        let (y, c) = kernels::conv2d(self.value(x), w, bias, layer.stride, layer.groups)?;
        Ok(self.record(Op::Conv { x, layer: *layer }, None, y, c))
    }

    /// Batch statistics in `Train` mode (and running-stat update), running
    /// statistics in `Eval` mode.
    pub fn batch_norm(&mut self, x: Var, layer: &BnLayer) -> Result<Var, TensorError> {
        let train = self.mode == Mode::Train;
        let (mean, var) = if train {
            kernels::channel_moments(self.value(x))
        } else {
            (
                self.params.get(layer.running_mean).value.data().to_vec(),
                self.params.get(layer.running_var).value.data().to_vec(),
            )
        };
        let gamma = self.params.get(layer.gamma).value.data();
        let beta = self.params.get(layer.beta).value.data();
        let (y, cache, c) = kernels::batch_norm(self.value(x), gamma, beta, &mean, &var, BN_EPS, train)?;
        if train {
            let m = self.bn_momentum;
            for (id, batch) in [(layer.running_mean, &mean), (layer.running_var, &var)] {
                for (r, b) in self.params.get_mut(id).value.data_mut().iter_mut().zip(batch) {
                    *r = m * *r + (1.0 - m) * b;
                }
            }
        }
        Ok(self.record(Op::Bn { layer: *layer, cache }, Some(x), y, c))
    }

    pub fn add(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let vals: Vec<&Tensor4> = xs.iter().map(|&v| self.value(v)).collect();
        let (y, c) = kernels::add(&vals)?;
        Ok(self.record(Op::Add(xs.to_vec()), None, y, c))
    }

    /// `a + b * sigmoid(global_max(a))`.
    pub fn global_pool(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (y, gate, argmax, c) = kernels::global_pool(self.value(a), self.value(b))?;
        Ok(self.record(Op::GlobalPool { a, b, gate, argmax }, None, y, c))
    }

    pub fn max_pool(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        let (y, argmax, c) = kernels::max_pool(self.value(x), factor)?;
        Ok(self.record(Op::MaxPool { x, argmax }, None, y, c))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let y = kernels::upsample(self.value(x), factor);
        self.record(Op::Upsample { x, factor }, None, y, OpCount::default())
    }

    /// Reverse pass from the given output gradients. Parameter gradients are
    /// accumulated into the store; gradients for every reached value are returned.
    pub fn backward(&mut self, seeds: Vec<(Var, Tensor4)>) -> Result<Gradients, TensorError> {
        if self.tape.is_empty() {
            return Err(TensorError::NoForwardPass);
        }
        let mut grads: Vec<Option<Tensor4>> = vec![None; self.tape.len()];
        for (v, g) in seeds {
            if g.shape() != self.tape[v.0].value.shape() {
                return Err(TensorError::ShapeMismatch(format!("seed {:?} for value {:?}", g.shape(), self.tape[v.0].value.shape())));
            }
            accumulate(&mut grads, v, g);
        }
        for i in (0..self.tape.len()).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let entry = &self.tape[i];
            match &entry.op {
                Op::Leaf => {}
                Op::Relu(x) => {
                    let dx = kernels::relu_backward(&self.tape[x.0].value, &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Conv { x, layer } => {
                    let w = &self.params.get(layer.weight).value;
                    let (dx, dw, db) = kernels::conv2d_backward(&self.tape[x.0].value, w, &g, layer.stride, layer.groups);
                    let x = *x;
                    let layer = *layer;
                    accumulate(&mut grads, x, dx);
                    add_param_grad(&mut self.params, layer.weight, dw.data());
                    if let Some(b) = layer.bias {
                        add_param_grad(&mut self.params, b, &db);
                    }
                }
                Op::Bn { layer, cache } => {
                    let gamma = &self.params.get(layer.gamma).value;
                    let (dx, dgamma, dbeta) = kernels::batch_norm_backward(&g, cache, gamma.data());
                    let x = entry.input.expect("bn records its input");
                    let layer = *layer;
                    accumulate(&mut grads, x, dx);
                    add_param_grad(&mut self.params, layer.gamma, &dgamma);
                    add_param_grad(&mut self.params, layer.beta, &dbeta);
                }
                Op::Add(xs) => {
                    for &x in xs.clone().iter() {
                        accumulate(&mut grads, x, g.clone());
                    }
                }
                Op::GlobalPool { a, b, gate, argmax } => {
                    let (da, db) = kernels::global_pool_backward(&g, &self.tape[b.0].value, gate, argmax);
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::MaxPool { x, argmax } => {
                    let dx = kernels::max_pool_backward(&g, argmax, self.tape[x.0].value.shape());
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample { x, factor } => {
                    let dx = kernels::upsample_backward(&g, *factor);
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Ok(Gradients { vars: grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor4>], v: Var, g: Tensor4) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn add_param_grad(store: &mut ParamStore, id: ParamId, g: &[f64]) {
    let p = store.get_mut(id);
    if p.trainable {
        for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }
}
