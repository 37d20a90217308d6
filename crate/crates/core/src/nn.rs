//! Parameter storage and the small layer vocabulary the model is built from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{BatchStats, Graph, RngState, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Trainable parameters in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `new = (1 - momentum)·old + momentum·batch`.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// State for one forward pass: parameter leaves, dropout stream and
/// batch-norm statistics gathered along the way.
pub struct Ctx<'a> {
    store: &'a ParamStore,
    running: &'a [RunningStats],
    leaves: Vec<Option<Var>>,
    trainable: bool,
    pub mode: Mode,
    pub rng: RngState,
    pub bn_updates: Vec<(usize, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, running: &'a [RunningStats], mode: Mode, rng: RngState) -> Self {
        Ctx {
            store,
            running,
            leaves: vec![None; store.len()],
            trainable: true,
            mode,
            rng,
            bn_updates: Vec::new(),
        }
    }

    /// Parameters enter the graph as constants; nothing is differentiated.
    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Graph leaf for `id`, created on first use.
    pub fn param(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let value = self.store.get(id).value.clone();
        let v = if self.trainable {
            g.input(value)
        } else {
            g.constant(value)
        };
        self.leaves[id.0] = Some(v);
        v
    }

    /// Leaves created by this pass, indexed by parameter.
    pub fn leaves(&self) -> &[Option<Var>] {
        &self.leaves
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var, p: f64) -> Result<Var> {
        let train = self.train();
        g.dropout(x, p, &mut self.rng, train)
    }

    pub(crate) fn running(&self, layer: usize) -> &RunningStats {
        &self.running[layer]
    }
}

/// Seeded initializers.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform with the given fans.
    pub fn xavier(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(shape, a)
    }

    pub fn uniform(&mut self, shape: &[usize], a: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-a..a)).collect();
        Tensor::new(shape.to_vec(), data).expect("consistent shape")
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("consistent shape")
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = store.add(format!("{}.weight", name), init.xavier(&[d_in, d_out], d_in, d_out));
        let b = bias.then(|| store.add(format!("{}.bias", name), Tensor::zeros(&[d_out])));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(g, self.w);
        let b = self.b.map(|b| cx.param(g, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{}.gamma", name), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{}.beta", name), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, cx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = cx.param(g, self.gamma);
        let beta = cx.param(g, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Batch norm over time frames; statistics index into the model's running-stat table.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub layer: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, running: &mut Vec<RunningStats>, name: &str, d: usize) -> Self {
        running.push(RunningStats::new(d));
        BatchNorm {
            gamma: store.add(format!("{}.gamma", name), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{}.beta", name), Tensor::zeros(&[d])),
            layer: running.len() - 1,
        }
    }

    pub fn forward(&self, g: &mut Graph, cx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = cx.param(g, self.gamma);
        let beta = cx.param(g, self.beta);
        if cx.train() {
            let (y, stats) = g.batch_norm(x, gamma, beta, None, BN_EPS)?;
            cx.bn_updates.push((self.layer, stats.expect("train mode yields stats")));
            Ok(y)
        } else {
            let rs = cx.running(self.layer).clone();
            let (y, _) = g.batch_norm(x, gamma, beta, Some((&rs.mean, &rs.var)), BN_EPS)?;
            Ok(y)
        }
    }
}
