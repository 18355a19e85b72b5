//! Parameterized layers. Each layer only holds ids into a [`ParamStore`];
//! forward passes borrow the store immutably and backward passes accumulate
//! into its gradient slots.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ops::{self, BnCache, BnMode, BN_MOMENTUM};
use crate::tensor::{BufferId, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }

    fn bn(self) -> BnMode {
        match self {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
        }
    }
}

/// Pending running-statistics update produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    mean: BufferId,
    var: BufferId,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Per-call forward state. Forward passes never touch the store; the
/// statistics they would update are queued here and applied with
/// [`Ctx::commit`].
#[derive(Debug)]
pub struct Ctx {
    pub mode: Mode,
    pub bn_updates: Vec<BnUpdate>,
    pub dropout_rng: Option<ChaCha8Rng>,
}

impl Ctx {
    pub fn train() -> Self {
        Self { mode: Mode::Train, bn_updates: Vec::new(), dropout_rng: None }
    }

    pub fn eval() -> Self {
        Self { mode: Mode::Eval, bn_updates: Vec::new(), dropout_rng: None }
    }

    pub fn with_dropout_rng(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    /// Apply queued running-statistics updates.
    pub fn commit(&mut self, store: &mut ParamStore) {
        for up in self.bn_updates.drain(..) {
            blend(store.buffer_mut(up.mean), &up.batch_mean);
            blend(store.buffer_mut(up.var), &up.batch_var);
        }
    }
}

fn blend(running: &mut Tensor, batch: &[f64]) {
    for (r, b) in running.data_mut().iter_mut().zip(batch) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
    }
}

fn init_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = init_bound(cin * kernel);
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[cout, cin, kernel], bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::uniform(&[cout], bound, rng));
        Self { weight, bias, pad }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        ops::conv1d(x, store.value(self.weight), store.value(self.bias), self.pad)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let (dx, dw, db) = ops::conv1d_backward(x, store.value(self.weight), self.pad, grad_out)?;
        store.grad_mut(self.weight).add_assign(&dw)?;
        store.grad_mut(self.bias).add_assign(&db)?;
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let bound = init_bound(din);
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[dout, din], bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::uniform(&[dout], bound, rng));
        Self { weight, bias }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, store.value(self.weight), store.value(self.bias))
    }

    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let (dx, dw, db) = ops::linear_backward(x, store.value(self.weight), grad_out)?;
        store.grad_mut(self.weight).add_assign(&dw)?;
        store.grad_mut(self.bias).add_assign(&db)?;
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, BnCache)> {
        let (y, cache) = ops::batch_norm1d(
            x,
            store.value(self.gamma),
            store.value(self.beta),
            store.buffer(self.running_mean),
            store.buffer(self.running_var),
            ctx.mode.bn(),
        )?;
        if ctx.mode.is_train() {
            ctx.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean: cache.batch_mean.clone(),
                batch_var: cache.batch_var_unbiased.clone(),
            });
        }
        Ok((y, cache))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &BnCache, grad_out: &Tensor) -> Result<Tensor> {
        let (dx, dg, db) = ops::batch_norm1d_backward(cache, store.value(self.gamma), grad_out)?;
        store.grad_mut(self.gamma).add_assign(&dg)?;
        store.grad_mut(self.beta).add_assign(&db)?;
        Ok(dx)
    }
}
