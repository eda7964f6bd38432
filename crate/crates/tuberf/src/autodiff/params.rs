//! Registry of trainable tensors and their accumulated gradients.

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
    trainable: bool,
}

/// Named trainable parameters. Gradients accumulate additively across
/// backward passes until zeroed by the optimizer.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<Entry>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.entries.push(Entry {
            name: name.into(),
            value,
            grad,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        debug_assert_eq!(self.entries[id.0].grad.shape(), g.shape());
        for (o, &v) in self.entries[id.0].grad.data_mut().iter_mut().zip(g.data()) {
            *o += v;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Flat copy of all parameter values, in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.extend_from_slice(e.value.data());
        }
        out
    }
}

/// Adam optimizer state: per-parameter first/second moments plus step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &Params, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect(),
            second: params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect(),
        }
    }

    /// Extend moment buffers for parameters registered after construction.
    pub fn sync(&mut self, params: &Params) {
        for id in params.ids().skip(self.first.len()) {
            self.first.push(Tensor::zeros(params.value(id).shape()));
            self.second.push(Tensor::zeros(params.value(id).shape()));
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor, &Tensor) {
        (&self.first[id.0], &self.second[id.0])
    }

    pub(crate) fn restore(
        &mut self,
        step: u64,
        first: Vec<Tensor>,
        second: Vec<Tensor>,
    ) {
        self.step = step;
        self.first = first;
        self.second = second;
    }
}

/// One Adam update with bias correction; gradients are zeroed afterward.
pub fn adam_step(params: &mut Params, state: &mut AdamState) {
    state.sync(params);
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.eps);
    for id in 0..params.len() {
        if !params.entries[id].trainable {
            continue;
        }
        let grad = params.entries[id].grad.data().to_vec();
        let m = state.first[id].data_mut();
        let v = state.second[id].data_mut();
        let value = params.entries[id].value.data_mut();
        for i in 0..grad.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    params.zero_grads();
}
