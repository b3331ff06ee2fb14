//! Named trainable parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Standard deviation of the Normal initializer for every trainable matrix.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<S: Real = f32> {
    pub name: String,
    pub tensor: Tensor<S>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Real = f32> {
    params: Vec<Param<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        tensor.requires_grad = true;
        self.params.push(Param { name, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<S>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let t = &mut self.params[id.0].tensor;
        t.requires_grad = trainable;
        if !trainable {
            t.grad = None;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Global Euclidean norm over all present gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.tensor.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| {
                let x = x.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, c: f64) {
        let c = S::from_f64(c);
        for g in self
            .params
            .iter_mut()
            .filter_map(|p| p.tensor.grad.as_mut())
        {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    /// Same parameters in another precision; trainability is preserved.
    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }

    /// Copies values of every same-named, same-shaped parameter in `other`.
    /// Returns the number of parameters copied.
    pub fn load_matching(&mut self, other: &ParamStore<S>) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(id) = other.find(&p.name) {
                let src = other.tensor(id);
                if src.shape() == p.tensor.shape() {
                    p.tensor.data_mut().copy_from_slice(src.data());
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Replaces parameter values from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::shape(
                "copy_values_from",
                format!("{} vs {} parameters", other.len(), self.len()),
            ));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::shape(
                    "copy_values_from",
                    format!("{} vs {}", dst.name, src.name),
                ));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

/// Seeded initializer: Normal(0, 0.02) for weights, zeros for biases,
/// ones for normalization gains.
pub struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<f32> {
        let dist = Normal::new(0.0f64, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng) as f32).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn weight(&mut self, rows: usize, cols: usize) -> Tensor<f32> {
        self.normal(&[rows, cols], INIT_STD)
    }

    pub fn zeros(&mut self, len: usize) -> Tensor<f32> {
        Tensor::zeros([len])
    }

    pub fn ones(&mut self, len: usize) -> Tensor<f32> {
        Tensor::full([len], 1.0)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }
}

/// Affine map `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore<f32>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.insert(format!("{name}.weight"), init.weight(d_in, d_out));
        let bias = bias.then(|| store.insert(format!("{name}.bias"), init.zeros(d_out)));
        Self { weight, bias }
    }

    pub fn forward<S: Real>(
        &self,
        g: &crate::autograd::Graph<S>,
        store: &ParamStore<S>,
        x: &crate::autograd::Var<S>,
    ) -> Result<crate::autograd::Var<S>> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, &w, b.as_ref())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.weight).chain(self.bias)
    }
}

/// Layer normalization parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Fixed normalization epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore<f32>, init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), init.ones(d)),
            bias: store.insert(format!("{name}.bias"), init.zeros(d)),
        }
    }

    pub fn forward<S: Real>(
        &self,
        g: &crate::autograd::Graph<S>,
        store: &ParamStore<S>,
        x: &crate::autograd::Var<S>,
    ) -> Result<crate::autograd::Var<S>> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, &gain, &bias, LAYER_NORM_EPS)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        [self.gain, self.bias].into_iter()
    }
}
