//! Reverse-mode automatic differentiation over a recording tape.
//!
//! Every op evaluates eagerly and, when any input participates in the
//! gradient, appends a node holding a backward closure. `Graph::backward`
//! walks the nodes in exact reverse recording order and sums the gradients
//! arriving at each node from all of its consumers.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

type Backward<S> = Box<dyn Fn(&[S], &[bool]) -> Vec<Option<Vec<S>>>>;

struct Node<S> {
    parents: Vec<Option<usize>>,
    backward: Option<Backward<S>>,
    numel: usize,
}

/// A value produced inside a [`Graph`].
#[derive(Clone)]
pub struct Var<S: Real = f32> {
    value: Rc<Tensor<S>>,
    node: Option<usize>,
}

impl<S: Real> Var<S> {
    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[S] {
        self.value.data()
    }

    pub fn rows(&self) -> usize {
        self.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.value.cols()
    }

    pub fn item(&self) -> S {
        self.value.item()
    }

    /// True when gradients will flow back through this value.
    pub fn tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::from_parts(self.value.shape().to_vec(), self.value.data().to_vec())
    }
}

impl<S: Real> std::fmt::Debug for Var<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node)
            .finish()
    }
}

/// Loss-reduction mode shared by the token losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

/// Boolean attention mask, `true` where attention is allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl Mask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

pub struct Graph<S: Real = f32> {
    nodes: RefCell<Vec<Node<S>>>,
    param_leaves: RefCell<Vec<(usize, ParamId)>>,
    param_vars: RefCell<HashMap<ParamId, Var<S>>>,
    grad_enabled: bool,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Graph<S> {
    /// A graph that records operations for a backward pass.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_leaves: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A graph that records nothing; intermediates are freed as soon as
    /// they are dropped.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, t: Tensor<S>) -> Var<S> {
        Var {
            value: Rc::new(t),
            node: None,
        }
    }

    /// An input whose gradient is wanted.
    pub fn leaf(&self, t: Tensor<S>) -> Var<S> {
        let node = self.grad_enabled.then(|| self.push_leaf(t.numel()));
        Var {
            value: Rc::new(t),
            node,
        }
    }

    /// Bind a stored parameter. Repeated calls return the same leaf so a
    /// shared weight has one gradient accumulator per graph.
    pub fn param(&self, store: &ParamStore<S>, id: ParamId) -> Var<S> {
        if let Some(v) = self.param_vars.borrow().get(&id) {
            return v.clone();
        }
        let p = store.tensor(id);
        let value = Rc::new(Tensor::from_parts(p.shape().to_vec(), p.data().to_vec()));
        let node = (self.grad_enabled && p.requires_grad).then(|| {
            let n = self.push_leaf(p.numel());
            self.param_leaves.borrow_mut().push((n, id));
            n
        });
        let v = Var { value, node };
        self.param_vars.borrow_mut().insert(id, v.clone());
        v
    }

    fn push_leaf(&self, numel: usize) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
            numel,
        });
        nodes.len() - 1
    }

    fn record<F>(
        &self,
        op: &'static str,
        value: Tensor<S>,
        inputs: &[&Var<S>],
        backward: F,
    ) -> Result<Var<S>>
    where
        F: Fn(&[S], &[bool]) -> Vec<Option<Vec<S>>> + 'static,
    {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let parents: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        let node = if self.grad_enabled && parents.iter().any(Option::is_some) {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents,
                backward: Some(Box::new(backward)),
                numel: value.numel(),
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Ok(Var {
            value: Rc::new(value),
            node,
        })
    }

    /// Backpropagate from a scalar. Consumes the recorded tape.
    pub fn backward(self, loss: &Var<S>) -> Result<Gradients<S>> {
        if loss.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", loss.shape()),
            ));
        }
        let mut nodes = self.nodes.into_inner();
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        if let Some(root) = loss.node {
            grads[root] = Some(vec![S::one()]);
            for i in (0..=root).rev() {
                let Some(backward) = nodes[i].backward.take() else {
                    continue;
                };
                let Some(g) = grads[i].take() else {
                    continue;
                };
                let parents = std::mem::take(&mut nodes[i].parents);
                let needs: Vec<bool> = parents.iter().map(Option::is_some).collect();
                let parent_grads = backward(&g, &needs);
                for (p, pg) in parents.into_iter().zip(parent_grads) {
                    let (Some(p), Some(pg)) = (p, pg) else {
                        continue;
                    };
                    debug_assert_eq!(pg.len(), nodes[p].numel);
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(Gradients {
            grads,
            param_leaves: self.param_leaves.into_inner(),
        })
    }
}

/// Gradients of a scalar with respect to the graph's leaves.
pub struct Gradients<S: Real = f32> {
    grads: Vec<Option<Vec<S>>>,
    param_leaves: Vec<(usize, ParamId)>,
}

impl<S: Real> Gradients<S> {
    pub fn wrt(&self, v: &Var<S>) -> Option<&[S]> {
        v.node.and_then(|n| self.grads[n].as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[S]> {
        self.param_leaves
            .iter()
            .find(|(_, p)| *p == id)
            .and_then(|(n, _)| self.grads[*n].as_deref())
    }

    /// Sum the parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<S>) {
        for &(node, id) in &self.param_leaves {
            let Some(g) = self.grads[node].as_deref() else {
                continue;
            };
            let t = store.tensor_mut(id);
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
    }
}

fn dims2<S: Real>(op: &'static str, v: &Var<S>) -> Result<(usize, usize)> {
    match v.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

fn same_shape<S: Real>(op: &'static str, a: &Var<S>, b: &Var<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn gelu<S: Real>(x: S) -> S {
    let half = S::from_f64(0.5);
    half * x * (S::one() + (x * S::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<S: Real>(x: S) -> S {
    let half = S::from_f64(0.5);
    let cdf = half * (S::one() + (x * S::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * S::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

impl<S: Real> Graph<S> {
    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let (m, k) = dims2("matmul", a)?;
        let (k2, n) = dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.data(),
            (k as isize, 1),
            b.data(),
            (n as isize, 1),
            S::zero(),
            &mut out,
            (n as isize, 1),
        );
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.record(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![S::zero(); m * k];
                    S::gemm(
                        m,
                        n,
                        k,
                        S::one(),
                        g,
                        (n as isize, 1),
                        bv.data(),
                        (1, n as isize),
                        S::zero(),
                        &mut ga,
                        (k as isize, 1),
                    );
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![S::zero(); k * n];
                    S::gemm(
                        k,
                        m,
                        n,
                        S::one(),
                        av.data(),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        S::zero(),
                        &mut gb,
                        (n as isize, 1),
                    );
                    gb
                });
                vec![ga, gb]
            },
        )
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_t(&self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let (m, k) = dims2("matmul_t", a)?;
        let (n, k2) = dims2("matmul_t", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_t",
                format!("[{m}x{k}] x [{n}x{k2}]^T"),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.data(),
            (k as isize, 1),
            b.data(),
            (1, k as isize),
            S::zero(),
            &mut out,
            (n as isize, 1),
        );
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.record(
            "matmul_t",
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![S::zero(); m * k];
                    S::gemm(
                        m,
                        n,
                        k,
                        S::one(),
                        g,
                        (n as isize, 1),
                        bv.data(),
                        (k as isize, 1),
                        S::zero(),
                        &mut ga,
                        (k as isize, 1),
                    );
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![S::zero(); n * k];
                    S::gemm(
                        n,
                        m,
                        k,
                        S::one(),
                        g,
                        (1, n as isize),
                        av.data(),
                        (k as isize, 1),
                        S::zero(),
                        &mut gb,
                        (k as isize, 1),
                    );
                    gb
                });
                vec![ga, gb]
            },
        )
    }

    pub fn transpose(&self, x: &Var<S>) -> Result<Var<S>> {
        let (r, c) = dims2("transpose", x)?;
        let d = x.data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.record(
            "transpose",
            Tensor::from_parts(vec![c, r], out),
            &[x],
            move |g, _| {
                let mut gx = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gx)]
            },
        )
    }

    pub fn add(&self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        same_shape("add", a, b)?;
        let out = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| *x + *y)
            .collect();
        self.record(
            "add",
            Tensor::from_parts(a.shape().to_vec(), out),
            &[a, b],
            |g, needs| vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())],
        )
    }

    pub fn sub(&self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        same_shape("sub", a, b)?;
        let out = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| *x - *y)
            .collect();
        self.record(
            "sub",
            Tensor::from_parts(a.shape().to_vec(), out),
            &[a, b],
            |g, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.iter().map(|x| -*x).collect()),
                ]
            },
        )
    }

    /// Element-wise product.
    pub fn mul(&self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        same_shape("mul", a, b)?;
        let out = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.record(
            "mul",
            Tensor::from_parts(a.shape().to_vec(), out),
            &[a, b],
            move |g, needs| {
                vec![
                    needs[0].then(|| g.iter().zip(bv.data()).map(|(g, y)| *g * *y).collect()),
                    needs[1].then(|| g.iter().zip(av.data()).map(|(g, x)| *g * *x).collect()),
                ]
            },
        )
    }

    /// Adds a length-`d` vector to every row of `x[..×d]`.
    pub fn add_row(&self, x: &Var<S>, bias: &Var<S>) -> Result<Var<S>> {
        let d = x.cols();
        if bias.value.numel() != d {
            return Err(Error::shape(
                "add_row",
                format!("rows of {d} vs bias {:?}", bias.shape()),
            ));
        }
        let b = bias.data();
        let mut out = x.data().to_vec();
        out.chunks_mut(d.max(1))
            .for_each(|row| row.iter_mut().zip(b).for_each(|(o, b)| *o += *b));
        self.record(
            "add_row",
            Tensor::from_parts(x.shape().to_vec(), out),
            &[x, bias],
            move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut gb = vec![S::zero(); d];
                    g.chunks(d.max(1))
                        .for_each(|row| gb.iter_mut().zip(row).for_each(|(a, r)| *a += *r));
                    gb
                });
                vec![needs[0].then(|| g.to_vec()), gb]
            },
        )
    }

    /// `x[..×k] · w[k×n] (+ b[n])`.
    pub fn linear(&self, x: &Var<S>, w: &Var<S>, b: Option<&Var<S>>) -> Result<Var<S>> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(&y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&self, x: &Var<S>, c: f64) -> Result<Var<S>> {
        let c = S::from_f64(c);
        let out = x.data().iter().map(|v| *v * c).collect();
        self.record(
            "scale",
            Tensor::from_parts(x.shape().to_vec(), out),
            &[x],
            move |g, _| vec![Some(g.iter().map(|v| *v * c).collect())],
        )
    }

    /// Multiplies every element of `x` by the scalar `s`.
    pub fn scale_by(&self, x: &Var<S>, s: &Var<S>) -> Result<Var<S>> {
        if s.value.numel() != 1 {
            return Err(Error::shape(
                "scale_by",
                format!("scalar expected, got {:?}", s.shape()),
            ));
        }
        let sv = s.item();
        let out = x.data().iter().map(|v| *v * sv).collect();
        let xv = x.value.clone();
        self.record(
            "scale_by",
            Tensor::from_parts(x.shape().to_vec(), out),
            &[x, s],
            move |g, needs| {
                vec![
                    needs[0].then(|| g.iter().map(|v| *v * sv).collect()),
                    needs[1].then(|| vec![g.iter().zip(xv.data()).map(|(g, x)| *g * *x).sum()]),
                ]
            },
        )
    }

    pub fn exp(&self, x: &Var<S>) -> Result<Var<S>> {
        let out: Vec<S> = x.data().iter().map(|v| v.exp()).collect();
        let y = Rc::new(out.clone());
        self.record(
            "exp",
            Tensor::from_parts(x.shape().to_vec(), out),
            &[x],
            move |g, _| vec![Some(g.iter().zip(y.iter()).map(|(g, y)| *g * *y).collect())],
        )
    }

    pub fn sum(&self, x: &Var<S>) -> Result<Var<S>> {
        let n = x.value.numel();
        let s = x.data().iter().copied().sum();
        self.record("sum", Tensor::scalar(s), &[x], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self, x: &Var<S>) -> Result<Var<S>> {
        let n = x.value.numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(&s, 1.0 / n as f64)
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&self, x: &Var<S>, gain: &Var<S>, bias: &Var<S>, eps: f64) -> Result<Var<S>> {
        let d = x.cols();
        if d == 0 || gain.value.numel() != d || bias.value.numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "rows of {d}, gain {:?}, bias {:?}",
                    gain.shape(),
                    bias.shape()
                ),
            ));
        }
        let eps = S::from_f64(eps);
        let inv_d = S::from_f64(1.0 / d as f64);
        let rows = x.rows();
        let mut xhat = vec![S::zero(); rows * d];
        let mut inv_std = vec![S::zero(); rows];
        for (r, row) in x.data().chunks(d).enumerate() {
            let mu = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|v| (*v - mu) * (*v - mu)).sum::<S>() * inv_d;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (*v - mu) * is;
            }
        }
        let (gv, bv) = (gain.data(), bias.data());
        let out: Vec<S> = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(gv).zip(bv).map(|((h, g), b)| *h * *g + *b))
            .collect();
        let gain_v = gain.value.clone();
        self.record(
            "layer_norm",
            Tensor::from_parts(x.shape().to_vec(), out),
            &[x, gain, bias],
            move |g, needs| {
                let gv = gain_v.data();
                let ggain = needs[1].then(|| {
                    let mut acc = vec![S::zero(); d];
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((a, gi), hi) in acc.iter_mut().zip(grow).zip(hrow) {
                            *a += *gi * *hi;
                        }
                    }
                    acc
                });
                let gbias = needs[2].then(|| {
                    let mut acc = vec![S::zero(); d];
                    g.chunks(d)
                        .for_each(|row| acc.iter_mut().zip(row).for_each(|(a, r)| *a += *r));
                    acc
                });
                let gx = needs[0].then(|| {
                    let mut gx = vec![S::zero(); rows * d];
                    for r in 0..rows {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut mean_gh = S::zero();
                        let mut mean_ghh = S::zero();
                        for i in 0..d {
                            let gh = grow[i] * gv[i];
                            mean_gh += gh;
                            mean_ghh += gh * hrow[i];
                        }
                        mean_gh *= inv_d;
                        mean_ghh *= inv_d;
                        for i in 0..d {
                            let gh = grow[i] * gv[i];
                            gx[r * d + i] = inv_std[r] * (gh - mean_gh - hrow[i] * mean_ghh);
                        }
                    }
                    gx
                });
                vec![gx, ggain, gbias]
            },
        )
    }

    /// Row-wise softmax of `x / temperature`. Masked-out entries get
    /// probability exactly zero; every row needs at least one allowed entry.
    pub fn softmax(&self, x: &Var<S>, temperature: f64, mask: Option<&Mask>) -> Result<Var<S>> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be > 0, got {temperature}"
            )));
        }
        let n = x.cols();
        let rows = x.rows();
        if let Some(m) = mask {
            if m.rows != rows || m.cols != n {
                return Err(Error::shape(
                    "softmax",
                    format!("mask {}x{} vs {rows}x{n}", m.rows, m.cols),
                ));
            }
        }
        let inv_t = S::from_f64(1.0 / temperature);
        let mut out = vec![S::zero(); rows * n];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let allowed = |j: usize| mask.is_none_or(|m| m.allowed[r * n + j]);
            let mut mx: Option<S> = None;
            for (j, v) in row.iter().enumerate() {
                if allowed(j) {
                    mx = Some(mx.map_or(*v, |m| m.max(*v)));
                }
            }
            let Some(mx) = mx else {
                return Err(Error::InvalidArgument(format!(
                    "softmax row {r} fully masked"
                )));
            };
            let o = &mut out[r * n..(r + 1) * n];
            let mut z = S::zero();
            for j in 0..n {
                if allowed(j) {
                    let e = ((row[j] - mx) * inv_t).exp();
                    o[j] = e;
                    z += e;
                }
            }
            o.iter_mut().for_each(|v| *v = *v / z);
        }
        let p = Rc::new(out.clone());
        self.record(
            "softmax",
            Tensor::from_parts(x.shape().to_vec(), out),
            &[x],
            move |g, _| {
                let mut gx = vec![S::zero(); rows * n];
                for r in 0..rows {
                    let pr = &p[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: S = pr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for j in 0..n {
                        gx[r * n + j] = pr[j] * (gr[j] - dot) * inv_t;
                    }
                }
                vec![Some(gx)]
            },
        )
    }

    /// GELU, exact erf form.
    pub fn gelu(&self, x: &Var<S>) -> Result<Var<S>> {
        let out = x.data().iter().map(|v| gelu(*v)).collect();
        let xv = x.value.clone();
        self.record(
            "gelu",
            Tensor::from_parts(x.shape().to_vec(), out),
            &[x],
            move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(xv.data())
                        .map(|(g, x)| *g * gelu_grad(*x))
                        .collect(),
                )]
            },
        )
    }

    /// GEGLU gate: the first half of the last axis times GELU of the second half.
    pub fn geglu(&self, x: &Var<S>) -> Result<Var<S>> {
        let d = x.cols();
        if !d.is_multiple_of(2) {
            return Err(Error::shape("geglu", format!("last extent {d} is odd")));
        }
        let h = d / 2;
        let rows = x.rows();
        let xd = x.data();
        let mut out = Vec::with_capacity(rows * h);
        for row in xd.chunks(d.max(1)) {
            out.extend(row[..h].iter().zip(&row[h..]).map(|(a, b)| *a * gelu(*b)));
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = h;
        let xv = x.value.clone();
        self.record(
            "geglu",
            Tensor::from_parts(shape, out),
            &[x],
            move |g, _| {
                let xd = xv.data();
                let mut gx = vec![S::zero(); rows * d];
                for r in 0..rows {
                    for i in 0..h {
                        let a = xd[r * d + i];
                        let b = xd[r * d + h + i];
                        let gi = g[r * h + i];
                        gx[r * d + i] = gi * gelu(b);
                        gx[r * d + h + i] = gi * a * gelu_grad(b);
                    }
                }
                vec![Some(gx)]
            },
        )
    }

    /// Token negative log-likelihood of `logits[T×V]` against `targets`,
    /// skipping positions equal to `ignore`.
    pub fn cross_entropy(
        &self,
        logits: &Var<S>,
        targets: &[usize],
        ignore: Option<usize>,
        reduction: Reduction,
    ) -> Result<Var<S>> {
        let (t, v) = dims2("cross_entropy", logits)?;
        if targets.len() != t {
            return Err(Error::shape(
                "cross_entropy",
                format!("{t} rows vs {} targets", targets.len()),
            ));
        }
        let ld = logits.data();
        let mut probs = vec![S::zero(); t * v];
        let mut total = S::zero();
        let mut counted = 0usize;
        for (r, &tgt) in targets.iter().enumerate() {
            if Some(tgt) == ignore {
                continue;
            }
            if tgt >= v {
                return Err(Error::InvalidArgument(format!(
                    "target id {tgt} out of range for {v} classes"
                )));
            }
            let row = &ld[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|x| (*x - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[tgt];
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            probs[r * v + tgt] -= S::one();
            counted += 1;
        }
        let scale = match reduction {
            Reduction::Sum => S::one(),
            Reduction::Mean if counted > 0 => S::from_f64(1.0 / counted as f64),
            Reduction::Mean => S::zero(),
        };
        self.record(
            "cross_entropy",
            Tensor::scalar(total * scale),
            &[logits],
            move |g, _| {
                let c = g[0] * scale;
                vec![Some(probs.iter().map(|p| *p * c).collect())]
            },
        )
    }

    /// Mean binary cross-entropy of logits against {0,1} labels.
    pub fn bce_with_logits(&self, logits: &Var<S>, labels: &[f64]) -> Result<Var<S>> {
        let n = logits.value.numel();
        if labels.len() != n || n == 0 {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{n} logits vs {} labels", labels.len()),
            ));
        }
        let z = logits.data();
        let mut total = S::zero();
        let mut grad = Vec::with_capacity(n);
        for (zi, yi) in z.iter().zip(labels) {
            let y = S::from_f64(*yi);
            let zi = *zi;
            total += zi.max(S::zero()) - zi * y + (S::one() + (-zi.abs()).exp()).ln();
            let sig = S::one() / (S::one() + (-zi).exp());
            grad.push(sig - y);
        }
        let inv_n = S::from_f64(1.0 / n as f64);
        self.record(
            "bce_with_logits",
            Tensor::scalar(total * inv_n),
            &[logits],
            move |g, _| {
                let c = g[0] * inv_n;
                vec![Some(grad.iter().map(|v| *v * c).collect())]
            },
        )
    }

    /// Scales each row to unit Euclidean norm; zero rows are an error.
    pub fn l2_normalize(&self, x: &Var<S>) -> Result<Var<S>> {
        let d = x.cols();
        let rows = x.rows();
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for (r, row) in x.data().chunks(d.max(1)).enumerate() {
            let nrm = row.iter().map(|v| *v * *v).sum::<S>().sqrt();
            if !(nrm > S::zero()) {
                return Err(Error::InvalidArgument(format!(
                    "l2_normalize: row {r} has zero norm"
                )));
            }
            norms.push(nrm);
            out.extend(row.iter().map(|v| *v / nrm));
        }
        let y = Rc::new(out.clone());
        self.record(
            "l2_normalize",
            Tensor::from_parts(x.shape().to_vec(), out),
            &[x],
            move |g, _| {
                let mut gx = vec![S::zero(); rows * d];
                for r in 0..rows {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: S = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for i in 0..d {
                        gx[r * d + i] = (gr[i] - yr[i] * dot) / norms[r];
                    }
                }
                vec![Some(gx)]
            },
        )
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, x: &Var<S>, start: usize, end: usize) -> Result<Var<S>> {
        let (r, c) = dims2("slice_rows", x)?;
        if start > end || end > r {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} of {r} rows"),
            ));
        }
        let out = x.data()[start * c..end * c].to_vec();
        self.record(
            "slice_rows",
            Tensor::from_parts(vec![end - start, c], out),
            &[x],
            move |g, _| {
                let mut gx = vec![S::zero(); r * c];
                gx[start * c..end * c].copy_from_slice(g);
                vec![Some(gx)]
            },
        )
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, x: &Var<S>, start: usize, end: usize) -> Result<Var<S>> {
        let (r, c) = dims2("slice_cols", x)?;
        if start > end || end > c {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {c} cols"),
            ));
        }
        let w = end - start;
        let out: Vec<S> = x
            .data()
            .chunks(c.max(1))
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        self.record(
            "slice_cols",
            Tensor::from_parts(vec![r, w], out),
            &[x],
            move |g, _| {
                let mut gx = vec![S::zero(); r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![Some(gx)]
            },
        )
    }

    pub fn concat_rows(&self, parts: &[&Var<S>]) -> Result<Var<S>> {
        let c = parts
            .first()
            .map(|p| p.cols())
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let mut sizes = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        for p in parts {
            let (pr, pc) = dims2("concat_rows", p)?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("{pc} cols vs {c}")));
            }
            sizes.push(pr * pc);
            out.extend_from_slice(p.data());
        }
        let rows = out.len() / c.max(1);
        self.record(
            "concat_rows",
            Tensor::from_parts(vec![rows, c], out),
            parts,
            move |g, needs| {
                let mut off = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&s, &need)| {
                        let part = need.then(|| g[off..off + s].to_vec());
                        off += s;
                        part
                    })
                    .collect()
            },
        )
    }

    pub fn concat_cols(&self, parts: &[&Var<S>]) -> Result<Var<S>> {
        let r = parts
            .first()
            .map(|p| p.rows())
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = dims2("concat_cols", p)?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("{pr} rows vs {r}")));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        self.record(
            "concat_cols",
            Tensor::from_parts(vec![r, c], out),
            parts,
            move |g, needs| {
                let mut off = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let part = need.then(|| {
                            let mut gp = Vec::with_capacity(r * w);
                            for i in 0..r {
                                gp.extend_from_slice(&g[i * c + off..i * c + off + w]);
                            }
                            gp
                        });
                        off += w;
                        part
                    })
                    .collect()
            },
        )
    }

    /// Embedding lookup: rows of `table[V×d]` selected by `ids`.
    pub fn gather_rows(&self, table: &Var<S>, ids: &[usize]) -> Result<Var<S>> {
        let (v, d) = dims2("gather_rows", table)?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!(
                "row id {bad} out of range for {v} rows"
            )));
        }
        let td = table.data();
        let out: Vec<S> = ids
            .iter()
            .flat_map(|&i| td[i * d..(i + 1) * d].iter().copied())
            .collect();
        let ids = ids.to_vec();
        self.record(
            "gather_rows",
            Tensor::from_parts(vec![ids.len(), d], out),
            &[table],
            move |g, _| {
                let mut gt = vec![S::zero(); v * d];
                for (k, &i) in ids.iter().enumerate() {
                    gt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[k * d..(k + 1) * d])
                        .for_each(|(a, b)| *a += *b);
                }
                vec![Some(gt)]
            },
        )
    }
}
