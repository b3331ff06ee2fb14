//! Attention and feed-forward building blocks shared by the slide encoder
//! and the report decoder.

use crate::autograd::{Graph, Mask, Var};
use crate::error::{Error, Result};
use crate::params::{Init, Linear, ParamId, ParamStore};
use crate::tensor::Real;

/// Scaled dot-product attention split into `heads` column groups.
/// Returns the concatenated head outputs and the attention matrix of the
/// first head.
pub fn attention<S: Real>(
    g: &Graph<S>,
    q: &Var<S>,
    k: &Var<S>,
    v: &Var<S>,
    heads: usize,
    mask: Option<&Mask>,
) -> Result<(Var<S>, Var<S>)> {
    let d = q.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::InvalidArgument(format!(
            "width {d} is not divisible by {heads} heads"
        )));
    }
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let dh = d / heads;
    let temperature = (dh as f64).sqrt();
    if heads == 1 {
        let scores = g.matmul_t(q, k)?;
        let weights = g.softmax(&scores, temperature, mask)?;
        let out = g.matmul(&weights, v)?;
        return Ok((out, weights));
    }
    let mut outs = Vec::with_capacity(heads);
    let mut first = None;
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, a, b)?;
        let kh = g.slice_cols(k, a, b)?;
        let vh = g.slice_cols(v, a, b)?;
        let scores = g.matmul_t(&qh, &kh)?;
        let weights = g.softmax(&scores, temperature, mask)?;
        outs.push(g.matmul(&weights, &vh)?);
        if first.is_none() {
            first = Some(weights);
        }
    }
    let refs: Vec<&Var<S>> = outs.iter().collect();
    Ok((g.concat_cols(&refs)?, first.expect("heads >= 1")))
}

/// Multi-head self-attention with output projection.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore<f32>,
        init: &mut Init,
        name: &str,
        d: usize,
        heads: usize,
        bias: bool,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, init, &format!("{name}.q"), d, d, bias),
            k: Linear::new(store, init, &format!("{name}.k"), d, d, bias),
            v: Linear::new(store, init, &format!("{name}.v"), d, d, bias),
            o: Linear::new(store, init, &format!("{name}.o"), d, d, true),
            heads,
        })
    }

    pub fn forward<S: Real>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        x: &Var<S>,
        mask: Option<&Mask>,
    ) -> Result<Var<S>> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let (out, _) = attention(g, &q, &k, &v, self.heads, mask)?;
        self.o.forward(g, store, &out)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        [self.q, self.k, self.v, self.o]
            .into_iter()
            .flat_map(|l| l.ids().collect::<Vec<_>>())
    }
}

/// `Linear(d → 2·inner)`, GEGLU, `Linear(inner → d)`.
#[derive(Clone, Copy, Debug)]
pub struct GegluMlp {
    pub up: Linear,
    pub down: Linear,
}

impl GegluMlp {
    pub fn new(
        store: &mut ParamStore<f32>,
        init: &mut Init,
        name: &str,
        d: usize,
        inner: usize,
    ) -> Self {
        Self {
            up: Linear::new(store, init, &format!("{name}.up"), d, 2 * inner, true),
            down: Linear::new(store, init, &format!("{name}.down"), inner, d, true),
        }
    }

    pub fn forward<S: Real>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        x: &Var<S>,
    ) -> Result<Var<S>> {
        let h = self.up.forward(g, store, x)?;
        let h = g.geglu(&h)?;
        self.down.forward(g, store, &h)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        self.up.ids().chain(self.down.ids())
    }
}

/// `Linear(d → inner)`, GELU, `Linear(inner → d)`.
#[derive(Clone, Copy, Debug)]
pub struct GeluMlp {
    pub up: Linear,
    pub down: Linear,
}

impl GeluMlp {
    pub fn new(
        store: &mut ParamStore<f32>,
        init: &mut Init,
        name: &str,
        d: usize,
        inner: usize,
    ) -> Self {
        Self {
            up: Linear::new(store, init, &format!("{name}.up"), d, inner, true),
            down: Linear::new(store, init, &format!("{name}.down"), inner, d, true),
        }
    }

    pub fn forward<S: Real>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        x: &Var<S>,
    ) -> Result<Var<S>> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(&h)?;
        self.down.forward(g, store, &h)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        self.up.ids().chain(self.down.ids())
    }
}
