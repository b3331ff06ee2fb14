//! Causal report decoder with a trailing CLS token.
//!
//! The lower `unimodal_layers` run causal self-attention over the language
//! tokens plus a CLS token appended at position `T`. After them the CLS
//! state is split off for the contrastive head and the language states
//! continue through multimodal layers that cross-attend to the slide
//! encoder's context latents.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mask, Var};
use crate::error::{Error, Result};
use crate::layers::{attention, GeluMlp, SelfAttention};
use crate::params::{Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezeMode {
    /// Everything trainable.
    Desk,
    /// Only word embeddings and cross-attention modules trainable.
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub unimodal_layers: usize,
    pub heads: usize,
    /// Longest input including the CLS token.
    pub max_len: usize,
    /// Width of the context latents.
    pub d_context: usize,
    pub freeze: FreezeMode,
    pub qkv_bias: bool,
}

impl DecoderConfig {
    pub fn desk(vocab_size: usize, d_context: usize) -> Self {
        Self {
            vocab_size,
            width: 64,
            layers: 8,
            unimodal_layers: 4,
            heads: 4,
            max_len: 48,
            d_context,
            freeze: FreezeMode::Desk,
            qkv_bias: true,
        }
    }

    pub fn paper(vocab_size: usize, d_context: usize) -> Self {
        Self {
            vocab_size,
            width: 768,
            layers: 24,
            unimodal_layers: 12,
            heads: 12,
            max_len: 1024,
            d_context,
            freeze: FreezeMode::Paper,
            qkv_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unimodal_layers == 0 || self.unimodal_layers >= self.layers {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= unimodal layers < layers, got {} of {}",
                self.unimodal_layers, self.layers
            )));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.vocab_size < 5 || self.max_len < 2 {
            return Err(Error::InvalidArgument(
                "vocabulary or max length too small".into(),
            ));
        }
        Ok(())
    }
}

/// `(T+1)×(T+1)` mask: causal among language rows, which never see the
/// CLS column; the CLS row (last) sees everything.
pub fn build_mask(t: usize) -> Mask {
    let n = t + 1;
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            allowed[i * n + j] = if i == t { true } else { j <= i };
        }
    }
    Mask {
        rows: n,
        cols: n,
        allowed,
    }
}

fn causal_mask(t: usize) -> Mask {
    let mut allowed = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            allowed[i * t + j] = true;
        }
    }
    Mask {
        rows: t,
        cols: t,
        allowed,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct UnimodalLayer {
    pub norm_attn: LayerNorm,
    pub attn: SelfAttention,
    pub norm_mlp: LayerNorm,
    pub mlp: GeluMlp,
}

/// Multi-head cross-attention from text states to context latents.
#[derive(Clone, Copy, Debug)]
pub struct TextCrossAttention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct MultimodalLayer {
    pub norm_attn: LayerNorm,
    pub attn: SelfAttention,
    pub xattn: TextCrossAttention,
    pub norm_mlp: LayerNorm,
    pub mlp: GeluMlp,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub unimodal: Vec<UnimodalLayer>,
    pub multimodal: Vec<MultimodalLayer>,
    pub final_norm: LayerNorm,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore<f32>,
        init: &mut Init,
        name: &str,
        cfg: DecoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let token_embedding = store.insert(format!("{name}.tok"), init.weight(cfg.vocab_size, w));
        let position_embedding = store.insert(format!("{name}.pos"), init.weight(cfg.max_len, w));
        let mut unimodal = Vec::new();
        for i in 0..cfg.unimodal_layers {
            let n = format!("{name}.uni{i}");
            unimodal.push(UnimodalLayer {
                norm_attn: LayerNorm::new(store, init, &format!("{n}.norm_attn"), w),
                attn: SelfAttention::new(
                    store,
                    init,
                    &format!("{n}.attn"),
                    w,
                    cfg.heads,
                    cfg.qkv_bias,
                )?,
                norm_mlp: LayerNorm::new(store, init, &format!("{n}.norm_mlp"), w),
                mlp: GeluMlp::new(store, init, &format!("{n}.mlp"), w, 4 * w),
            });
        }
        let mut multimodal = Vec::new();
        for i in cfg.unimodal_layers..cfg.layers {
            let n = format!("{name}.multi{i}");
            multimodal.push(MultimodalLayer {
                norm_attn: LayerNorm::new(store, init, &format!("{n}.norm_attn"), w),
                attn: SelfAttention::new(
                    store,
                    init,
                    &format!("{n}.attn"),
                    w,
                    cfg.heads,
                    cfg.qkv_bias,
                )?,
                xattn: TextCrossAttention {
                    norm: LayerNorm::new(store, init, &format!("{n}.xattn.norm"), w),
                    q: Linear::new(store, init, &format!("{n}.xattn.q"), w, w, cfg.qkv_bias),
                    k: Linear::new(
                        store,
                        init,
                        &format!("{n}.xattn.k"),
                        cfg.d_context,
                        w,
                        cfg.qkv_bias,
                    ),
                    v: Linear::new(
                        store,
                        init,
                        &format!("{n}.xattn.v"),
                        cfg.d_context,
                        w,
                        cfg.qkv_bias,
                    ),
                    o: Linear::new(store, init, &format!("{n}.xattn.o"), w, w, true),
                },
                norm_mlp: LayerNorm::new(store, init, &format!("{n}.norm_mlp"), w),
                mlp: GeluMlp::new(store, init, &format!("{n}.mlp"), w, 4 * w),
            });
        }
        let final_norm = LayerNorm::new(store, init, &format!("{name}.final_norm"), w);
        let dec = Self {
            cfg,
            token_embedding,
            position_embedding,
            unimodal,
            multimodal,
            final_norm,
        };
        dec.apply_freeze_mask(store);
        Ok(dec)
    }

    pub fn cls_id(&self) -> usize {
        self.cfg.vocab_size - 1
    }

    /// Token plus position embeddings for `ids` followed by CLS at position `T`.
    fn embed<S: Real>(&self, g: &Graph<S>, store: &ParamStore<S>, ids: &[usize]) -> Result<Var<S>> {
        let t = ids.len();
        if t + 1 > self.cfg.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {t} tokens plus CLS exceeds max length {}",
                self.cfg.max_len
            )));
        }
        if ids.contains(&self.cls_id()) {
            return Err(Error::InvalidArgument(
                "CLS may not appear inside a token sequence".into(),
            ));
        }
        let mut with_cls = ids.to_vec();
        with_cls.push(self.cls_id());
        let positions: Vec<usize> = (0..=t).collect();
        let tok = g.param(store, self.token_embedding);
        let pos = g.param(store, self.position_embedding);
        let x = g.gather_rows(&tok, &with_cls)?;
        let p = g.gather_rows(&pos, &positions)?;
        g.add(&x, &p)
    }

    /// Uni-modal half. Returns language states `T×width` and the CLS state
    /// `1×width` taken directly after the last uni-modal layer.
    pub fn unimodal_forward<S: Real>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        ids: &[usize],
    ) -> Result<(Var<S>, Var<S>)> {
        self.unimodal_with_input(g, store, ids.len(), self.embed(g, store, ids)?)
    }

    /// Uni-modal half over an already-embedded `(T+1)×width` input.
    pub fn unimodal_with_input<S: Real>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        t: usize,
        input: Var<S>,
    ) -> Result<(Var<S>, Var<S>)> {
        let mask = build_mask(t);
        let mut x = input;
        for l in &self.unimodal {
            let h = l.norm_attn.forward(g, store, &x)?;
            let h = l.attn.forward(g, store, &h, Some(&mask))?;
            x = g.add(&x, &h)?;
            let h = l.norm_mlp.forward(g, store, &x)?;
            let h = l.mlp.forward(g, store, &h)?;
            x = g.add(&x, &h)?;
        }
        Ok((g.slice_rows(&x, 0, t)?, g.slice_rows(&x, t, t + 1)?))
    }

    /// Multi-modal half: `T×V` logits from language states and context
    /// latents.
    pub fn multimodal_forward<S: Real>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        hidden: &Var<S>,
        context: &Var<S>,
    ) -> Result<Var<S>> {
        if context.cols() != self.cfg.d_context {
            return Err(Error::shape(
                "multimodal_forward",
                format!(
                    "context width {} vs configured {}",
                    context.cols(),
                    self.cfg.d_context
                ),
            ));
        }
        if hidden.cols() != self.cfg.width {
            return Err(Error::shape(
                "multimodal_forward",
                format!("hidden width {}", hidden.cols()),
            ));
        }
        let t = hidden.rows();
        if t == 0 {
            return Err(Error::InvalidArgument(
                "multimodal forward needs at least one token".into(),
            ));
        }
        let mask = causal_mask(t);
        let mut x = hidden.clone();
        for l in &self.multimodal {
            let h = l.norm_attn.forward(g, store, &x)?;
            let h = l.attn.forward(g, store, &h, Some(&mask))?;
            x = g.add(&x, &h)?;
            let xa = &l.xattn;
            let h = xa.norm.forward(g, store, &x)?;
            let q = xa.q.forward(g, store, &h)?;
            let k = xa.k.forward(g, store, context)?;
            let v = xa.v.forward(g, store, context)?;
            let (h, _) = attention(g, &q, &k, &v, self.cfg.heads, None)?;
            let h = xa.o.forward(g, store, &h)?;
            x = g.add(&x, &h)?;
            let h = l.norm_mlp.forward(g, store, &x)?;
            let h = l.mlp.forward(g, store, &h)?;
            x = g.add(&x, &h)?;
        }
        let x = self.final_norm.forward(g, store, &x)?;
        let tok = g.param(store, self.token_embedding);
        g.matmul_t(&x, &tok)
    }

    /// Parameters trainable under the configured freeze mode.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        match self.cfg.freeze {
            FreezeMode::Desk => self.ids(),
            FreezeMode::Paper => {
                let mut v = vec![self.token_embedding];
                for l in &self.multimodal {
                    v.extend(l.xattn.norm.ids());
                    for lin in [l.xattn.q, l.xattn.k, l.xattn.v, l.xattn.o] {
                        v.extend(lin.ids());
                    }
                }
                v
            }
        }
    }

    pub fn apply_freeze_mask<S: Real>(&self, store: &mut ParamStore<S>) {
        let keep = self.trainable_ids();
        for id in self.ids() {
            store.set_trainable(id, keep.contains(&id));
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.token_embedding, self.position_embedding];
        for l in &self.unimodal {
            v.extend(l.norm_attn.ids());
            v.extend(l.attn.ids());
            v.extend(l.norm_mlp.ids());
            v.extend(l.mlp.ids());
        }
        for l in &self.multimodal {
            v.extend(l.norm_attn.ids());
            v.extend(l.attn.ids());
            v.extend(l.xattn.norm.ids());
            for lin in [l.xattn.q, l.xattn.k, l.xattn.v, l.xattn.o] {
                v.extend(lin.ids());
            }
            v.extend(l.norm_mlp.ids());
            v.extend(l.mlp.ids());
        }
        v.extend(self.final_norm.ids());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(freeze: FreezeMode) -> (ParamStore<f32>, Decoder) {
        let cfg = DecoderConfig {
            vocab_size: 12,
            width: 8,
            layers: 3,
            unimodal_layers: 1,
            heads: 2,
            max_len: 10,
            d_context: 6,
            freeze,
            qkv_bias: true,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dec = Decoder::new(&mut store, &mut Init::new(&mut rng), "dec", cfg).unwrap();
        (store, dec)
    }

    #[test]
    fn mask_closed_form() {
        let m = build_mask(3);
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(m.get(i, j), j <= i, "({i},{j})");
            }
            assert!(m.get(3, i));
        }
        assert!(m.get(3, 3));
        assert_eq!(build_mask(0).allowed, vec![true]);
    }

    #[test]
    fn empty_sequence_has_cls() {
        let (store, dec) = tiny(FreezeMode::Desk);
        let g = Graph::inference();
        let (h, cls) = dec.unimodal_forward(&g, &store, &[]).unwrap();
        assert_eq!(h.shape(), &[0, 8]);
        assert_eq!(cls.shape(), &[1, 8]);
    }

    #[test]
    fn overlong_and_cls_inside_rejected() {
        let (store, dec) = tiny(FreezeMode::Desk);
        let g = Graph::inference();
        assert!(dec.unimodal_forward(&g, &store, &[4; 10]).is_err());
        assert!(dec.unimodal_forward(&g, &store, &[4, 11]).is_err());
    }

    #[test]
    fn logits_shape() {
        let (store, dec) = tiny(FreezeMode::Desk);
        let g = Graph::inference();
        let (h, _) = dec.unimodal_forward(&g, &store, &[1, 5, 6]).unwrap();
        let ctx = g.constant(Tensor::full([4, 6], 0.3));
        let logits = dec.multimodal_forward(&g, &store, &h, &ctx).unwrap();
        assert_eq!(logits.shape(), &[3, 12]);
    }

    #[test]
    fn large_preset_freeze_drops_base_gradients() {
        let (mut store, dec) = tiny(FreezeMode::Paper);
        let g = Graph::new();
        let (h, _) = dec.unimodal_forward(&g, &store, &[1, 5, 6]).unwrap();
        let ctx = g.constant(Tensor::full([4, 6], 0.3));
        let logits = dec.multimodal_forward(&g, &store, &h, &ctx).unwrap();
        let loss = g
            .cross_entropy(&logits, &[5, 6, 2], None, crate::autograd::Reduction::Sum)
            .unwrap();
        g.backward(&loss).unwrap().accumulate_into(&mut store);
        let trainable = dec.trainable_ids();
        for id in dec.ids() {
            assert_eq!(
                store.tensor(id).grad.is_some(),
                trainable.contains(&id),
                "{}",
                store.name(id)
            );
        }
        assert!(!trainable.contains(&dec.position_embedding));
    }
}
