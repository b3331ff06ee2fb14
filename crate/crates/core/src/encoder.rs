//! Latent-resampling slide encoder.
//!
//! Block 0 cross-attends with its own weights; every later block shares a
//! second cross-attention weight set whose keys and values are projected
//! from the tile embeddings once and then reused from a cache. A single
//! latent-transformer weight set follows every cross-attention.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{attention, GegluMlp, SelfAttention};
use crate::params::{Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Cross-attention + latent-transformer blocks.
    pub depth: usize,
    /// Latent rows including the slide-embedding latent.
    pub num_latents: usize,
    pub d_latent: usize,
    pub d_tile: usize,
    pub d_kqv: usize,
    pub mlp_inner: usize,
    pub latent_layers: usize,
    pub latent_heads: usize,
    pub qkv_bias: bool,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        Self {
            depth: 8,
            num_latents: 513,
            d_latent: 1280,
            d_tile: 2560,
            d_kqv: 1280,
            mlp_inner: 1280,
            latent_layers: 6,
            latent_heads: 8,
            qkv_bias: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            depth: 4,
            num_latents: 17,
            d_latent: 64,
            d_tile: 64,
            d_kqv: 64,
            mlp_inner: 64,
            latent_layers: 2,
            latent_heads: 4,
            qkv_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.num_latents < 2 || self.latent_layers == 0 {
            return Err(Error::InvalidArgument(format!(
                "degenerate encoder config {self:?}"
            )));
        }
        if self.latent_heads == 0 || !self.d_latent.is_multiple_of(self.latent_heads) {
            return Err(Error::InvalidArgument(format!(
                "latent width {} is not divisible by {} heads",
                self.d_latent, self.latent_heads
            )));
        }
        Ok(())
    }
}

/// Keys and values projected from the tile embeddings.
#[derive(Clone, Debug)]
pub struct KvCache<S: Real = f32> {
    pub keys: Var<S>,
    pub values: Var<S>,
}

/// One single-head cross-attention module with its MLP.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub norm_attn: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm_mlp: LayerNorm,
    pub mlp: GegluMlp,
}

impl CrossAttention {
    fn new(store: &mut ParamStore<f32>, init: &mut Init, name: &str, cfg: &EncoderConfig) -> Self {
        Self {
            norm_attn: LayerNorm::new(store, init, &format!("{name}.norm_attn"), cfg.d_latent),
            q: Linear::new(
                store,
                init,
                &format!("{name}.q"),
                cfg.d_latent,
                cfg.d_kqv,
                cfg.qkv_bias,
            ),
            k: Linear::new(
                store,
                init,
                &format!("{name}.k"),
                cfg.d_tile,
                cfg.d_kqv,
                cfg.qkv_bias,
            ),
            v: Linear::new(
                store,
                init,
                &format!("{name}.v"),
                cfg.d_tile,
                cfg.d_kqv,
                cfg.qkv_bias,
            ),
            o: Linear::new(
                store,
                init,
                &format!("{name}.o"),
                cfg.d_kqv,
                cfg.d_latent,
                true,
            ),
            norm_mlp: LayerNorm::new(store, init, &format!("{name}.norm_mlp"), cfg.d_latent),
            mlp: GegluMlp::new(
                store,
                init,
                &format!("{name}.mlp"),
                cfg.d_latent,
                cfg.mlp_inner,
            ),
        }
    }

    /// Projects raw tile embeddings to keys and values.
    pub fn project_kv<S: Real>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        context: &Var<S>,
    ) -> Result<KvCache<S>> {
        Ok(KvCache {
            keys: self.k.forward(g, store, context)?,
            values: self.v.forward(g, store, context)?,
        })
    }

    /// Runs the module given either raw tile embeddings or a cache (exactly
    /// one). Returns the new latents, the cache used, and the attention
    /// matrix.
    pub fn forward<S: Real>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        latents: &Var<S>,
        context: Option<&Var<S>>,
        cache: Option<&KvCache<S>>,
    ) -> Result<(Var<S>, KvCache<S>, Var<S>)> {
        let kv = match (context, cache) {
            (Some(ctx), None) => self.project_kv(g, store, ctx)?,
            (None, Some(c)) => c.clone(),
            (Some(_), Some(_)) => {
                return Err(Error::InvalidArgument(
                    "cross-attention given both context and cache".into(),
                ))
            }
            (None, None) => {
                return Err(Error::InvalidArgument(
                    "cross-attention given neither context nor cache".into(),
                ))
            }
        };
        let h = self.norm_attn.forward(g, store, latents)?;
        let q = self.q.forward(g, store, &h)?;
        let (att, weights) = attention(g, &q, &kv.keys, &kv.values, 1, None)?;
        let out = self.o.forward(g, store, &att)?;
        let latents = g.add(latents, &out)?;
        let h = self.norm_mlp.forward(g, store, &latents)?;
        let h = self.mlp.forward(g, store, &h)?;
        let latents = g.add(&latents, &h)?;
        Ok((latents, kv, weights))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.norm_attn.ids().collect();
        for l in [self.q, self.k, self.v, self.o] {
            v.extend(l.ids());
        }
        v.extend(self.norm_mlp.ids());
        v.extend(self.mlp.ids());
        v
    }
}

/// Pre-norm transformer encoder layer over the latents.
#[derive(Clone, Copy, Debug)]
pub struct LatentLayer {
    pub norm_attn: LayerNorm,
    pub attn: SelfAttention,
    pub norm_mlp: LayerNorm,
    pub mlp: GegluMlp,
}

impl LatentLayer {
    pub fn forward<S: Real>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        x: &Var<S>,
    ) -> Result<Var<S>> {
        let h = self.norm_attn.forward(g, store, x)?;
        let h = self.attn.forward(g, store, &h, None)?;
        let x = g.add(x, &h)?;
        let h = self.norm_mlp.forward(g, store, &x)?;
        let h = self.mlp.forward(g, store, &h)?;
        g.add(&x, &h)
    }
}

/// Stack of latent layers; one instance is shared by all blocks.
#[derive(Clone, Debug)]
pub struct LatentTransformer {
    pub layers: Vec<LatentLayer>,
}

impl LatentTransformer {
    fn new(
        store: &mut ParamStore<f32>,
        init: &mut Init,
        name: &str,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        let layers = (0..cfg.latent_layers)
            .map(|i| {
                let n = format!("{name}.{i}");
                Ok(LatentLayer {
                    norm_attn: LayerNorm::new(store, init, &format!("{n}.norm_attn"), cfg.d_latent),
                    attn: SelfAttention::new(
                        store,
                        init,
                        &format!("{n}.attn"),
                        cfg.d_latent,
                        cfg.latent_heads,
                        cfg.qkv_bias,
                    )?,
                    norm_mlp: LayerNorm::new(store, init, &format!("{n}.norm_mlp"), cfg.d_latent),
                    mlp: GegluMlp::new(
                        store,
                        init,
                        &format!("{n}.mlp"),
                        cfg.d_latent,
                        cfg.mlp_inner,
                    ),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<S: Real>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        x: &Var<S>,
    ) -> Result<Var<S>> {
        let mut x = x.clone();
        for layer in &self.layers {
            x = layer.forward(g, store, &x)?;
        }
        Ok(x)
    }
}

/// Encoder outputs inside a graph.
#[derive(Clone, Debug)]
pub struct SlideEncoding<S: Real = f32> {
    /// `1 × d_latent`.
    pub slide_embedding: Var<S>,
    /// `(num_latents − 1) × d_latent`.
    pub context_latents: Var<S>,
    /// `num_latents × N` attention of the final cross-attention.
    pub last_xattn_weights: Tensor<S>,
    /// Latents after each block.
    pub block_outputs: Vec<Var<S>>,
    /// Key/value projections of the tile embeddings performed.
    pub kv_projections: usize,
}

#[derive(Clone, Debug)]
pub struct SlideEncoder {
    pub cfg: EncoderConfig,
    pub latents: ParamId,
    pub xattn: [CrossAttention; 2],
    pub transformer: LatentTransformer,
}

impl SlideEncoder {
    pub fn new(
        store: &mut ParamStore<f32>,
        init: &mut Init,
        name: &str,
        cfg: EncoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let latents = store.insert(
            format!("{name}.latents"),
            init.weight(cfg.num_latents, cfg.d_latent),
        );
        let x0 = CrossAttention::new(store, init, &format!("{name}.xattn0"), &cfg);
        let x1 = CrossAttention::new(store, init, &format!("{name}.xattn1"), &cfg);
        let transformer = LatentTransformer::new(store, init, &format!("{name}.latent"), &cfg)?;
        Ok(Self {
            cfg,
            latents,
            xattn: [x0, x1],
            transformer,
        })
    }

    fn check_tiles<S: Real>(&self, tiles: &Var<S>) -> Result<()> {
        if tiles.shape().len() != 2 || tiles.rows() == 0 {
            return Err(Error::InvalidArgument("cannot encode an empty bag".into()));
        }
        if tiles.cols() != self.cfg.d_tile {
            return Err(Error::shape(
                "encode_slide",
                format!(
                    "tile width {} vs configured {}",
                    tiles.cols(),
                    self.cfg.d_tile
                ),
            ));
        }
        Ok(())
    }

    /// Forward pass with the shared key/value cache.
    pub fn encode<S: Real>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        tiles: &Var<S>,
    ) -> Result<SlideEncoding<S>> {
        self.run(g, store, tiles, false)
    }

    /// Same computation but re-projecting keys and values in every block.
    pub fn encode_reprojecting<S: Real>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        tiles: &Var<S>,
    ) -> Result<SlideEncoding<S>> {
        self.run(g, store, tiles, true)
    }

    fn run<S: Real>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        tiles: &Var<S>,
        reproject: bool,
    ) -> Result<SlideEncoding<S>> {
        self.check_tiles(tiles)?;
        let mut latents = g.param(store, self.latents);
        let mut cache: Option<KvCache<S>> = None;
        let mut kv_projections = 0;
        let mut weights = None;
        let mut block_outputs = Vec::with_capacity(self.cfg.depth);
        for block in 0..self.cfg.depth {
            let module = &self.xattn[block.min(1)];
            let fresh = block <= 1 || reproject;
            let (next, kv, w) = if fresh {
                kv_projections += 1;
                module.forward(g, store, &latents, Some(tiles), None)?
            } else {
                module.forward(g, store, &latents, None, cache.as_ref())?
            };
            // Dropping the previous cache here keeps one live cache.
            cache = Some(kv);
            weights = Some(w);
            latents = self.transformer.forward(g, store, &next)?;
            block_outputs.push(latents.clone());
        }
        let weights = weights.expect("depth >= 1");
        let n = self.cfg.num_latents;
        Ok(SlideEncoding {
            slide_embedding: g.slice_rows(&latents, 0, 1)?,
            context_latents: g.slice_rows(&latents, 1, n)?,
            last_xattn_weights: weights.to_tensor(),
            block_outputs,
            kv_projections,
        })
    }

    /// Inference-only convenience over a plain tile matrix.
    pub fn encode_tiles(
        &self,
        store: &ParamStore<f32>,
        tiles: &Tensor<f32>,
    ) -> Result<SlideEncoding<f32>> {
        let g = Graph::inference();
        let t = g.constant(tiles.clone());
        self.encode(&g, store, &t)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.latents];
        v.extend(self.xattn[0].ids());
        v.extend(self.xattn[1].ids());
        for l in &self.transformer.layers {
            v.extend(l.norm_attn.ids());
            v.extend(l.attn.ids());
            v.extend(l.norm_mlp.ids());
            v.extend(l.mlp.ids());
        }
        v
    }
}

/// The `k` tiles the slide-embedding latent attends to most in the final
/// cross-attention, by descending weight with ties to the lower index.
pub fn top_attended_tiles<S: Real>(weights: &Tensor<S>, k: usize) -> Result<Vec<(usize, f64)>> {
    let n = weights.cols();
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "asked for {k} tiles of {n}"
        )));
    }
    let row = weights.row(0);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(idx
        .into_iter()
        .take(k)
        .map(|i| (i, row[i].as_f64()))
        .collect())
}
