//! Slide encoder, report decoder and the two contrastive projection heads.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{EncoderConfig, SlideEncoder, SlideEncoding};
use crate::error::{Error, Result};
use crate::params::{Init, Linear, ParamId, ParamStore};
use crate::rng::stream;
use crate::tensor::{Real, Tensor};

/// Initial contrastive temperature.
pub const INIT_TAU: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Contrastive projection width.
    pub proj_dim: usize,
    pub init_tau: f64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: SlideEncoder,
    pub decoder: Decoder,
    pub vision_proj: Linear,
    pub text_proj: Linear,
    pub log_tau: ParamId,
}

impl Model {
    /// Builds the model and its parameters from the `init` stream of `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, "init", &[]);
        let mut init = Init::new(&mut rng);
        let model = Self::build(&mut store, &mut init, cfg)?;
        Ok((model, store))
    }

    pub fn build(store: &mut ParamStore<f32>, init: &mut Init, cfg: ModelConfig) -> Result<Self> {
        if !(cfg.init_tau > 0.0) || cfg.proj_dim == 0 {
            return Err(Error::InvalidArgument(
                "temperature and projection width must be positive".into(),
            ));
        }
        if cfg.decoder.d_context != cfg.encoder.d_latent {
            return Err(Error::InvalidArgument(format!(
                "decoder context width {} differs from latent width {}",
                cfg.decoder.d_context, cfg.encoder.d_latent
            )));
        }
        let encoder = SlideEncoder::new(store, init, "encoder", cfg.encoder)?;
        let decoder = Decoder::new(store, init, "decoder", cfg.decoder)?;
        let vision_proj = Linear::new(
            store,
            init,
            "vision_proj",
            cfg.encoder.d_latent,
            cfg.proj_dim,
            true,
        );
        let text_proj = Linear::new(
            store,
            init,
            "text_proj",
            cfg.decoder.width,
            cfg.proj_dim,
            true,
        );
        let log_tau = store.insert("log_tau", Tensor::scalar(cfg.init_tau.ln() as f32));
        Ok(Self {
            cfg,
            encoder,
            decoder,
            vision_proj,
            text_proj,
            log_tau,
        })
    }

    pub fn tau<S: Real>(&self, store: &ParamStore<S>) -> f64 {
        store.tensor(self.log_tau).item().as_f64().exp()
    }

    pub fn encode<S: Real>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        tiles: &Var<S>,
    ) -> Result<SlideEncoding<S>> {
        self.encoder.encode(g, store, tiles)
    }

    /// Unit-norm slide projections of stacked slide embeddings.
    pub fn project_slides<S: Real>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        slide_embeddings: &Var<S>,
    ) -> Result<Var<S>> {
        let p = self.vision_proj.forward(g, store, slide_embeddings)?;
        g.l2_normalize(&p)
    }

    /// Unit-norm text projections of stacked CLS states.
    pub fn project_texts<S: Real>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        cls: &Var<S>,
    ) -> Result<Var<S>> {
        let p = self.text_proj.forward(g, store, cls)?;
        g.l2_normalize(&p)
    }

    /// Unit-norm projection of a text (`[BOS, words]`) through its CLS state.
    pub fn embed_text<S: Real>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        input_ids: &[usize],
    ) -> Result<Var<S>> {
        let (_, cls) = self.decoder.unimodal_forward(g, store, input_ids)?;
        self.project_texts(g, store, &cls)
    }

    pub fn apply_freeze_mask<S: Real>(&self, store: &mut ParamStore<S>) {
        self.decoder.apply_freeze_mask(store);
    }
}
