//! Flat key-value run configuration with `paper` and `desk` presets.
//!
//! A config file is TOML restricted to top-level keys. `preset` selects the
//! base values and every other key overrides one field; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Reduction;
use crate::decoder::{DecoderConfig, FreezeMode};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{FineTuneConfig, HarnessConfig, ProbeConfig};
use crate::model::{ModelConfig, INIT_TAU};
use crate::optim::{AdamWConfig, LrSchedule};
use crate::rng::digest_hex;
use crate::train::{LossWeights, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,

    pub concepts: usize,
    pub specimens_per_concept: usize,
    pub heldout_per_concept: usize,
    pub max_slides_per_specimen: usize,
    pub tiles_min: usize,
    pub tiles_max: usize,
    pub tile_dim: usize,
    pub signal_strength: f64,
    /// Share of a specimen's tiles that carry its concept signal.
    pub informative_fraction: f64,
    /// Specimens per class of the held-back binary transfer task.
    pub transfer_per_class: usize,
    pub transfer_signal: f64,

    pub depth: usize,
    pub num_latents: usize,
    pub d_latent: usize,
    pub d_kqv: usize,
    pub mlp_inner: usize,
    pub latent_layers: usize,
    pub latent_heads: usize,
    pub qkv_bias: bool,

    pub dec_width: usize,
    pub dec_layers: usize,
    pub dec_unimodal_layers: usize,
    pub dec_heads: usize,
    pub dec_max_len: usize,
    pub freeze: FreezeMode,
    pub proj_dim: usize,
    pub init_tau: f64,

    pub batch_size: usize,
    pub accum: usize,
    pub steps: u64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub lambda_con: f64,
    pub lambda_rep: f64,
    pub caption_reduction: Reduction,

    pub probe_folds: usize,
    pub probe_standardize: bool,
    pub ft_steps: u64,
    pub ft_batch_size: usize,
    pub ft_lr: f64,
    pub ft_warmup_steps: u64,
    pub harness_runs: usize,
    pub harness_parallel: bool,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            seed: 7,
            concepts: 4,
            specimens_per_concept: 32,
            heldout_per_concept: 16,
            max_slides_per_specimen: 2,
            tiles_min: 16,
            tiles_max: 48,
            tile_dim: 64,
            signal_strength: 4.0,
            informative_fraction: 1.0,
            transfer_per_class: 64,
            transfer_signal: 0.4,
            depth: 4,
            num_latents: 17,
            d_latent: 64,
            d_kqv: 64,
            mlp_inner: 64,
            latent_layers: 2,
            latent_heads: 4,
            qkv_bias: true,
            dec_width: 64,
            dec_layers: 8,
            dec_unimodal_layers: 4,
            dec_heads: 4,
            dec_max_len: 32,
            freeze: FreezeMode::Desk,
            proj_dim: 64,
            init_tau: INIT_TAU,
            batch_size: 8,
            accum: 2,
            steps: 600,
            warmup_steps: 50,
            total_steps: 600,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-6,
            clip_norm: 3.0,
            lambda_con: 1.0,
            lambda_rep: 2.0,
            caption_reduction: Reduction::Sum,
            probe_folds: 5,
            probe_standardize: true,
            ft_steps: 100,
            ft_batch_size: 8,
            ft_lr: 1e-3,
            ft_warmup_steps: 10,
            harness_runs: 3,
            harness_parallel: true,
        }
    }

    pub fn paper() -> Self {
        let e = EncoderConfig::paper();
        Self {
            preset: "paper".into(),
            tile_dim: e.d_tile,
            depth: e.depth,
            num_latents: e.num_latents,
            d_latent: e.d_latent,
            d_kqv: e.d_kqv,
            mlp_inner: e.mlp_inner,
            latent_layers: e.latent_layers,
            latent_heads: e.latent_heads,
            dec_width: 768,
            dec_layers: 24,
            dec_unimodal_layers: 12,
            dec_heads: 12,
            dec_max_len: 1024,
            freeze: FreezeMode::Paper,
            proj_dim: 5120,
            batch_size: 64,
            accum: 4,
            steps: 24_000,
            warmup_steps: 2000,
            total_steps: 24_000,
            lr: 2e-4,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected desk or paper)"
            ))),
        }
    }

    /// Parses a config file body: preset defaults overlaid by every key.
    pub fn parse(text: &str) -> Result<Self> {
        let overrides: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match overrides.get("preset") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
            None => "desk".to_string(),
        };
        let base = Self::preset(&preset)?;
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            if v.is_table() || v.is_array() {
                return Err(Error::Config(format!("key `{k}` must be a scalar")));
            }
            if !table.contains_key(&k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            table.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?).map_err(|e| match e {
            Error::Config(d) => Error::Config(format!("{}: {d}", path.display())),
            other => other,
        })
    }

    /// Flat `key = value` rendering that parses back to the same config.
    pub fn to_file_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.concepts < 2 {
            return fail("concepts must be >= 2");
        }
        if self.specimens_per_concept == 0 || self.heldout_per_concept == 0 {
            return fail("specimens_per_concept and heldout_per_concept must be >= 1");
        }
        if self.concepts > crate::corpus::KEYWORDS.len() {
            return fail("too many concepts for the keyword list");
        }
        if self.transfer_per_class < 4 {
            return fail("transfer_per_class must be >= 4");
        }
        if self.tiles_min == 0 || self.tiles_min > self.tiles_max {
            return fail("need 1 <= tiles_min <= tiles_max");
        }
        if self.max_slides_per_specimen == 0 {
            return fail("max_slides_per_specimen must be >= 1");
        }
        if self.tile_dim < self.concepts || !self.tile_dim.is_multiple_of(2) {
            return fail("tile_dim must be even and at least the concept count");
        }
        if !(self.signal_strength >= 0.0 && self.transfer_signal >= 0.0) {
            return fail("signal strengths must be >= 0");
        }
        if !(self.informative_fraction > 0.0 && self.informative_fraction <= 1.0) {
            return fail("informative_fraction must be in (0, 1]");
        }
        self.model_config().encoder.validate()?;
        self.model_config()
            .decoder
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            depth: self.depth,
            num_latents: self.num_latents,
            d_latent: self.d_latent,
            d_tile: self.tile_dim,
            d_kqv: self.d_kqv,
            mlp_inner: self.mlp_inner,
            latent_layers: self.latent_layers,
            latent_heads: self.latent_heads,
            qkv_bias: self.qkv_bias,
        }
    }

    /// Model configuration for a vocabulary of `vocab_size` tokens.
    pub fn model_config_for(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder_config(),
            decoder: DecoderConfig {
                vocab_size,
                width: self.dec_width,
                layers: self.dec_layers,
                unimodal_layers: self.dec_unimodal_layers,
                heads: self.dec_heads,
                max_len: self.dec_max_len,
                d_context: self.d_latent,
                freeze: self.freeze,
                qkv_bias: self.qkv_bias,
            },
            proj_dim: self.proj_dim,
            init_tau: self.init_tau,
        }
    }

    fn model_config(&self) -> ModelConfig {
        self.model_config_for(16)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            accum: self.accum,
            clip_norm: self.clip_norm,
            weights: LossWeights {
                lambda_con: self.lambda_con,
                lambda_rep: self.lambda_rep,
            },
            reduction: self.caption_reduction,
            schedule: LrSchedule {
                base_lr: self.lr,
                warmup_steps: self.warmup_steps,
                total_steps: self.total_steps,
            },
            adamw: AdamWConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            seed: self.seed,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            folds: self.probe_folds,
            seed: self.seed,
            standardize: self.probe_standardize,
            ..Default::default()
        }
    }

    pub fn finetune_config(&self) -> FineTuneConfig {
        FineTuneConfig {
            steps: self.ft_steps,
            batch_size: self.ft_batch_size,
            lr: self.ft_lr,
            warmup_steps: self.ft_warmup_steps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }

    pub fn harness_config(&self) -> HarnessConfig {
        HarnessConfig {
            runs: self.harness_runs,
            seed: self.seed,
            finetune: self.finetune_config(),
            parallel: self.harness_parallel,
            ..Default::default()
        }
    }

    /// Digest of every field.
    pub fn digest(&self) -> String {
        digest_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    /// Digest of the fields that determine the synthetic corpus.
    pub fn corpus_digest(&self) -> String {
        let key = serde_json::json!({
            "seed": self.seed,
            "concepts": self.concepts,
            "specimens_per_concept": self.specimens_per_concept,
            "heldout_per_concept": self.heldout_per_concept,
            "max_slides_per_specimen": self.max_slides_per_specimen,
            "tiles_min": self.tiles_min,
            "tiles_max": self.tiles_max,
            "tile_dim": self.tile_dim,
            "signal_strength": self.signal_strength,
            "informative_fraction": self.informative_fraction,
            "transfer_per_class": self.transfer_per_class,
            "transfer_signal": self.transfer_signal,
        });
        digest_hex(key.to_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let c = RunConfig::parse("preset = \"desk\"\nsteps = 10\nlr = 0.5\n").unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.lr, 0.5);
        assert!(RunConfig::parse("bogus = 1\n").is_err());
        assert!(RunConfig::parse("preset = \"huge\"\n").is_err());
        assert!(RunConfig::parse("steps = \"ten\"\n").is_err());
    }

    #[test]
    fn file_round_trip_and_digest() {
        for c in [RunConfig::desk(), RunConfig::paper()] {
            let back = RunConfig::parse(&c.to_file_string().unwrap()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.digest(), c.digest());
        }
        let mut d = RunConfig::desk();
        let before = (d.digest(), d.corpus_digest());
        d.steps += 1;
        assert_ne!(d.digest(), before.0);
        assert_eq!(d.corpus_digest(), before.1);
    }

    #[test]
    fn presets_match_reference_values() {
        let p = RunConfig::paper();
        assert_eq!(
            (p.depth, p.num_latents, p.d_latent, p.tile_dim),
            (8, 513, 1280, 2560)
        );
        assert_eq!(
            (p.batch_size, p.accum, p.warmup_steps, p.total_steps),
            (64, 4, 2000, 24_000)
        );
        let d = RunConfig::desk();
        assert_eq!((d.depth, d.num_latents, d.d_latent), (4, 17, 64));
        assert_eq!((d.batch_size, d.accum), (8, 2));
    }
}
