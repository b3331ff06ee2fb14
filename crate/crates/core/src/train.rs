//! Joint contrastive + captioning objective and the optimization loop.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Reduction, Var};
use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{clip_grad_norm, cosine_lr, AdamWConfig, LrSchedule, OptimizerState};
use crate::params::ParamStore;
use crate::rng::stream;
use crate::tensor::{Real, Tensor};
use crate::text::{TokenSequence, Vocabulary, PAD};

/// Largest tolerated deviation of a projection's norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_con: f64,
    pub lambda_rep: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_con: 1.0,
            lambda_rep: 2.0,
        }
    }
}

fn check_unit_rows<S: Real>(what: &str, x: &Var<S>) -> Result<()> {
    for (i, row) in x.data().chunks(x.cols().max(1)).enumerate() {
        let n = row
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "{what} row {i} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Symmetric cross-entropy over the `N×N` similarity matrix of unit-norm
/// slide projections `v` and report projections `t` at temperature
/// `exp(log_tau)`, averaged over the batch.
pub fn contrastive_loss<S: Real>(
    g: &Graph<S>,
    v: &Var<S>,
    t: &Var<S>,
    log_tau: &Var<S>,
) -> Result<Var<S>> {
    if v.shape() != t.shape() || v.shape().len() != 2 || v.rows() == 0 {
        return Err(Error::shape(
            "contrastive_loss",
            format!("{:?} vs {:?}", v.shape(), t.shape()),
        ));
    }
    check_unit_rows("slide projection", v)?;
    check_unit_rows("report projection", t)?;
    let n = v.rows();
    let sim = g.matmul_t(v, t)?;
    let neg = g.scale(log_tau, -1.0)?;
    let inv_tau = g.exp(&neg)?;
    let logits = g.scale_by(&sim, &inv_tau)?;
    let targets: Vec<usize> = (0..n).collect();
    let rows = g.cross_entropy(&logits, &targets, None, Reduction::Sum)?;
    let transposed = g.transpose(&logits)?;
    let cols = g.cross_entropy(&transposed, &targets, None, Reduction::Sum)?;
    let both = g.add(&rows, &cols)?;
    g.scale(&both, 1.0 / n as f64)
}

/// Teacher-forced token NLL of one sequence, PAD positions ignored.
pub fn caption_loss<S: Real>(
    g: &Graph<S>,
    logits: &Var<S>,
    targets: &[usize],
    reduction: Reduction,
) -> Result<Var<S>> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() {
        return Err(Error::shape(
            "caption_loss",
            format!("logits {:?} for {} targets", logits.shape(), targets.len()),
        ));
    }
    g.cross_entropy(logits, targets, Some(PAD), reduction)
}

pub fn total_loss<S: Real>(
    g: &Graph<S>,
    l_con: &Var<S>,
    l_rep: &Var<S>,
    w: &LossWeights,
) -> Result<Var<S>> {
    if w.lambda_con < 0.0 || w.lambda_rep < 0.0 {
        return Err(Error::InvalidArgument(
            "loss weights must be non-negative".into(),
        ));
    }
    let a = g.scale(l_con, w.lambda_con)?;
    let b = g.scale(l_rep, w.lambda_rep)?;
    g.add(&a, &b)
}

/// Uniform choice among a specimen's rewrites.
pub fn sample_rewrite<'a, T, R: Rng>(rewrites: &'a [T], rng: &mut R) -> Result<&'a T> {
    if rewrites.is_empty() {
        return Err(Error::InvalidArgument(
            "specimen has no report rewrites".into(),
        ));
    }
    Ok(&rewrites[rng.random_range(0..rewrites.len())])
}

/// One specimen with all of its tokenized report rewrites.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub specimen_id: String,
    pub tiles: Tensor<f32>,
    pub rewrites: Vec<TokenSequence>,
}

/// One specimen paired with the report drawn for this step.
#[derive(Clone, Debug)]
pub struct TrainItem<S: Real = f32> {
    pub tiles: Tensor<S>,
    /// `[BOS, y_1..y_T]`.
    pub input: Vec<usize>,
    /// `[y_1..y_T, EOS]`.
    pub target: Vec<usize>,
}

impl TrainItem<f32> {
    pub fn new(tiles: Tensor<f32>, report: &TokenSequence) -> Self {
        let (input, target) = report.teacher_forcing();
        Self {
            tiles,
            input,
            target,
        }
    }

    pub fn cast<T: Real>(&self) -> TrainItem<T> {
        TrainItem {
            tiles: self.tiles.cast(),
            input: self.input.clone(),
            target: self.target.clone(),
        }
    }
}

pub struct BatchLoss<S: Real = f32> {
    pub total: Var<S>,
    pub l_con: Var<S>,
    pub l_rep: Var<S>,
}

/// Full forward pass of one micro-batch. The caption loss is reduced per
/// sequence by `reduction` and then averaged over the batch.
pub fn batch_loss<S: Real>(
    g: &Graph<S>,
    store: &ParamStore<S>,
    model: &Model,
    items: &[TrainItem<S>],
    weights: &LossWeights,
    reduction: Reduction,
) -> Result<BatchLoss<S>> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut slides = Vec::with_capacity(items.len());
    let mut cls = Vec::with_capacity(items.len());
    let mut caption: Option<Var<S>> = None;
    for item in items {
        let tiles = g.constant(item.tiles.clone());
        let enc = model.encode(g, store, &tiles)?;
        let (hidden, c) = model.decoder.unimodal_forward(g, store, &item.input)?;
        let logits = model
            .decoder
            .multimodal_forward(g, store, &hidden, &enc.context_latents)?;
        let l = caption_loss(g, &logits, &item.target, reduction)?;
        caption = Some(match caption {
            Some(acc) => g.add(&acc, &l)?,
            None => l,
        });
        slides.push(enc.slide_embedding);
        cls.push(c);
    }
    let slides = g.concat_rows(&slides.iter().collect::<Vec<_>>())?;
    let cls = g.concat_rows(&cls.iter().collect::<Vec<_>>())?;
    let v = model.project_slides(g, store, &slides)?;
    let t = model.project_texts(g, store, &cls)?;
    let log_tau = g.param(store, model.log_tau);
    let l_con = contrastive_loss(g, &v, &t, &log_tau)?;
    let l_rep = g.scale(&caption.expect("non-empty batch"), 1.0 / items.len() as f64)?;
    let total = total_loss(g, &l_con, &l_rep, weights)?;
    Ok(BatchLoss {
        total,
        l_con,
        l_rep,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Specimens per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub accum: usize,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub reduction: Reduction,
    pub schedule: LrSchedule,
    pub adamw: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            accum: 4,
            clip_norm: 3.0,
            weights: LossWeights::default(),
            reduction: Reduction::Sum,
            schedule: LrSchedule::default(),
            adamw: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// One record of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub step: u64,
    pub lr: f64,
    pub l_con: f64,
    pub l_rep: f64,
    pub l_tot: f64,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub opt: OptimizerState,
    pub cfg: TrainConfig,
    /// Optimizer steps completed.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model, mut store: ParamStore<f32>, cfg: TrainConfig) -> Result<Self> {
        if cfg.batch_size == 0 || cfg.accum == 0 || !(cfg.clip_norm > 0.0) {
            return Err(Error::InvalidArgument(
                "batch size, accumulation and clip norm must be positive".into(),
            ));
        }
        model.apply_freeze_mask(&mut store);
        let opt = OptimizerState::new(cfg.adamw, &store);
        Ok(Self {
            model,
            store,
            opt,
            cfg,
            step: 0,
        })
    }

    /// Learning rate of the next update.
    pub fn next_lr(&self) -> f64 {
        cosine_lr(self.step + 1, &self.cfg.schedule)
    }

    /// Specimens and rewrites for the next step, drawn from streams keyed by
    /// the step index so a resumed run draws the same batches.
    pub fn draw_batch(&self, data: &[TrainExample]) -> Result<Vec<Vec<TrainItem>>> {
        let total = self.cfg.batch_size * self.cfg.accum;
        if data.len() < total {
            return Err(Error::InvalidArgument(format!(
                "a step needs {total} specimens but the training set has {}",
                data.len()
            )));
        }
        let mut batch_rng = stream(self.cfg.seed, "batch", &[self.step]);
        let mut rewrite_rng = stream(self.cfg.seed, "rewrite", &[self.step]);
        let picks = sample(&mut batch_rng, data.len(), total).into_vec();
        let mut items = Vec::with_capacity(total);
        for i in picks {
            let ex = &data[i];
            let report = sample_rewrite(&ex.rewrites, &mut rewrite_rng)?;
            items.push(TrainItem::new(ex.tiles.clone(), report));
        }
        Ok(items
            .chunks(self.cfg.batch_size)
            .map(<[_]>::to_vec)
            .collect())
    }

    /// Accumulates gradients over the micro-batches (each scaled by
    /// `1/accum`), clips, and applies one AdamW update.
    pub fn train_step(&mut self, micro_batches: &[Vec<TrainItem>]) -> Result<Metrics> {
        if micro_batches.is_empty() {
            return Err(Error::InvalidArgument("no micro-batches".into()));
        }
        let k = micro_batches.len() as f64;
        let step = self.step + 1;
        self.store.zero_grad();
        let (mut l_con, mut l_rep, mut l_tot) = (0.0, 0.0, 0.0);
        for items in micro_batches {
            let g = Graph::new();
            let loss = batch_loss(
                &g,
                &self.store,
                &self.model,
                items,
                &self.cfg.weights,
                self.cfg.reduction,
            )?;
            let (c, r, t) = (
                loss.l_con.item() as f64,
                loss.l_rep.item() as f64,
                loss.total.item() as f64,
            );
            if !(c.is_finite() && r.is_finite() && t.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    l_con: c,
                    l_rep: r,
                });
            }
            l_con += c / k;
            l_rep += r / k;
            l_tot += t / k;
            let scaled = g.scale(&loss.total, 1.0 / k)?;
            g.backward(&scaled)?.accumulate_into(&mut self.store);
        }
        let grad_norm = self.store.grad_norm();
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step, l_con, l_rep });
        }
        clip_grad_norm(&mut self.store, self.cfg.clip_norm);
        let lr = self.next_lr();
        self.opt.step(&mut self.store, lr)?;
        self.store.zero_grad();
        self.step = step;
        Ok(Metrics {
            step,
            lr,
            l_con,
            l_rep,
            l_tot,
            grad_norm,
        })
    }

    pub fn step_on(&mut self, data: &[TrainExample]) -> Result<Metrics> {
        let batch = self.draw_batch(data)?;
        self.train_step(&batch)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"PRCK";
const CKPT_VERSION: u32 = 1;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_digest: String,
    /// Digest of the corpus the model was trained on.
    pub corpus_digest: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub opt: OptimizerState,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn from_trainer(
        t: &Trainer,
        vocab: &Vocabulary,
        config_digest: &str,
        corpus_digest: &str,
    ) -> Self {
        Self {
            config_digest: config_digest.to_string(),
            corpus_digest: corpus_digest.to_string(),
            model_config: t.model.cfg,
            train_config: t.cfg,
            step: t.step,
            params: t.store.clone(),
            opt: t.opt.clone(),
            vocab: vocab.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.bytes(CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        w.str(&self.config_digest);
        w.str(&self.corpus_digest);
        w.str(&serde_json::to_string(&self.model_config)?);
        w.str(&serde_json::to_string(&self.train_config)?);
        w.u64(self.step);
        w.u32(self.params.len() as u32);
        for (_, p) in self.params.iter() {
            w.str(&p.name);
            w.u8(p.tensor.requires_grad as u8);
            w.u32(p.tensor.shape().len() as u32);
            for &d in p.tensor.shape() {
                w.u64(d as u64);
            }
            w.f32s(p.tensor.data());
        }
        w.u64(self.opt.step);
        for (m, v) in self.opt.first.iter().zip(&self.opt.second) {
            w.f32s(m);
            w.f32s(v);
        }
        w.str(&self.vocab.to_file_string());
        Ok(w.buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let mut r = ByteReader::new(&bytes, path);
        if r.take(4, "magic")? != CKPT_MAGIC {
            return Err(r.error("bad magic, not a checkpoint"));
        }
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let config_digest = r.str("digest")?;
        let corpus_digest = r.str("corpus digest")?;
        let model_config: ModelConfig = serde_json::from_str(&r.str("model config")?)?;
        let train_config: TrainConfig = serde_json::from_str(&r.str("train config")?)?;
        let step = r.u64("step")?;
        let count = r.u32("parameter count")? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.str("parameter name")?;
            let trainable = r.u8("trainable flag")? != 0;
            let ndim = r.u32("rank")? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64("shape").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let data = r.f32s(shape.iter().product(), "parameter data")?;
            let id = params.insert(name, Tensor::new(shape, data)?);
            params.set_trainable(id, trainable);
        }
        let opt_step = r.u64("optimizer step")?;
        let mut first = Vec::with_capacity(count);
        let mut second = Vec::with_capacity(count);
        for (_, p) in params.iter() {
            first.push(r.f32s(p.tensor.numel(), "first moment")?);
            second.push(r.f32s(p.tensor.numel(), "second moment")?);
        }
        let vocab = Vocabulary::parse(&r.str("vocabulary")?, path)?;
        r.finish()?;
        Ok(Self {
            config_digest,
            corpus_digest,
            model_config,
            step,
            opt: OptimizerState {
                config: train_config.adamw,
                step: opt_step,
                first,
                second,
            },
            train_config,
            params,
            vocab,
        })
    }

    /// Rebuilds the model and verifies the stored parameter layout.
    pub fn model(&self) -> Result<(Model, ParamStore<f32>)> {
        let (model, mut store) = Model::new(self.model_config, 0)?;
        store.copy_values_from(&self.params)?;
        for (id, p) in self.params.iter() {
            store.set_trainable(id, p.tensor.requires_grad);
        }
        Ok((model, store))
    }

    /// Trainer positioned exactly where this checkpoint was taken.
    pub fn resume(&self) -> Result<Trainer> {
        let (model, store) = self.model()?;
        let mut t = Trainer::new(model, store, self.train_config)?;
        t.opt = self.opt.clone();
        t.step = self.step;
        Ok(t)
    }
}

/// Writes metrics as JSON lines.
pub fn write_metrics(path: impl AsRef<Path>, metrics: &[Metrics]) -> Result<()> {
    let mut s = String::new();
    for m in metrics {
        s.push_str(&serde_json::to_string(m)?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(g: &Graph<f64>, rows: &[Vec<f64>]) -> Var<f64> {
        g.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn single_pair_is_zero() {
        let g = Graph::<f64>::new();
        let v = unit(&g, &[vec![0.6, 0.8]]);
        let t = unit(&g, &[vec![1.0, 0.0]]);
        let lt = g.constant(Tensor::scalar(0.07f64.ln()));
        assert_eq!(contrastive_loss(&g, &v, &t, &lt).unwrap().item(), 0.0);
    }

    #[test]
    fn orthogonal_pair_value() {
        let g = Graph::<f64>::new();
        let e = unit(&g, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let lt = g.constant(Tensor::scalar(0.0));
        let l = contrastive_loss(&g, &e, &e, &lt).unwrap().item();
        let expect = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_rejected() {
        let g = Graph::<f64>::new();
        let v = unit(&g, &[vec![1.0, 1.0]]);
        let lt = g.constant(Tensor::scalar(0.0));
        assert!(contrastive_loss(&g, &v, &v, &lt).is_err());
    }

    #[test]
    fn total_loss_weights() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(0.5));
        let b = g.constant(Tensor::scalar(0.25));
        assert_eq!(
            total_loss(&g, &a, &b, &LossWeights::default())
                .unwrap()
                .item(),
            1.0
        );
        let pure = LossWeights {
            lambda_rep: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&g, &a, &b, &pure).unwrap().item(), 0.5);
    }

    #[test]
    fn caption_length_mismatch() {
        let g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros([2, 16]));
        assert!(caption_loss(&g, &logits, &[1], Reduction::Sum).is_err());
        let l = caption_loss(&g, &logits, &[4, 5], Reduction::Mean)
            .unwrap()
            .item();
        assert!((l - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rewrite_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(*sample_rewrite(&["only"], &mut rng).unwrap(), "only");
        assert!(sample_rewrite::<&str, _>(&[], &mut rng).is_err());
    }
}
