//! Slide-encoder fine-tuning with a linear task head, and the subset-fraction
//! label-efficiency harness.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::encoder::{EncoderConfig, SlideEncoder};
use crate::error::{Error, Result};
use crate::eval::auroc::auroc;
use crate::optim::{clip_grad_norm, cosine_lr, AdamWConfig, LrSchedule, OptimizerState};
use crate::params::{Init, Linear, ParamStore};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            lr: 1e-3,
            warmup_steps: 20,
            weight_decay: 1e-6,
            clip_norm: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Pretrained,
    Scratch,
}

/// A labelled specimen for a binary task.
#[derive(Clone, Debug)]
pub struct LabeledBag {
    pub tiles: Tensor<f32>,
    pub label: bool,
}

/// Encoder plus linear head, with parameters of their own.
pub struct Classifier {
    pub encoder: SlideEncoder,
    pub head: Linear,
    pub store: ParamStore<f32>,
}

impl Classifier {
    /// Fresh encoder from `seed`; in pretrained mode its values are then
    /// replaced by the same-named parameters of `pretrained`.
    pub fn new(
        cfg: EncoderConfig,
        init_mode: InitMode,
        pretrained: Option<&ParamStore<f32>>,
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, "finetune-init", &[]);
        let mut init = Init::new(&mut rng);
        let encoder = SlideEncoder::new(&mut store, &mut init, "encoder", cfg)?;
        let head = Linear::new(&mut store, &mut init, "head", cfg.d_latent, 1, true);
        if init_mode == InitMode::Pretrained {
            let src = pretrained.ok_or_else(|| {
                Error::InvalidArgument("pretrained mode needs pretrained weights".into())
            })?;
            let copied = store.load_matching(src);
            let expected = encoder.ids().len();
            if copied != expected {
                return Err(Error::InvalidArgument(format!(
                    "pretrained weights cover {copied} of {expected} encoder parameters"
                )));
            }
        }
        Ok(Self {
            encoder,
            head,
            store,
        })
    }

    pub fn score(&self, tiles: &Tensor<f32>) -> Result<f64> {
        let g = Graph::inference();
        let t = g.constant(tiles.clone());
        let enc = self.encoder.encode(&g, &self.store, &t)?;
        Ok(self
            .head
            .forward(&g, &self.store, &enc.slide_embedding)?
            .item() as f64)
    }

    pub fn evaluate(&self, data: &[LabeledBag]) -> Result<f64> {
        let scores = data
            .iter()
            .map(|b| self.score(&b.tiles))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<bool> = data.iter().map(|b| b.label).collect();
        auroc(&scores, &labels)
    }

    /// Binary cross-entropy training of encoder and head with AdamW under a
    /// warmup + cosine schedule. Batches come from the `finetune-batch`
    /// stream of `seed`.
    pub fn train(&mut self, data: &[LabeledBag], cfg: &FineTuneConfig, seed: u64) -> Result<()> {
        let pos = data.iter().filter(|b| b.label).count();
        if pos == 0 || pos == data.len() {
            return Err(Error::InvalidArgument(
                "fine-tuning needs both classes in the training set".into(),
            ));
        }
        let adamw = AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        };
        let sched = LrSchedule {
            base_lr: cfg.lr,
            warmup_steps: cfg.warmup_steps,
            total_steps: cfg.steps.max(1),
        };
        let mut opt = OptimizerState::new(adamw, &self.store);
        let batch = cfg.batch_size.min(data.len());
        for step in 0..cfg.steps {
            let mut rng = stream(seed, "finetune-batch", &[step]);
            let picks = sample(&mut rng, data.len(), batch).into_vec();
            let g = Graph::new();
            let mut logits = Vec::with_capacity(batch);
            let mut labels = Vec::with_capacity(batch);
            for i in picks {
                let t = g.constant(data[i].tiles.clone());
                let enc = self.encoder.encode(&g, &self.store, &t)?;
                logits.push(self.head.forward(&g, &self.store, &enc.slide_embedding)?);
                labels.push(if data[i].label { 1.0 } else { 0.0 });
            }
            let z = g.concat_rows(&logits.iter().collect::<Vec<_>>())?;
            let loss = g.bce_with_logits(&z, &labels)?;
            self.store.zero_grad();
            g.backward(&loss)?.accumulate_into(&mut self.store);
            clip_grad_norm(&mut self.store, cfg.clip_norm);
            opt.step(&mut self.store, cosine_lr(step + 1, &sched))?;
        }
        self.store.zero_grad();
        Ok(())
    }
}

/// Trains a classifier from the given initialization and returns its
/// held-out AUROC.
pub fn fine_tune(
    enc_cfg: EncoderConfig,
    pretrained: Option<&ParamStore<f32>>,
    init: InitMode,
    train: &[LabeledBag],
    test: &[LabeledBag],
    cfg: &FineTuneConfig,
    seed: u64,
) -> Result<f64> {
    let mut clf = Classifier::new(enc_cfg, init, pretrained, seed)?;
    clf.train(train, cfg, seed)?;
    clf.evaluate(test)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsetRun {
    pub fraction: f64,
    pub run: usize,
    pub init: InitMode,
    pub seed: u64,
    pub train_size: usize,
    pub auroc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsetCell {
    pub fraction: f64,
    pub init: InitMode,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsetReport {
    pub runs: Vec<SubsetRun>,
    pub cells: Vec<SubsetCell>,
    /// Scratch-initialized mean AUROC at fraction 1.0.
    pub scratch_full: f64,
    /// Smallest fraction whose pretrained mean reaches 99.5% of `scratch_full`.
    pub min_sufficient_fraction: Option<f64>,
}

/// Share of the scratch full-data AUROC a fraction must reach.
pub const SUFFICIENT_SHARE: f64 = 0.995;

impl SubsetReport {
    /// One row per fraction: `fraction  pretrained mean (std)  scratch mean (std)`.
    pub fn table(&self) -> String {
        let mut s = String::from("fraction  pretrained       scratch\n");
        let mut fractions: Vec<f64> = self.cells.iter().map(|c| c.fraction).collect();
        fractions.dedup();
        for f in fractions {
            let cell = |m: InitMode| self.cells.iter().find(|c| c.fraction == f && c.init == m);
            let fmt = |c: Option<&SubsetCell>| {
                c.map_or("-".to_string(), |c| format!("{:.4} ({:.4})", c.mean, c.std))
            };
            s.push_str(&format!(
                "{:<8.1}  {:<15}  {}\n",
                f,
                fmt(cell(InitMode::Pretrained)),
                fmt(cell(InitMode::Scratch))
            ));
        }
        match self.min_sufficient_fraction {
            Some(f) => s.push_str(&format!("min sufficient fraction: {f:.1}\n")),
            None => s.push_str("min sufficient fraction: none\n"),
        }
        s
    }
}

/// Stratified subset holding `round(fraction · n_c)` (at least one) of each
/// class, drawn from `seed`.
pub fn stratified_subset(data: &[LabeledBag], fraction: f64, seed: u64) -> Result<Vec<LabeledBag>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut rng = stream(seed, "subset", &[]);
    let mut out = Vec::new();
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..data.len())
            .filter(|&i| data[i].label == class)
            .collect();
        if idx.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "training data lacks class {class}"
            )));
        }
        idx.shuffle(&mut rng);
        let k = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len());
        out.extend(idx[..k].iter().map(|&i| data[i].clone()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub fractions: Vec<f64>,
    pub runs: usize,
    pub seed: u64,
    pub finetune: FineTuneConfig,
    pub parallel: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            fractions: (1..=10).map(|i| i as f64 / 10.0).collect(),
            runs: 3,
            seed: 0,
            finetune: FineTuneConfig::default(),
            parallel: true,
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Fine-tunes both initializations on a fresh stratified subset for every
/// (fraction, run) cell. Cell seeds derive from (master seed, fraction,
/// run), so results do not depend on scheduling.
pub fn subset_fraction_harness(
    enc_cfg: EncoderConfig,
    pretrained: &ParamStore<f32>,
    train: &[LabeledBag],
    test: &[LabeledBag],
    cfg: &HarnessConfig,
) -> Result<SubsetReport> {
    if cfg.fractions.is_empty() || cfg.runs == 0 {
        return Err(Error::InvalidArgument(
            "harness needs fractions and runs".into(),
        ));
    }
    let mut jobs = Vec::new();
    for &fraction in &cfg.fractions {
        for run in 0..cfg.runs {
            for init in [InitMode::Pretrained, InitMode::Scratch] {
                jobs.push((fraction, run, init));
            }
        }
    }
    let job = |&(fraction, run, init): &(f64, usize, InitMode)| -> Result<SubsetRun> {
        let per_mille = (fraction * 1000.0).round() as u64;
        let cell_seed = derive_seed(cfg.seed, "subset-cell", &[per_mille, run as u64]);
        let subset = stratified_subset(train, fraction, cell_seed)?;
        let auroc = fine_tune(
            enc_cfg,
            Some(pretrained),
            init,
            &subset,
            test,
            &cfg.finetune,
            cell_seed,
        )?;
        Ok(SubsetRun {
            fraction,
            run,
            init,
            seed: cell_seed,
            train_size: subset.len(),
            auroc,
        })
    };
    let runs: Vec<SubsetRun> = if cfg.parallel {
        jobs.par_iter().map(job).collect::<Result<_>>()?
    } else {
        jobs.iter().map(job).collect::<Result<_>>()?
    };
    let mut cells = Vec::new();
    for &fraction in &cfg.fractions {
        for init in [InitMode::Pretrained, InitMode::Scratch] {
            let xs: Vec<f64> = runs
                .iter()
                .filter(|r| r.fraction == fraction && r.init == init)
                .map(|r| r.auroc)
                .collect();
            let (mean, std) = mean_std(&xs);
            cells.push(SubsetCell {
                fraction,
                init,
                mean,
                std,
            });
        }
    }
    let scratch_full = cells
        .iter()
        .find(|c| c.fraction == 1.0 && c.init == InitMode::Scratch)
        .map(|c| c.mean)
        .ok_or_else(|| Error::InvalidArgument("fractions must include 1.0".into()))?;
    let mut sufficient: Vec<f64> = cells
        .iter()
        .filter(|c| c.init == InitMode::Pretrained && c.mean >= SUFFICIENT_SHARE * scratch_full)
        .map(|c| c.fraction)
        .collect();
    sufficient.sort_by(f64::total_cmp);
    Ok(SubsetReport {
        runs,
        cells,
        scratch_full,
        min_sufficient_fraction: sufficient.first().copied(),
    })
}
