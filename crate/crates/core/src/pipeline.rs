//! End-to-end runs over a synthetic corpus: pretraining and the evaluation
//! modes, with their result records.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{Corpus, Split, KEYWORDS};
use crate::embed::SpecimenBag;
use crate::error::{Error, Result};
use crate::eval::{
    embed_slide, generate_report, linear_probe, macro_auroc_ovr, subset_fraction_harness,
    zero_shot_classify, ProbeResult, PromptEmbeddings, PromptSet, SubsetReport,
};
use crate::model::Model;
use crate::params::ParamStore;
use crate::text::Vocabulary;
use crate::train::{Checkpoint, Metrics, Trainer};

/// Builds a fresh trainer for `cfg` with the corpus vocabulary.
pub fn new_trainer(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Trainer> {
    let (model, store) = Model::new(cfg.model_config_for(vocab.len()), cfg.seed)?;
    Trainer::new(model, store, cfg.train_config())
}

/// Runs optimizer steps until `trainer.step == steps`, calling `on_step`
/// after each.
pub fn pretrain(
    trainer: &mut Trainer,
    corpus: &Corpus,
    bags: &HashMap<String, SpecimenBag>,
    steps: u64,
    mut on_step: impl FnMut(&Metrics),
) -> Result<Vec<Metrics>> {
    let data = corpus.examples(bags, Split::Train)?;
    let mut out = Vec::new();
    while trainer.step < steps {
        let m = trainer.step_on(&data)?;
        on_step(&m);
        out.push(m);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZeroShotRecord {
    pub specimen_id: String,
    pub label: Option<String>,
    pub predicted: String,
    pub probabilities: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZeroShotReport {
    pub config_digest: String,
    pub macro_auroc: Option<f64>,
    pub accuracy: Option<f64>,
    pub records: Vec<ZeroShotRecord>,
}

/// Zero-shot classification of every specimen in `specimens`; macro
/// one-vs-rest AUROC is reported when every label names a prompt class.
pub fn zero_shot_eval(
    model: &Model,
    store: &ParamStore<f32>,
    vocab: &Vocabulary,
    prompts: &PromptSet,
    specimens: &[(&str, &SpecimenBag, Option<String>)],
    config_digest: &str,
) -> Result<ZeroShotReport> {
    let embedded = PromptEmbeddings::new(model, store, vocab, prompts)?;
    let tau = model.tau(store);
    let classes: Vec<&String> = prompts.classes.keys().collect();
    let mut records = Vec::with_capacity(specimens.len());
    for (id, bag, label) in specimens {
        let slide = embed_slide(model, store, &bag.embeddings)?;
        let r = zero_shot_classify(&slide, &embedded, tau)?;
        records.push(ZeroShotRecord {
            specimen_id: id.to_string(),
            label: label.clone(),
            predicted: r.predicted,
            probabilities: r.probabilities,
        });
    }
    let labelled = !records.is_empty()
        && specimens
            .iter()
            .all(|(_, _, l)| l.as_ref().is_some_and(|l| prompts.classes.contains_key(l)));
    let (macro_auroc, accuracy) = if labelled {
        let probs: Vec<Vec<f64>> = records
            .iter()
            .map(|r| classes.iter().map(|c| r.probabilities[*c]).collect())
            .collect();
        let labels: Vec<usize> = records
            .iter()
            .map(|r| {
                classes
                    .iter()
                    .position(|c| r.label.as_ref() == Some(*c))
                    .expect("label is a class")
            })
            .collect();
        let correct = records
            .iter()
            .filter(|r| r.label.as_ref() == Some(&r.predicted))
            .count();
        (
            Some(macro_auroc_ovr(&probs, &labels, classes.len())?),
            Some(correct as f64 / records.len() as f64),
        )
    } else {
        (None, None)
    };
    Ok(ZeroShotReport {
        config_digest: config_digest.to_string(),
        macro_auroc,
        accuracy,
        records,
    })
}

/// Zero-shot evaluation of a corpus split against the corpus prompts.
pub fn zero_shot_split(
    model: &Model,
    store: &ParamStore<f32>,
    corpus: &Corpus,
    bags: &HashMap<String, SpecimenBag>,
    split: Split,
    config_digest: &str,
) -> Result<ZeroShotReport> {
    let specimens: Vec<_> = corpus
        .labeled(bags, split)?
        .into_iter()
        .map(|(id, bag, label)| (id, bag, KEYWORDS.get(label).map(|k| k.to_string())))
        .collect();
    zero_shot_eval(
        model,
        store,
        &corpus.vocab,
        &corpus.prompts,
        &specimens,
        config_digest,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerationRecord {
    pub specimen_id: String,
    pub keyword: String,
    pub text: String,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerationReport {
    pub config_digest: String,
    /// Share of generated reports containing the specimen's keyword.
    pub keyword_rate: f64,
    pub records: Vec<GenerationRecord>,
}

/// Greedy report generation for a corpus split.
pub fn generation_split(
    model: &Model,
    store: &ParamStore<f32>,
    corpus: &Corpus,
    bags: &HashMap<String, SpecimenBag>,
    split: Split,
    max_len: usize,
    config_digest: &str,
) -> Result<GenerationReport> {
    let mut records = Vec::new();
    for (id, bag, label) in corpus.labeled(bags, split)? {
        let g = generate_report(model, store, &corpus.vocab, &bag.embeddings, max_len)?;
        records.push(GenerationRecord {
            specimen_id: id.to_string(),
            keyword: KEYWORDS[label].to_string(),
            text: g.text,
            truncated: g.truncated,
        });
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument("no specimens in split".into()));
    }
    let hits = records
        .iter()
        .filter(|r| crate::text::split_words(&r.text).contains(&r.keyword))
        .count();
    Ok(GenerationReport {
        config_digest: config_digest.to_string(),
        keyword_rate: hits as f64 / records.len() as f64,
        records,
    })
}

/// Slide embeddings (before projection) of a list of bags.
pub fn slide_embeddings(
    model: &Model,
    store: &ParamStore<f32>,
    bags: &[&SpecimenBag],
) -> Result<Vec<Vec<f64>>> {
    bags.iter()
        .map(|b| {
            Ok(model
                .encoder
                .encode_tiles(store, &b.embeddings)?
                .slide_embedding
                .value()
                .to_f64_vec())
        })
        .collect()
}

/// Linear probe on the binary transfer task using `store`'s encoder.
pub fn transfer_probe(
    cfg: &RunConfig,
    model: &Model,
    store: &ParamStore<f32>,
    corpus: &Corpus,
    bags: &HashMap<String, SpecimenBag>,
) -> Result<ProbeResult> {
    let split_xy = |split| -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
        let items = corpus.labeled(bags, split)?;
        let b: Vec<&SpecimenBag> = items.iter().map(|(_, b, _)| *b).collect();
        Ok((
            slide_embeddings(model, store, &b)?,
            items.iter().map(|(_, _, l)| *l == 1).collect(),
        ))
    };
    let (tx, ty) = split_xy(Split::TransferTrain)?;
    let (vx, vy) = split_xy(Split::TransferTest)?;
    linear_probe(&tx, &ty, &vx, &vy, &cfg.probe_config())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeComparison {
    pub config_digest: String,
    pub pretrained: ProbeResult,
    pub random_init: ProbeResult,
    pub advantage: f64,
}

/// Transfer probe on pretrained weights versus the untrained
/// initialization drawn from the same seed.
pub fn probe_comparison(
    cfg: &RunConfig,
    model: &Model,
    store: &ParamStore<f32>,
    corpus: &Corpus,
    bags: &HashMap<String, SpecimenBag>,
) -> Result<ProbeComparison> {
    let (fresh, fresh_store) = Model::new(model.cfg, cfg.seed)?;
    let pretrained = transfer_probe(cfg, model, store, corpus, bags)?;
    let random_init = transfer_probe(cfg, &fresh, &fresh_store, corpus, bags)?;
    Ok(ProbeComparison {
        config_digest: cfg.digest(),
        advantage: pretrained.heldout_auroc - random_init.heldout_auroc,
        pretrained,
        random_init,
    })
}

/// Label-efficiency harness on the transfer task.
pub fn transfer_harness(
    cfg: &RunConfig,
    store: &ParamStore<f32>,
    corpus: &Corpus,
    bags: &HashMap<String, SpecimenBag>,
) -> Result<SubsetReport> {
    let train = corpus.transfer_bags(bags, Split::TransferTrain)?;
    let test = corpus.transfer_bags(bags, Split::TransferTest)?;
    subset_fraction_harness(
        cfg.encoder_config(),
        store,
        &train,
        &test,
        &cfg.harness_config(),
    )
}

/// Fails unless `ckpt` was produced under `cfg`.
pub fn check_checkpoint(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<()> {
    let expected = cfg.digest();
    if ckpt.config_digest != expected {
        return Err(Error::DigestMismatch {
            expected,
            found: ckpt.config_digest.clone(),
        });
    }
    Ok(())
}

/// Fails unless `ckpt` was trained on the corpus with digest `corpus_digest`.
pub fn check_corpus(ckpt: &Checkpoint, corpus_digest: &str) -> Result<()> {
    if ckpt.corpus_digest != corpus_digest {
        return Err(Error::DigestMismatch {
            expected: ckpt.corpus_digest.clone(),
            found: corpus_digest.to_string(),
        });
    }
    Ok(())
}
