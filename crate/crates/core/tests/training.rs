use std::collections::HashMap;

use slidelm::config::RunConfig;
use slidelm::corpus::{gen_corpus, Corpus, Split};
use slidelm::embed::SpecimenBag;
use slidelm::model::Model;
use slidelm::optim::cosine_lr;
use slidelm::pipeline::{new_trainer, pretrain};
use slidelm::train::{batch_loss, Checkpoint, LossWeights, TrainItem};
use slidelm::{Graph, ParamStore, Reduction};

fn small_config() -> RunConfig {
    RunConfig {
        specimens_per_concept: 4,
        heldout_per_concept: 1,
        transfer_per_class: 4,
        tiles_min: 4,
        tiles_max: 8,
        batch_size: 4,
        accum: 2,
        steps: 4,
        warmup_steps: 2,
        total_steps: 4,
        ..RunConfig::desk()
    }
}

fn corpus(cfg: &RunConfig) -> (Corpus, HashMap<String, SpecimenBag>) {
    let c = gen_corpus(cfg).unwrap();
    let bags = c.bags().unwrap();
    (c, bags)
}

fn checkpoint_bytes(cfg: &RunConfig, c: &Corpus, t: &slidelm::train::Trainer) -> Vec<u8> {
    Checkpoint::from_trainer(t, &c.vocab, &cfg.digest(), &c.digest)
        .to_bytes()
        .unwrap()
}

#[test]
fn training_is_bit_reproducible_and_follows_the_schedule() {
    let cfg = small_config();
    let (c, bags) = corpus(&cfg);
    let run = || {
        let mut t = new_trainer(&cfg, &c.vocab).unwrap();
        let m = pretrain(&mut t, &c, &bags, cfg.steps, |_| {}).unwrap();
        (checkpoint_bytes(&cfg, &c, &t), m)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let sched = cfg.train_config().schedule;
    for (k, m) in ma.iter().enumerate() {
        assert_eq!(m.step, k as u64 + 1);
        assert_eq!(m.lr, cosine_lr(m.step, &sched));
        assert!(m.l_tot.is_finite() && m.grad_norm > 0.0);
        assert!((m.l_tot - (m.l_con + 2.0 * m.l_rep)).abs() < 1e-4 * m.l_tot.abs().max(1.0));
    }
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let cfg = small_config();
    let (c, bags) = corpus(&cfg);
    let mut full = new_trainer(&cfg, &c.vocab).unwrap();
    let full_metrics = pretrain(&mut full, &c, &bags, 4, |_| {}).unwrap();

    let mut half = new_trainer(&cfg, &c.vocab).unwrap();
    let mut metrics = pretrain(&mut half, &c, &bags, 2, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    Checkpoint::from_trainer(&half, &c.vocab, &cfg.digest(), &c.digest)
        .save(&path)
        .unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(
        loaded.to_bytes().unwrap(),
        checkpoint_bytes(&cfg, &c, &half)
    );
    let mut resumed = loaded.resume().unwrap();
    metrics.extend(pretrain(&mut resumed, &c, &bags, 4, |_| {}).unwrap());

    assert_eq!(metrics, full_metrics);
    assert_eq!(
        checkpoint_bytes(&cfg, &c, &resumed),
        checkpoint_bytes(&cfg, &c, &full)
    );
}

#[test]
fn checkpoint_restores_an_identical_model() {
    let cfg = small_config();
    let (c, bags) = corpus(&cfg);
    let mut t = new_trainer(&cfg, &c.vocab).unwrap();
    pretrain(&mut t, &c, &bags, 1, |_| {}).unwrap();
    let ckpt = Checkpoint::from_trainer(&t, &c.vocab, &cfg.digest(), &c.digest);
    let (model, store) = ckpt.model().unwrap();
    let bag = bags.values().next().unwrap();
    let a = t
        .model
        .encoder
        .encode_tiles(&t.store, &bag.embeddings)
        .unwrap();
    let b = model.encoder.encode_tiles(&store, &bag.embeddings).unwrap();
    assert_eq!(a.slide_embedding.value(), b.slide_embedding.value());
}

/// Eight training items in f64 with a fixed rewrite per specimen.
fn items64(c: &Corpus, bags: &HashMap<String, SpecimenBag>) -> Vec<TrainItem<f64>> {
    let examples = c.examples(bags, Split::Train).unwrap();
    examples
        .iter()
        .step_by(2)
        .take(8)
        .enumerate()
        .map(|(i, ex)| TrainItem::new(ex.tiles.clone(), &ex.rewrites[i % ex.rewrites.len()]).cast())
        .collect()
}

fn flat_grads(store: &ParamStore<f64>) -> Vec<f64> {
    store
        .iter()
        .flat_map(|(_, p)| {
            p.tensor
                .grad
                .clone()
                .unwrap_or_else(|| vec![0.0; p.tensor.numel()])
        })
        .collect()
}

/// Gradient accumulated over micro-batches, each loss scaled by `1/k`.
fn accumulated(
    model: &Model,
    store: &mut ParamStore<f64>,
    micro: &[&[TrainItem<f64>]],
    w: &LossWeights,
) -> Vec<f64> {
    store.zero_grad();
    for items in micro {
        let g = Graph::new();
        let l = batch_loss(&g, store, model, items, w, Reduction::Sum).unwrap();
        let scaled = g.scale(&l.total, 1.0 / micro.len() as f64).unwrap();
        g.backward(&scaled).unwrap().accumulate_into(store);
    }
    let out = flat_grads(store);
    store.zero_grad();
    out
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

fn model64(cfg: &RunConfig, c: &Corpus) -> (Model, ParamStore<f64>) {
    let (model, store) = Model::new(cfg.model_config_for(c.vocab.len()), cfg.seed).unwrap();
    (model, store.cast())
}

#[test]
fn accumulation_matches_one_large_batch_for_per_sample_losses() {
    let cfg = small_config();
    let (c, bags) = corpus(&cfg);
    let items = items64(&c, &bags);
    let (model, mut store) = model64(&cfg, &c);
    let caption_only = LossWeights {
        lambda_con: 0.0,
        lambda_rep: 2.0,
    };
    let split = accumulated(
        &model,
        &mut store,
        &[&items[..4], &items[4..]],
        &caption_only,
    );
    let whole = accumulated(&model, &mut store, &[&items[..]], &caption_only);
    assert!(max_rel_diff(&split, &whole) < 1e-10);

    // With in-batch negatives the contrastive term depends on the split.
    let full = LossWeights::default();
    let split = accumulated(&model, &mut store, &[&items[..4], &items[4..]], &full);
    let whole = accumulated(&model, &mut store, &[&items[..]], &full);
    assert!(max_rel_diff(&split, &whole) > 1e-6);
}

#[test]
fn accumulated_gradient_is_the_gradient_of_the_micro_batch_mean() {
    let cfg = small_config();
    let (c, bags) = corpus(&cfg);
    let items = items64(&c, &bags);
    let (model, mut store) = model64(&cfg, &c);
    let w = LossWeights::default();
    let split = accumulated(&model, &mut store, &[&items[..4], &items[4..]], &w);

    let g = Graph::new();
    let a = batch_loss(&g, &store, &model, &items[..4], &w, Reduction::Sum).unwrap();
    let b = batch_loss(&g, &store, &model, &items[4..], &w, Reduction::Sum).unwrap();
    let mean = g.scale(&g.add(&a.total, &b.total).unwrap(), 0.5).unwrap();
    g.backward(&mean).unwrap().accumulate_into(&mut store);
    let direct = flat_grads(&store);
    assert!(max_rel_diff(&split, &direct) < 1e-12);
}

#[test]
fn frozen_parameters_do_not_move_under_the_large_preset_freeze() {
    let cfg = RunConfig {
        freeze: slidelm::decoder::FreezeMode::Paper,
        ..small_config()
    };
    let (c, bags) = corpus(&cfg);
    let mut t = new_trainer(&cfg, &c.vocab).unwrap();
    let before = t.store.clone();
    pretrain(&mut t, &c, &bags, 2, |_| {}).unwrap();
    let trainable = t.model.decoder.trainable_ids();
    let mut moved = 0;
    for id in t.model.decoder.ids() {
        let changed = t.store.tensor(id).data() != before.tensor(id).data();
        if trainable.contains(&id) {
            moved += usize::from(changed);
        } else {
            assert!(!changed, "{} moved", t.store.name(id));
        }
    }
    assert!(moved > 0);
}
