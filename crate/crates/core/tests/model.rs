mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use slidelm::config::RunConfig;
use slidelm::encoder::top_attended_tiles;
use slidelm::model::Model;
use slidelm::{Graph, ParamStore, Tensor};

use common::{desk_encoder, permute_rows, randn, rng};

const VOCAB: usize = 30;

fn desk_model() -> (Model, ParamStore<f32>) {
    let cfg = RunConfig::desk();
    Model::new(cfg.model_config_for(VOCAB), cfg.seed).unwrap()
}

fn concat(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    let rows: Vec<Vec<f32>> = (0..a.rows())
        .map(|i| a.row(i).to_vec())
        .chain((0..b.rows()).map(|i| b.row(i).to_vec()))
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn encoder_ignores_tile_order(n in 1usize..60, seed in 0u64..1000) {
        let (enc, store) = desk_encoder(4, 7);
        let mut r = rng(seed);
        let tiles: Tensor<f32> = randn(&mut r, &[n, 64]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let a = enc.encode_tiles(&store, &tiles).unwrap();
        let b = enc.encode_tiles(&store, &permute_rows(&tiles, &order)).unwrap();
        prop_assert!(a.slide_embedding.value().max_abs_diff(b.slide_embedding.value()) < 1e-5);
        prop_assert!(a.context_latents.value().max_abs_diff(b.context_latents.value()) < 1e-5);
    }

    #[test]
    fn cached_and_reprojected_encodings_agree(depth in 1usize..9, n in 1usize..40, seed in 0u64..1000) {
        let (enc, store) = desk_encoder(depth, 8);
        let tiles: Tensor<f32> = randn(&mut rng(seed), &[n, 64]);
        let g = Graph::inference();
        let x = g.constant(tiles);
        let a = enc.encode(&g, &store, &x).unwrap();
        let b = enc.encode_reprojecting(&g, &store, &x).unwrap();
        prop_assert!(a.slide_embedding.value().max_abs_diff(b.slide_embedding.value()) <= 1e-6);
        prop_assert_eq!(a.kv_projections, depth.min(2));
        prop_assert_eq!(b.kv_projections, depth);
        prop_assert_eq!(a.block_outputs.len(), depth);
    }
}

#[test]
fn duplicating_every_tile_leaves_the_encoding_unchanged() {
    let (enc, store) = desk_encoder(4, 9);
    let tiles: Tensor<f32> = randn(&mut rng(10), &[13, 64]);
    let a = enc.encode_tiles(&store, &tiles).unwrap();
    let b = enc.encode_tiles(&store, &concat(&tiles, &tiles)).unwrap();
    assert!(
        a.slide_embedding
            .value()
            .max_abs_diff(b.slide_embedding.value())
            < 1e-5
    );
}

#[test]
fn final_cross_attention_rows_are_distributions() {
    let (enc, store) = desk_encoder(4, 11);
    let n = 21;
    let out = enc
        .encode_tiles(&store, &randn(&mut rng(12), &[n, 64]))
        .unwrap();
    let w = &out.last_xattn_weights;
    assert_eq!(w.shape(), [17, n]);
    for i in 0..17 {
        let s: f64 = w.row(i).iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
    let top = top_attended_tiles(w, 3).unwrap();
    assert_eq!(top.len(), 3);
    assert!(top.windows(2).all(|p| p[0].1 >= p[1].1));
    let best = (0..n)
        .max_by(|&a, &b| w.row(0)[a].total_cmp(&w.row(0)[b]).then(b.cmp(&a)))
        .unwrap();
    assert_eq!(top[0].0, best);
}

fn logits_for(
    model: &Model,
    store: &ParamStore<f32>,
    ids: &[usize],
    ctx: &Tensor<f32>,
) -> Tensor<f32> {
    let g = Graph::inference();
    let (hidden, _) = model.decoder.unimodal_forward(&g, store, ids).unwrap();
    let c = g.constant(ctx.clone());
    model
        .decoder
        .multimodal_forward(&g, store, &hidden, &c)
        .unwrap()
        .to_tensor()
}

#[test]
fn decoder_is_causal() {
    let (model, store) = desk_model();
    let mut r = rng(13);
    let ctx: Tensor<f32> = randn(&mut r, &[16, 64]);
    let ids: Vec<usize> = (0..10).map(|_| r.random_range(1..VOCAB - 1)).collect();
    let base = logits_for(&model, &store, &ids, &ctx);
    for j in 0..ids.len() {
        let mut changed = ids.clone();
        changed[j] = if ids[j] == 4 { 5 } else { 4 };
        let other = logits_for(&model, &store, &changed, &ctx);
        for i in 0..ids.len() {
            let same = base.row(i) == other.row(i);
            assert_eq!(same, i < j, "row {i} after changing token {j}");
        }
    }
}

#[test]
fn language_states_never_see_cls_and_cls_sees_every_token() {
    let (model, mut store) = desk_model();
    let ids = [1, 5, 6, 7, 8];
    let run = |store: &ParamStore<f32>, ids: &[usize]| {
        let g = Graph::inference();
        let (h, c) = model.decoder.unimodal_forward(&g, store, ids).unwrap();
        (h.to_tensor(), c.to_tensor())
    };
    let (h0, c0) = run(&store, &ids);
    assert_eq!(h0.shape(), [5, 64]);
    assert_eq!(c0.shape(), [1, 64]);

    let cls = model.decoder.cls_id();
    let tok = store.tensor_mut(model.decoder.token_embedding);
    let width = tok.cols();
    for k in 0..width {
        tok.data_mut()[cls * width + k] += 0.5;
    }
    let (h1, c1) = run(&store, &ids);
    assert_eq!(h0, h1);
    assert!(c0.max_abs_diff(&c1) > 1e-4);

    for j in 0..ids.len() {
        let mut changed = ids;
        changed[j] = 9;
        let (_, c) = run(&store, &changed);
        assert!(c.max_abs_diff(&c1) > 1e-6, "token {j} does not reach CLS");
    }
}

#[test]
fn text_embedding_does_not_depend_on_slide_context() {
    let (model, store) = desk_model();
    let g = Graph::inference();
    let a = model.embed_text(&g, &store, &[1, 4, 5]).unwrap();
    let norm: f64 = a
        .data()
        .iter()
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!((norm - 1.0).abs() < 1e-5);
    let ctx_a: Tensor<f32> = randn(&mut rng(14), &[16, 64]);
    let ctx_b: Tensor<f32> = randn(&mut rng(15), &[16, 64]);
    let la = logits_for(&model, &store, &[1, 4, 5], &ctx_a);
    let lb = logits_for(&model, &store, &[1, 4, 5], &ctx_b);
    assert!(la.max_abs_diff(&lb) > 1e-6);
    assert_eq!(la.shape(), [3, VOCAB]);
}
