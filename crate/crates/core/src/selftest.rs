//! Built-in invariant suite run by `slidelm selftest`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autograd::{Graph, Reduction, Var};
use crate::config::RunConfig;
use crate::corpus::gen_corpus;
use crate::encoder::{EncoderConfig, SlideEncoder};
use crate::error::Result;
use crate::gradcheck::{check_inputs, check_params, FD_TOLERANCE, GRADCHECK_JITTER};
use crate::model::Model;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;
use crate::text::TokenSequence;
use crate::tiling::{is_foreground_hsv, rgb_to_hsv, tile_slide, SlideImage};
use crate::train::{batch_loss, contrastive_loss, LossWeights, TrainItem};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn randn<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .expect("shape matches")
}

type Check = fn() -> Result<(bool, String)>;

type OpCheck = fn(&Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>;

fn op_checks() -> Vec<(&'static str, Vec<Vec<usize>>, OpCheck)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            g.sum(&g.matmul(&v[0], &v[1])?)
        }),
        ("matmul_t", vec![vec![3, 4], vec![5, 4]], |g, v| {
            let y = g.matmul_t(&v[0], &v[1])?;
            g.sum(&g.mul(&y, &y)?)
        }),
        ("add_row", vec![vec![3, 4], vec![1, 4]], |g, v| {
            let y = g.add_row(&v[0], &v[1])?;
            g.sum(&g.mul(&y, &y)?)
        }),
        (
            "layer_norm",
            vec![vec![3, 6], vec![1, 6], vec![1, 6], vec![3, 6]],
            |g, v| {
                let y = g.layer_norm(&v[0], &v[1], &v[2], 1e-5)?;
                g.sum(&g.mul(&y, &v[3])?)
            },
        ),
        ("softmax", vec![vec![3, 5], vec![3, 5]], |g, v| {
            let y = g.softmax(&v[0], 2.0, None)?;
            g.sum(&g.mul(&y, &v[1])?)
        }),
        ("gelu", vec![vec![4, 3]], |g, v| g.sum(&g.gelu(&v[0])?)),
        ("geglu", vec![vec![3, 8], vec![3, 4]], |g, v| {
            let y = g.geglu(&v[0])?;
            g.sum(&g.mul(&y, &v[1])?)
        }),
        ("l2_normalize", vec![vec![3, 4], vec![3, 4]], |g, v| {
            let y = g.l2_normalize(&v[0])?;
            g.sum(&g.mul(&y, &v[1])?)
        }),
        ("cross_entropy", vec![vec![4, 6]], |g, v| {
            g.cross_entropy(&v[0], &[1, 0, 5, 2], Some(0), Reduction::Mean)
        }),
        ("bce_with_logits", vec![vec![4, 1]], |g, v| {
            g.bce_with_logits(&v[0], &[1.0, 0.0, 1.0, 0.0])
        }),
        ("exp_scale_by", vec![vec![2, 3], vec![1]], |g, v| {
            g.sum(&g.scale_by(&g.exp(&v[0])?, &v[1])?)
        }),
        ("slice_concat_gather", vec![vec![4, 3]], |g, v| {
            let a = g.slice_rows(&v[0], 1, 3)?;
            let b = g.slice_cols(&v[0], 0, 2)?;
            let c = g.concat_cols(&[&g.transpose(&b)?, &g.transpose(&b)?])?;
            let d = g.gather_rows(&v[0], &[0, 3, 3])?;
            let e = g.concat_rows(&[&a, &d])?;
            let s = g.add(&g.sum(&g.mul(&e, &e)?)?, &g.sum(&g.mul(&c, &c)?)?)?;
            g.mean(&g.sub(&s, &g.scale(&s, 0.5)?)?)
        }),
    ]
}

fn gradcheck_ops() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = ("", 0.0f64);
    for (name, shapes, f) in op_checks() {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(&mut rng, s)).collect();
        let err = check_inputs(&inputs, f)?;
        if err > worst.1 {
            worst = (name, err);
        }
    }
    Ok((
        worst.1 < FD_TOLERANCE,
        format!("worst relative error {:.2e} ({})", worst.1, worst.0),
    ))
}

fn tiny_model() -> Result<(Model, ParamStore<f32>)> {
    let cfg = RunConfig {
        depth: 2,
        num_latents: 3,
        d_latent: 8,
        d_kqv: 8,
        mlp_inner: 8,
        tile_dim: 6,
        latent_layers: 1,
        latent_heads: 2,
        dec_width: 8,
        dec_layers: 2,
        dec_unimodal_layers: 1,
        dec_heads: 2,
        dec_max_len: 8,
        proj_dim: 4,
        ..RunConfig::desk()
    };
    Model::new(cfg.model_config_for(9), 5)
}

fn gradcheck_end_to_end() -> Result<(bool, String)> {
    let (model, store) = tiny_model()?;
    let mut store = store.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    crate::gradcheck::jitter_params(&mut store, GRADCHECK_JITTER, &mut rng);
    let items: Vec<TrainItem<f64>> = (0..2)
        .map(|i| TrainItem {
            tiles: randn(&mut rng, &[3 + i, 6]),
            input: vec![1, 4 + i, 5],
            target: vec![4 + i, 5, 2],
        })
        .collect();
    let err = check_params(&store, Some(200), 3, |g, s| {
        Ok(batch_loss(
            g,
            s,
            &model,
            &items,
            &LossWeights::default(),
            Reduction::Sum,
        )?
        .total)
    })?;
    Ok((
        err < FD_TOLERANCE,
        format!("relative error {err:.2e} on 200 sampled coordinates"),
    ))
}

fn desk_encoder(depth: usize) -> Result<(SlideEncoder, ParamStore<f32>)> {
    let cfg = EncoderConfig {
        depth,
        ..RunConfig::desk().encoder_config()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let enc = SlideEncoder::new(&mut store, &mut Init::new(&mut rng), "encoder", cfg)?;
    Ok((enc, store))
}

fn kv_cache() -> Result<(bool, String)> {
    let (enc, store) = desk_encoder(8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    let mut projections = Vec::new();
    for _ in 0..5 {
        let n = rng.random_range(5..40);
        let tiles: Tensor<f32> = randn(&mut rng, &[n, 64]).cast();
        let g = Graph::inference();
        let t = g.constant(tiles);
        let a = enc.encode(&g, &store, &t)?;
        let b = enc.encode_reprojecting(&g, &store, &t)?;
        worst = worst.max(
            a.slide_embedding
                .value()
                .max_abs_diff(b.slide_embedding.value()),
        );
        worst = worst.max(
            a.context_latents
                .value()
                .max_abs_diff(b.context_latents.value()),
        );
        projections.push(a.kv_projections);
    }
    let ok = worst <= 1e-6 && projections.iter().all(|&p| p == 2);
    Ok((
        ok,
        format!("max diff {worst:.2e}, projections {projections:?}"),
    ))
}

fn permutation() -> Result<(bool, String)> {
    let (enc, store) = desk_encoder(4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let n = rng.random_range(5..40);
        let tiles: Tensor<f32> = randn(&mut rng, &[n, 64]).cast();
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let rows: Vec<Vec<f32>> = order.iter().map(|&i| tiles.row(i).to_vec()).collect();
        let shuffled = Tensor::from_rows(&rows)?;
        let a = enc.encode_tiles(&store, &tiles)?;
        let b = enc.encode_tiles(&store, &shuffled)?;
        worst = worst.max(
            a.slide_embedding
                .value()
                .max_abs_diff(b.slide_embedding.value()),
        );
    }
    Ok((worst < 1e-5, format!("max diff {worst:.2e}")))
}

fn loss_units() -> Result<(bool, String)> {
    let g = Graph::<f64>::inference();
    let unit = |rows: &[Vec<f64>]| g.constant(Tensor::from_rows(rows).expect("rows"));
    let log_tau = g.constant(Tensor::scalar(0.0));
    let one = contrastive_loss(
        &g,
        &unit(&[vec![1.0, 0.0]]),
        &unit(&[vec![0.0, 1.0]]),
        &log_tau,
    )?;
    let eye = unit(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let two = contrastive_loss(&g, &eye, &eye, &log_tau)?;
    let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
    let v = 37;
    let logits = g.constant(Tensor::zeros(vec![4, v]));
    let ce = g.cross_entropy(&logits, &[3, 4, 5, 6], None, Reduction::Mean)?;
    let ok = one.item() == 0.0
        && (two.item() - expected).abs() < 1e-6
        && (ce.item() - (v as f64).ln()).abs() < 1e-6;
    Ok((
        ok,
        format!(
            "N=1 {:.3e}, N=2 {:.9} vs {expected:.9}, uniform CE {:.9}",
            one.item(),
            two.item(),
            ce.item()
        ),
    ))
}

fn tiling() -> Result<(bool, String)> {
    let hsv_ok = rgb_to_hsv(255, 255, 255) == (0, 0, 255)
        && rgb_to_hsv(200, 120, 160) == (165, 102, 200)
        && is_foreground_hsv((90, 8, 103))
        && is_foreground_hsv((180, 255, 255))
        && !is_foreground_hsv((89, 8, 103))
        && !is_foreground_hsv((90, 7, 103))
        && !is_foreground_hsv((90, 8, 102));
    let mut img = SlideImage::filled(224, 224, [255, 255, 255], 0.5)?;
    for y in 0..7 * 16 {
        for x in 0..7 * 16 {
            img.set_pixel(x, y, [200, 120, 160]);
        }
    }
    let kept = tile_slide("s", &img);
    let threshold_ok = kept.len() == 1 && kept[0].tissue_fraction == 0.25;
    Ok((
        hsv_ok && threshold_ok,
        format!("hsv {hsv_ok}, quarter threshold {threshold_ok}"),
    ))
}

fn corpus_determinism() -> Result<(bool, String)> {
    let cfg = RunConfig {
        specimens_per_concept: 3,
        heldout_per_concept: 1,
        transfer_per_class: 4,
        ..RunConfig::desk()
    };
    let a = gen_corpus(&cfg)?;
    let b = gen_corpus(&cfg)?;
    let same = a.store.raw_vectors() == b.store.raw_vectors()
        && a.reports == b.reports
        && a.splits == b.splits
        && a.vocab.to_file_string() == b.vocab.to_file_string();
    Ok((same, format!("{} tiles regenerated", a.store.len())))
}

fn token_round_trip() -> Result<(bool, String)> {
    let cfg = RunConfig {
        specimens_per_concept: 2,
        heldout_per_concept: 1,
        transfer_per_class: 4,
        ..RunConfig::desk()
    };
    let c = gen_corpus(&cfg)?;
    let mut bad = 0;
    for r in &c.reports {
        for t in &r.rewrites {
            let seq: TokenSequence = c.vocab.tokenize(t);
            let back = c.vocab.detokenize(&seq.ids);
            if c.vocab.tokenize(&back) != seq {
                bad += 1;
            }
        }
    }
    Ok((bad == 0, format!("{bad} mismatches")))
}

/// Runs every check; a check that errors counts as failed.
pub fn run_all() -> Vec<CheckOutcome> {
    let checks: Vec<(&str, Check)> = vec![
        ("gradcheck-ops", gradcheck_ops),
        ("gradcheck-end-to-end", gradcheck_end_to_end),
        ("kv-cache-equivalence", kv_cache),
        ("permutation-invariance", permutation),
        ("loss-unit-values", loss_units),
        ("tiling-rules", tiling),
        ("corpus-determinism", corpus_determinism),
        ("token-round-trip", token_round_trip),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let t0 = Instant::now();
            let (passed, detail) = match f() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckOutcome {
                name: name.to_string(),
                passed,
                detail,
                seconds: t0.elapsed().as_secs_f64(),
            }
        })
        .collect()
}
