//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use slidelm::config::RunConfig;
use slidelm::encoder::{EncoderConfig, SlideEncoder};
use slidelm::params::Init;
use slidelm::tiling::{is_foreground_rgb, SlideImage, TILE_SIZE};
use slidelm::{ParamStore, Real, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn<S: Real, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<S> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data)
        .expect("shape matches")
        .cast()
}

/// Desk-preset encoder with the given depth and seeded initialization.
pub fn desk_encoder(depth: usize, seed: u64) -> (SlideEncoder, ParamStore<f32>) {
    let cfg = EncoderConfig {
        depth,
        ..RunConfig::desk().encoder_config()
    };
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let enc = SlideEncoder::new(&mut store, &mut Init::new(&mut r), "encoder", cfg)
        .expect("valid desk encoder");
    (enc, store)
}

/// Rows of `t` reordered by `order`.
pub fn permute_rows(t: &Tensor<f32>, order: &[usize]) -> Tensor<f32> {
    let rows: Vec<Vec<f32>> = order.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).expect("non-empty rows")
}

pub const TISSUE: [u8; 3] = [200, 120, 160];
pub const GLASS: [u8; 3] = [255, 255, 255];

/// White slide with a few elliptical tissue blobs in stain-like colours.
pub fn blob_slide(seed: u64) -> SlideImage {
    let mut r = rng(seed);
    let w = TILE_SIZE * r.random_range(3..6) + r.random_range(0..TILE_SIZE);
    let h = TILE_SIZE * r.random_range(3..5) + r.random_range(0..TILE_SIZE);
    let mut img = SlideImage::filled(w, h, GLASS, 0.5).expect("valid size");
    let blobs: Vec<(f64, f64, f64, f64, [u8; 3])> = (0..r.random_range(2..5))
        .map(|_| {
            let colour = [
                r.random_range(170..=220),
                r.random_range(80..=130),
                r.random_range(150..=200),
            ];
            (
                r.random_range(0.0..w as f64),
                r.random_range(0.0..h as f64),
                r.random_range(80.0..260.0),
                r.random_range(80.0..260.0),
                colour,
            )
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            for &(cx, cy, rx, ry, c) in &blobs {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    img.set_pixel(x, y, c);
                    break;
                }
            }
        }
    }
    img
}

/// Foreground share of a full-resolution rectangle, pixel by pixel.
pub fn brute_force_fraction(img: &SlideImage, x0: u32, y0: u32, w: u32, h: u32) -> f64 {
    let mut fg = 0u64;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            if is_foreground_rgb(img.pixel(x, y)) {
                fg += 1;
            }
        }
    }
    fg as f64 / (w as u64 * h as u64) as f64
}
