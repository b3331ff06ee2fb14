//! Deterministic fixtures for the benchmarks.

use slidelm::config::RunConfig;
use slidelm::corpus::{gen_corpus, Corpus, Split};
use slidelm::pipeline::new_trainer;
use slidelm::tiling::SlideImage;
use slidelm::train::{TrainExample, Trainer};
use slidelm::Tensor;

/// `rows × cols` matrix of a fixed pseudo-random pattern in `[-1, 1)`.
pub fn pattern(rows: usize, cols: usize, salt: u64) -> Tensor<f32> {
    let data = (0..rows * cols)
        .map(|i| {
            let x = (i as u64 ^ salt)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .rotate_left(17);
            (x >> 40) as f32 / (1u64 << 23) as f32 - 1.0
        })
        .collect();
    Tensor::new([rows, cols], data).expect("shape matches")
}

/// 1120×896 slide with an elliptical tissue region.
pub fn slide() -> SlideImage {
    let (w, h) = (1120u32, 896u32);
    let mut img = SlideImage::filled(w, h, [255, 255, 255], 0.5).expect("valid size");
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 - 560.0) / 420.0;
            let dy = (y as f64 - 448.0) / 300.0;
            if dx * dx + dy * dy <= 1.0 {
                img.set_pixel(x, y, [200, 120, 160]);
            }
        }
    }
    img
}

/// Desk-preset trainer with its training examples.
pub fn desk_trainer() -> (Corpus, Trainer, Vec<TrainExample>) {
    let cfg = RunConfig {
        specimens_per_concept: 8,
        heldout_per_concept: 1,
        transfer_per_class: 4,
        ..RunConfig::desk()
    };
    let corpus = gen_corpus(&cfg).expect("valid config");
    let bags = corpus.bags().expect("consistent corpus");
    let data = corpus
        .examples(&bags, Split::Train)
        .expect("training split");
    let trainer = new_trainer(&cfg, &corpus.vocab).expect("valid model");
    (corpus, trainer, data)
}
