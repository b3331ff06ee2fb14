mod common;

use proptest::prelude::*;
use slidelm::tiling::{
    downsample_16x, foreground_mask, is_foreground_rgb, mask_fraction, rgb_to_hsv, tile_slide,
    SlideImage, DOWNSAMPLE, TILE_SIZE,
};

use common::{blob_slide, brute_force_fraction, GLASS, TISSUE};

/// Floating-point hexcone reference on the 8-bit scale.
fn hsv_reference(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (60.0 * (g - b) / d).rem_euclid(360.0)
    } else if max == g {
        60.0 * (b - r) / d + 120.0
    } else {
        60.0 * (r - g) / d + 240.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h / 2.0, s * 255.0, max * 255.0)
}

/// Slide whose 16×16 blocks are painted tissue or glass from `cells`.
fn block_slide(w_cells: u32, h_cells: u32, cells: &[bool]) -> SlideImage {
    let mut img =
        SlideImage::filled(w_cells * DOWNSAMPLE, h_cells * DOWNSAMPLE, GLASS, 0.5).unwrap();
    for cy in 0..h_cells {
        for cx in 0..w_cells {
            if cells[(cy * w_cells + cx) as usize] {
                for y in cy * DOWNSAMPLE..(cy + 1) * DOWNSAMPLE {
                    for x in cx * DOWNSAMPLE..(cx + 1) * DOWNSAMPLE {
                        img.set_pixel(x, y, TISSUE);
                    }
                }
            }
        }
    }
    img
}

proptest! {
    #[test]
    fn hsv_matches_float_reference(r in any::<u8>(), g in any::<u8>(), b in any::<u8>()) {
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (hr, sr, vr) = hsv_reference(r, g, b);
        prop_assert_eq!(v as f64, vr.round());
        prop_assert!((s as f64 - sr).abs() <= 0.5 + 1e-9);
        prop_assert!(h <= 180);
        // Hue 360° wraps to 0 only through rounding at the top of the range.
        let dh = (h as f64 - hr).abs();
        prop_assert!(dh <= 0.5 + 1e-9 || (dh - 180.0).abs() <= 0.5 + 1e-9, "{h} vs {hr}");
    }

    #[test]
    fn grey_pixels_are_never_tissue(level in any::<u8>()) {
        prop_assert!(!is_foreground_rgb([level, level, level]));
    }

    #[test]
    fn uniform_slide_downsamples_to_its_colour(
        w in 1u32..100, h in 1u32..100, c in any::<[u8; 3]>()
    ) {
        let low = downsample_16x(&SlideImage::filled(w, h, c, 0.5).unwrap());
        prop_assert_eq!(low.width, w.div_ceil(16));
        prop_assert_eq!(low.height, h.div_ceil(16));
        prop_assert!(low.pixels.chunks(3).all(|p| p == c));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn block_painted_slides_match_brute_force_exactly(
        cells in prop::collection::vec(any::<bool>(), 56 * 28)
    ) {
        let img = block_slide(56, 28, &cells);
        let mask = foreground_mask(&downsample_16x(&img));
        for gy in 0..2 {
            for gx in 0..4 {
                let (x0, y0) = (gx * TILE_SIZE, gy * TILE_SIZE);
                let est = mask_fraction(&mask, img.width(), img.height(), x0, y0, TILE_SIZE, TILE_SIZE);
                let truth = brute_force_fraction(&img, x0, y0, TILE_SIZE, TILE_SIZE);
                prop_assert!((est - truth).abs() < 1e-12);
            }
        }
        let kept = tile_slide("p", &img);
        for t in &kept {
            prop_assert!(t.tissue_fraction >= 0.25);
        }
    }
}

#[test]
fn mask_fractions_track_brute_force_on_blob_slides() {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let img = blob_slide(seed);
        let mask = foreground_mask(&downsample_16x(&img));
        for gy in 0..img.height() / TILE_SIZE {
            for gx in 0..img.width() / TILE_SIZE {
                let (x0, y0) = (gx * TILE_SIZE, gy * TILE_SIZE);
                let est = mask_fraction(
                    &mask,
                    img.width(),
                    img.height(),
                    x0,
                    y0,
                    TILE_SIZE,
                    TILE_SIZE,
                );
                worst = worst
                    .max((est - brute_force_fraction(&img, x0, y0, TILE_SIZE, TILE_SIZE)).abs());
            }
        }
    }
    assert!(worst <= 0.02, "worst {worst}");
}

#[test]
fn tissue_in_one_quadrant_keeps_only_that_quadrant() {
    let side = 4 * TILE_SIZE;
    let mut img = SlideImage::filled(side, side, GLASS, 0.5).unwrap();
    for y in side / 2..side {
        for x in side / 2..side {
            img.set_pixel(x, y, TISSUE);
        }
    }
    let kept = tile_slide("q", &img);
    assert_eq!(kept.len(), 4);
    for t in kept {
        assert!(t.grid_x >= 2 && t.grid_y >= 2);
        assert_eq!(t.tissue_fraction, 1.0);
    }
}

#[test]
fn tile_aligned_translation_shifts_the_grid() {
    let base = blob_slide(42);
    let (w, h) = (base.width(), base.height());
    let mut shifted = SlideImage::filled(w + TILE_SIZE, h + TILE_SIZE, GLASS, 0.5).unwrap();
    for y in 0..h {
        for x in 0..w {
            shifted.set_pixel(x + TILE_SIZE, y + TILE_SIZE, base.pixel(x, y));
        }
    }
    let a = tile_slide("a", &base);
    let b = tile_slide("b", &shifted);
    assert!(!a.is_empty());
    let moved: Vec<(u32, u32, f64)> = a
        .iter()
        .map(|t| (t.grid_x + 1, t.grid_y + 1, t.tissue_fraction))
        .collect();
    let got: Vec<(u32, u32, f64)> = b
        .iter()
        .map(|t| (t.grid_x, t.grid_y, t.tissue_fraction))
        .collect();
    assert_eq!(moved, got);
}

#[test]
fn threshold_is_inclusive_at_one_quarter() {
    for (cells_wide, expect_kept) in [(7u32, true), (6, false)] {
        let mut img = SlideImage::filled(TILE_SIZE, TILE_SIZE, GLASS, 0.5).unwrap();
        for y in 0..7 * DOWNSAMPLE {
            for x in 0..cells_wide * DOWNSAMPLE {
                img.set_pixel(x, y, TISSUE);
            }
        }
        assert_eq!(
            !tile_slide("t", &img).is_empty(),
            expect_kept,
            "{cells_wide}"
        );
    }
}
