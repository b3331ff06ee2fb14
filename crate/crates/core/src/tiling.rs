//! Foreground tiling of slide rasters.
//!
//! A slide is downsampled 16× (bilinear, cell-centre sampling), each low-res
//! pixel is classified by an HSV box, and the full-resolution 224×224 grid
//! keeps tiles whose mask-estimated tissue fraction is at least 25%.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TILE_SIZE: u32 = 224;
pub const DOWNSAMPLE: u32 = 16;
pub const MIN_TISSUE_FRACTION: f64 = 0.25;

/// Inclusive HSV bounds on the OpenCV 8-bit scale (hue in half-degrees).
pub const HUE_RANGE: (u8, u8) = (90, 180);
pub const SATURATION_RANGE: (u8, u8) = (8, 255);
pub const VALUE_RANGE: (u8, u8) = (103, 255);

#[derive(Clone, Debug, PartialEq)]
pub struct SlideImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    pub microns_per_pixel: f64,
}

impl SlideImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>, microns_per_pixel: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "empty slide {width}x{height}"
            )));
        }
        if pixels.len() != 3 * width as usize * height as usize {
            return Err(Error::shape(
                "slide_image",
                format!(
                    "{width}x{height} RGB needs {} bytes, got {}",
                    3 * width as usize * height as usize,
                    pixels.len()
                ),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels,
            microns_per_pixel,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3], microns_per_pixel: f64) -> Result<Self> {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(3 * width as usize * height as usize)
            .collect();
        Self::new(width, height, pixels, microns_per_pixel)
    }

    /// Reads any 8-bit raster the `image` crate understands (PNG, PPM).
    pub fn open(path: impl AsRef<Path>, microns_per_pixel: f64) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw(), microns_per_pixel)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Low-resolution RGB raster.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRes {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl LowRes {
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// 16× bilinear downsample. Output extents are `ceil(dim / 16)`; each
/// output pixel samples the input at its cell centre, clamped to the edge.
pub fn downsample_16x(img: &SlideImage) -> LowRes {
    let f = DOWNSAMPLE as f64;
    let ow = img.width.div_ceil(DOWNSAMPLE);
    let oh = img.height.div_ceil(DOWNSAMPLE);
    let taps = |o: u32, extent: u32| -> (u32, u32, f64) {
        let max = (extent - 1) as f64;
        let s = ((o as f64 + 0.5) * f - 0.5).clamp(0.0, max);
        let i0 = s.floor();
        let frac = s - i0;
        let i0 = i0 as u32;
        (i0, (i0 + 1).min(extent - 1), frac)
    };
    let mut pixels = Vec::with_capacity(3 * (ow * oh) as usize);
    for oy in 0..oh {
        let (y0, y1, fy) = taps(oy, img.height);
        for ox in 0..ow {
            let (x0, x1, fx) = taps(ox, img.width);
            let (p00, p10, p01, p11) = (
                img.pixel(x0, y0),
                img.pixel(x1, y0),
                img.pixel(x0, y1),
                img.pixel(x1, y1),
            );
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
                let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    LowRes {
        width: ow,
        height: oh,
        pixels,
    }
}

/// Hexcone RGB→HSV on the 8-bit scale: hue in half-degrees `[0, 180]`,
/// saturation and value in `[0, 255]`, each rounded to nearest.
pub fn rgb_to_hsv(r: u8, g: u8, b: u8) -> (u8, u8, u8) {
    let (rf, gf, bf) = (r as f64, g as f64, b as f64);
    let v = rf.max(gf).max(bf);
    let min = rf.min(gf).min(bf);
    let delta = v - min;
    let s = if v > 0.0 { 255.0 * delta / v } else { 0.0 };
    let h_deg = if delta == 0.0 {
        0.0
    } else if v == rf {
        60.0 * (gf - bf) / delta
    } else if v == gf {
        120.0 + 60.0 * (bf - rf) / delta
    } else {
        240.0 + 60.0 * (rf - gf) / delta
    };
    let h_deg = if h_deg < 0.0 { h_deg + 360.0 } else { h_deg };
    ((h_deg / 2.0).round() as u8, s.round() as u8, v as u8)
}

pub fn is_foreground_hsv((h, s, v): (u8, u8, u8)) -> bool {
    (HUE_RANGE.0..=HUE_RANGE.1).contains(&h)
        && (SATURATION_RANGE.0..=SATURATION_RANGE.1).contains(&s)
        && (VALUE_RANGE.0..=VALUE_RANGE.1).contains(&v)
}

pub fn is_foreground_rgb([r, g, b]: [u8; 3]) -> bool {
    is_foreground_hsv(rgb_to_hsv(r, g, b))
}

/// One entry per low-resolution pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMask {
    pub width: u32,
    pub height: u32,
    pub cells: Vec<bool>,
}

impl ForegroundMask {
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.cells[y as usize * self.width as usize + x as usize]
    }
}

pub fn foreground_mask(lowres: &LowRes) -> ForegroundMask {
    let cells = lowres
        .pixels
        .chunks_exact(3)
        .map(|p| is_foreground_rgb([p[0], p[1], p[2]]))
        .collect();
    ForegroundMask {
        width: lowres.width,
        height: lowres.height,
        cells,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub slide_id: String,
    pub grid_x: u32,
    pub grid_y: u32,
    pub tissue_fraction: f64,
}

impl TileRecord {
    pub fn origin_px(&self) -> (u32, u32) {
        (TILE_SIZE * self.grid_x, TILE_SIZE * self.grid_y)
    }
}

/// Foreground area fraction of the full-resolution rectangle
/// `[x0, x0+w) × [y0, y0+h)`, estimated from the mask. Each mask cell covers
/// a 16×16 block of full-resolution pixels (clipped at the slide border) and
/// contributes in proportion to its overlap with the rectangle.
pub fn mask_fraction(
    mask: &ForegroundMask,
    img_w: u32,
    img_h: u32,
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
) -> f64 {
    let (x1, y1) = ((x0 + w).min(img_w), (y0 + h).min(img_h));
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    let overlap = |c: u32, lo: u32, hi: u32, extent: u32| -> u32 {
        let a = (c * DOWNSAMPLE).max(lo);
        let b = ((c + 1) * DOWNSAMPLE).min(extent).min(hi);
        b.saturating_sub(a)
    };
    let mut fg = 0u64;
    for cy in y0 / DOWNSAMPLE..(y1 - 1) / DOWNSAMPLE + 1 {
        let oy = overlap(cy, y0, y1, img_h) as u64;
        for cx in x0 / DOWNSAMPLE..(x1 - 1) / DOWNSAMPLE + 1 {
            if mask.get(cx, cy) {
                fg += oy * overlap(cx, x0, x1, img_w) as u64;
            }
        }
    }
    fg as f64 / ((x1 - x0) as u64 * (y1 - y0) as u64) as f64
}

/// Non-overlapping full 224×224 tiles anchored at the origin, keeping those
/// with at least 25% foreground. Partial edge tiles are discarded.
pub fn tile_and_filter(slide_id: &str, img: &SlideImage, mask: &ForegroundMask) -> Vec<TileRecord> {
    let nx = img.width / TILE_SIZE;
    let ny = img.height / TILE_SIZE;
    let mut out = Vec::new();
    for gy in 0..ny {
        for gx in 0..nx {
            let frac = mask_fraction(
                mask,
                img.width,
                img.height,
                gx * TILE_SIZE,
                gy * TILE_SIZE,
                TILE_SIZE,
                TILE_SIZE,
            );
            if frac >= MIN_TISSUE_FRACTION {
                out.push(TileRecord {
                    slide_id: slide_id.to_string(),
                    grid_x: gx,
                    grid_y: gy,
                    tissue_fraction: frac,
                });
            }
        }
    }
    out
}

/// Full pipeline: downsample, mask, tile.
pub fn tile_slide(slide_id: &str, img: &SlideImage) -> Vec<TileRecord> {
    let mask = foreground_mask(&downsample_16x(img));
    tile_and_filter(slide_id, img, &mask)
}

/// One line of a tile manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub tile: TileRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specimen_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept: Option<usize>,
}

impl ManifestEntry {
    /// Specimen grouping key; a bare slide is its own specimen.
    pub fn specimen(&self) -> &str {
        self.specimen_id.as_deref().unwrap_or(&self.tile.slide_id)
    }
}

impl From<TileRecord> for ManifestEntry {
    fn from(tile: TileRecord) -> Self {
        Self {
            tile,
            specimen_id: None,
            concept: None,
        }
    }
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(e);
    }
    Ok(out)
}
