//! Synthetic lesion-style dataset: bright rotated ellipses on a darker
//! noisy gradient background, with exact analytic masks. Small enough to
//! overfit in minutes, structured enough to exercise every model path
//! (including the all-background case).

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pnm::{write_pgm, write_ppm};
use crate::rng::Rng;

/// Fraction of samples with no lesion at all (empty mask).
pub const BLANK_FRACTION: f64 = 0.125;

/// Per-channel gains that tint the grayscale intensity into RGB.
const CHANNEL_GAIN: [f64; 3] = [1.0, 0.9, 0.8];
const NOISE_STD: f64 = 0.05;

/// Ellipse in pixel coordinates: center, semi-axes, rotation.
#[derive(Clone, Debug)]
pub struct EllipseParams {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    /// Foreground (lesion) intensity before channel gain and noise.
    pub fg: f64,
    /// Background base intensity.
    pub bg: f64,
}

/// Membership test: rotate the offset into the ellipse frame and evaluate
/// the implicit equation `(u/a)^2 + (v/b)^2 <= 1`.
pub fn inside(p: &EllipseParams, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - p.cx, y - p.cy);
    let (s, c) = p.theta.sin_cos();
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    (u / p.a).powi(2) + (v / p.b).powi(2) <= 1.0
}

/// Draw one sample's geometry; `None` means a deliberately blank sample.
/// All variates are drawn unconditionally so the stream advances the same
/// way for blank and non-blank samples.
pub fn sample_params(size: usize, rng: &mut Rng) -> Option<EllipseParams> {
    let s = size as f64;
    let blank = rng.uniform01() < BLANK_FRACTION;
    let p = EllipseParams {
        cx: rng.uniform(0.3, 0.7) * s,
        cy: rng.uniform(0.3, 0.7) * s,
        a: rng.uniform(0.12, 0.35) * s,
        b: rng.uniform(0.12, 0.35) * s,
        theta: rng.uniform(0.0, std::f64::consts::PI),
        fg: rng.uniform(0.65, 0.95),
        bg: rng.uniform(0.05, 0.35),
    };
    if blank { None } else { Some(p) }
}

/// Rasterize one sample: interleaved RGB bytes and the exact mask.
pub fn render(size: usize, params: Option<&EllipseParams>, rng: &mut Rng) -> (Vec<u8>, Vec<u8>) {
    let s = size as f64;
    let (fg, bg) = params.map_or((0.0, 0.2), |p| (p.fg, p.bg));
    let mut rgb = Vec::with_capacity(3 * size * size);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let fgpix = params.is_some_and(|p| inside(p, x as f64, y as f64));
            // Gentle diagonal shading keeps the background non-trivial.
            let shade = 0.1 * (x + y) as f64 / (2.0 * s);
            let base = if fgpix { fg } else { bg + shade };
            for gain in CHANNEL_GAIN {
                let v = (base * gain + rng.normal(0.0, NOISE_STD)).clamp(0.0, 1.0);
                rgb.push((v * 255.0).round() as u8);
            }
            mask.push(if fgpix { 255 } else { 0 });
        }
    }
    (rgb, mask)
}

fn split_stream(tag: &str) -> u64 {
    // Distinct high-bit labels per split so counts can change independently.
    let b = tag.as_bytes();
    0x5359_0000_0000_0000 | ((b[0] as u64) << 8) | b[1] as u64
}

/// Write `counts = (train, val, test)` samples plus `manifest.tsv` into
/// `dir`; returns the manifest path. File contents are a pure function of
/// `(seed, size, counts)`.
pub fn generate(dir: &Path, size: usize, counts: (usize, usize, usize), seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (tag, count) in [("train", counts.0), ("val", counts.1), ("test", counts.2)] {
        let mut rng = Rng::derive(seed, split_stream(tag));
        for i in 0..count {
            let params = sample_params(size, &mut rng);
            let (rgb, mask) = render(size, params.as_ref(), &mut rng);
            let img_name = format!("img-{tag}-{i:04}.ppm");
            let mask_name = format!("mask-{tag}-{i:04}.pgm");
            write_ppm(&dir.join(&img_name), size, size, &rgb)?;
            write_pgm(&dir.join(&mask_name), size, size, &mask)?;
            manifest.push_str(&format!("{img_name}\t{mask_name}\t{tag}\n"));
        }
    }
    let manifest_path = dir.join("manifest.tsv");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}
