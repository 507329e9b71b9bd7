//! Datasets: tab-separated manifests, PNM sample loading with resizing,
//! batch assembly, and the geometric train-time augmentations.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pnm::{read_pnm, PnmImage};
use crate::tape::resample::axis_taps;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

/// Parse `<image>\t<mask>\t<split>` rows. Blank lines are skipped; relative
/// paths resolve against the manifest's directory.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let fail = |line: usize, reason: String| Error::Manifest { path: path.to_path_buf(), line, reason };
    let resolve = |p: &str| if Path::new(p).is_absolute() { PathBuf::from(p) } else { base.join(p) };

    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(fail(line, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(fail(line, "empty image or mask path".into()));
        }
        let split = Split::parse(fields[2])
            .ok_or_else(|| fail(line, format!("unknown split `{}` (expected train/val/test)", fields[2])))?;
        entries.push(ManifestEntry { image: resolve(fields[0]), mask: resolve(fields[1]), split });
    }
    if entries.is_empty() {
        return Err(fail(0, "manifest contains no entries".into()));
    }
    Ok(entries)
}

/// One resized example: `image` is `(3,S,S)` in `[0,1]`, `mask` is `(1,S,S)`
/// with values exactly 0 or 1.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

#[derive(Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Half-pixel bilinear resize of one `(h,w)` plane, matching the network's
/// upsampling convention.
fn bilinear_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy] as f32);
        for ox in 0..ow {
            let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox] as f32);
            let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
            let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
            out.push((1.0 - fy) * top + fy * bot);
        }
    }
    out
}

/// Nearest-neighbor resize (same half-pixel source grid); keeps masks binary.
fn nearest_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let pick = |n: usize, on: usize, o: usize| -> usize {
        let srcf = (o as f64 + 0.5) * n as f64 / on as f64 - 0.5;
        (srcf.round().max(0.0) as usize).min(n - 1)
    };
    let ys: Vec<usize> = (0..oh).map(|o| pick(h, oh, o)).collect();
    let xs: Vec<usize> = (0..ow).map(|o| pick(w, ow, o)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for &y in &ys {
        for &x in &xs {
            out.push(src[y * w + x]);
        }
    }
    out
}

/// Interleaved `(h,w,c)` bytes to planar `(c,h,w)` floats in `[0,1]`.
fn planes_from(img: &PnmImage) -> Vec<Vec<f32>> {
    let scale = 1.0 / img.maxval as f32;
    (0..img.channels)
        .map(|c| img.data.iter().skip(c).step_by(img.channels).map(|&b| b as f32 * scale).collect())
        .collect()
}

/// Load one image (no mask) resized to `(3, size, size)` in `[0,1]`.
/// Grayscale inputs replicate their single plane across RGB.
pub fn load_image(image_path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = read_pnm(image_path)?;
    let planes = planes_from(&img);
    let mut image_data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let plane = &planes[c.min(planes.len() - 1)];
        image_data.extend(bilinear_plane(plane, img.height, img.width, size, size));
    }
    Ok(Tensor::new(&[3, size, size], image_data))
}

pub fn load_sample(image_path: &Path, mask_path: &Path, size: usize) -> Result<Sample> {
    let image = load_image(image_path, size)?;

    let msk = read_pnm(mask_path)?;
    let mask_plane = &planes_from(&msk)[0];
    let resized = nearest_plane(mask_plane, msk.height, msk.width, size, size);
    let mask_data: Vec<f32> = resized.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();

    Ok(Sample { image, mask: Tensor::new(&[1, size, size], mask_data) })
}

pub fn load_dataset(manifest: &Path, size: usize) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for entry in parse_manifest(manifest)? {
        let sample = load_sample(&entry.image, &entry.mask, size)?;
        match entry.split {
            Split::Train => ds.train.push(sample),
            Split::Val => ds.val.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    Ok(ds)
}

/// Stack samples into `(B,3,S,S)` images and `(B,1,S,S)` masks.
pub fn stack(samples: &[&Sample]) -> (Tensor<f32>, Tensor<f32>) {
    assert!(!samples.is_empty(), "cannot stack an empty batch");
    let s = samples[0].image.shape()[1];
    let mut images = Vec::with_capacity(samples.len() * 3 * s * s);
    let mut masks = Vec::with_capacity(samples.len() * s * s);
    for sample in samples {
        assert_eq!(sample.image.shape(), &[3, s, s], "mixed sample sizes in batch");
        images.extend_from_slice(sample.image.data());
        masks.extend_from_slice(sample.mask.data());
    }
    (Tensor::new(&[samples.len(), 3, s, s], images), Tensor::new(&[samples.len(), 1, s, s], masks))
}

fn transform_plane(src: &[f32], s: usize, flip: bool, quarter_turns: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; s * s];
    for y in 0..s {
        for x in 0..s {
            let sx = if flip { s - 1 - x } else { x };
            // Clockwise quarter turns of the source grid.
            let (mut ty, mut tx) = (y, sx);
            for _ in 0..quarter_turns % 4 {
                let (ny, nx) = (s - 1 - tx, ty);
                ty = ny;
                tx = nx;
            }
            out[y * s + x] = src[ty * s + tx];
        }
    }
    out
}

/// Horizontal flip then `quarter_turns` 90-degree rotations, applied to the
/// image and mask in lockstep.
pub fn augment(sample: &Sample, flip: bool, quarter_turns: usize) -> Sample {
    if !flip && quarter_turns % 4 == 0 {
        return sample.clone();
    }
    let s = sample.image.shape()[1];
    let mut image = Vec::with_capacity(3 * s * s);
    for c in 0..3 {
        image.extend(transform_plane(&sample.image.data()[c * s * s..(c + 1) * s * s], s, flip, quarter_turns));
    }
    let mask = transform_plane(sample.mask.data(), s, flip, quarter_turns);
    Sample { image: Tensor::new(&[3, s, s], image), mask: Tensor::new(&[1, s, s], mask) }
}

/// Outline of a binary mask: pixels that are on while at least one 4-neighbor
/// (or the image border) is off.
pub fn contour(mask: &[f32], h: usize, w: usize) -> Vec<bool> {
    assert_eq!(mask.len(), h * w, "contour mask length must be h*w");
    let on = |y: usize, x: usize| mask[y * w + x] >= 0.5;
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !on(y, x) {
                continue;
            }
            out[y * w + x] = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || !on(y - 1, x)
                || !on(y + 1, x)
                || !on(y, x - 1)
                || !on(y, x + 1);
        }
    }
    out
}

/// Write `image` as a PPM with the ground-truth outline in green and the
/// predicted outline in red; where the two coincide the prediction wins.
/// `gt` and `pred` are `(h*w)` planes thresholded at 0.5.
pub fn write_overlay(path: &Path, image: &Tensor<f32>, gt: &[f32], pred: &[f32]) -> Result<()> {
    let sh = image.shape();
    assert_eq!(sh.len(), 3, "overlay image must be (C,H,W), got {sh:?}");
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    assert!(c == 1 || c == 3, "overlay image must have 1 or 3 channels, got {c}");
    let plane = h * w;
    let gt_line = contour(gt, h, w);
    let pred_line = contour(pred, h, w);
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        if pred_line[i] {
            bytes.extend_from_slice(&[255, 0, 0]);
        } else if gt_line[i] {
            bytes.extend_from_slice(&[0, 255, 0]);
        } else {
            for ch in 0..3 {
                let v = image.data()[ch.min(c - 1) * plane + i];
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    crate::pnm::write_ppm(path, w, h, &bytes)
}
