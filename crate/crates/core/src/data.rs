//! Image/mask ingestion, splits, augmentation, resizing and the synthetic
//! polyp-like generator.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, resize_nearest, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    /// `1×H×W`, values in `{0, 1}`.
    pub mask: Tensor,
    pub id: String,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.dim(1), self.image.dim(2))
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.len() as f64
    }
}

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

fn stems(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| exts.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Single-channel mask, foreground where the 8-bit value exceeds 127.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p[0] > 127 { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[1, h, w], data)
}

/// Read `root/images/*` and `root/masks/*` pairs with matching stems,
/// sorted by id.
pub fn load_pairs(root: &Path) -> Result<Vec<Sample>> {
    let images = stems(&root.join("images"), &IMAGE_EXTS)?;
    let masks = stems(&root.join("masks"), &IMAGE_EXTS)?;
    let orphans: Vec<String> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .map(|k| format!("image `{k}` has no mask"))
        .chain(masks.keys().filter(|k| !images.contains_key(*k)).map(|k| format!("mask `{k}` has no image")))
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Data(orphans.join("; ")));
    }
    if images.is_empty() {
        return Err(Error::Data(format!("no image/mask pairs under {}", root.display())));
    }
    images
        .iter()
        .map(|(id, ipath)| {
            let image = read_image(ipath)?;
            let mask = read_mask(&masks[id])?;
            if image.shape()[1..] != mask.shape()[1..] {
                return Err(Error::Data(format!(
                    "`{id}`: image {:?} and mask {:?} differ in size",
                    image.shape(),
                    mask.shape()
                )));
            }
            Ok(Sample { image, mask, id: id.clone() })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let s = Self { train, val, test, seed };
        if [train, val, test].iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::Config(format!("split ratios must be non-negative: {train}/{val}/{test}")));
        }
        if ((train + val + test) - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("split ratios must sum to 1: {train}/{val}/{test}")));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Partition sizes: floors for val/test (at least one each when their ratio
/// is positive), remainder to train.
pub fn split_sizes(n: usize, spec: &SplitSpec) -> Result<(usize, usize, usize)> {
    let parts = [spec.train, spec.val, spec.test].iter().filter(|r| **r > 0.0).count();
    if n < parts {
        return Err(Error::Data(format!("{n} samples cannot fill {parts} non-empty partitions")));
    }
    let count = |r: f64| {
        let c = (n as f64 * r + 1e-9).floor() as usize;
        if r > 0.0 {
            c.max(1)
        } else {
            c
        }
    };
    let (val, test) = (count(spec.val), count(spec.test));
    let train = n - val - test;
    if spec.train > 0.0 && train == 0 {
        return Err(Error::Data(format!("{n} samples leave no training data")));
    }
    Ok((train, val, test))
}

/// Seeded shuffle, then contiguous train/val/test partition.
pub fn split(samples: &[Sample], spec: &SplitSpec) -> Result<Splits> {
    let (ntr, nva, _) = split_sizes(samples.len(), spec)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let take = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        train: take(&order[..ntr]),
        val: take(&order[ntr..ntr + nva]),
        test: take(&order[ntr + nva..]),
    })
}

/// One draw of the joint geometric augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    /// Rotation in degrees.
    pub angle: f64,
    /// Side length of the crop relative to the image (`√area`).
    pub crop_scale: f64,
    /// Crop offset as a fraction of the free margin, each in `[0, 1]`.
    pub crop_offset: (f64, f64),
}

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const MIN_CROP_AREA: f64 = 0.9;

impl AugmentParams {
    pub const IDENTITY: Self =
        Self { hflip: false, vflip: false, angle: 0.0, crop_scale: 1.0, crop_offset: (0.0, 0.0) };

    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            angle: rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            crop_scale: rng.gen_range(MIN_CROP_AREA..=1.0f64).sqrt(),
            crop_offset: (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)),
        }
    }

    /// Continuous source coordinate of output pixel `(y, x)` in an `h×w`
    /// image. Forward order is flip, rotate, crop-and-resize.
    pub fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let (hf, wf) = (h as f64, w as f64);
        let (ch, cw) = (hf * self.crop_scale, wf * self.crop_scale);
        let oy = (hf - ch) * self.crop_offset.0;
        let ox = (wf - cw) * self.crop_offset.1;
        let mut sy = oy + (y as f64 + 0.5) * ch / hf - 0.5;
        let mut sx = ox + (x as f64 + 0.5) * cw / wf - 0.5;
        if self.angle != 0.0 {
            let (cy, cx) = ((hf - 1.0) / 2.0, (wf - 1.0) / 2.0);
            let (s, c) = self.angle.to_radians().sin_cos();
            let (dy, dx) = (sy - cy, sx - cx);
            sy = cy + c * dy - s * dx;
            sx = cx + s * dy + c * dx;
        }
        if self.vflip {
            sy = hf - 1.0 - sy;
        }
        if self.hflip {
            sx = wf - 1.0 - sx;
        }
        (sy, sx)
    }
}

fn nearest_index(sy: f64, sx: f64, h: usize, w: usize) -> Option<usize> {
    let (y, x) = (sy.round(), sx.round());
    if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
        None
    } else {
        Some(y as usize * w + x as usize)
    }
}

/// Nearest-neighbour warp of a `C×H×W` tensor; outside pixels become 0.
pub fn warp_nearest(src: &Tensor, p: &AugmentParams) -> Tensor {
    let (c, h, w) = (src.dim(0), src.dim(1), src.dim(2));
    let mut out = Tensor::zeros(src.shape());
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = p.source(y, x, h, w);
            if let Some(i) = nearest_index(sy, sx, h, w) {
                for ch in 0..c {
                    out.data_mut()[(ch * h + y) * w + x] = src.data()[ch * h * w + i];
                }
            }
        }
    }
    out
}

/// Bilinear warp over the same support as [`warp_nearest`].
pub fn warp_bilinear(src: &Tensor, p: &AugmentParams) -> Tensor {
    let (c, h, w) = (src.dim(0), src.dim(1), src.dim(2));
    let mut out = Tensor::zeros(src.shape());
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = p.source(y, x, h, w);
            if nearest_index(sy, sx, h, w).is_none() {
                continue;
            }
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..c {
                let d = &src.data()[ch * h * w..(ch + 1) * h * w];
                let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
                let bot = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
                out.data_mut()[(ch * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn apply_augment(sample: &Sample, p: &AugmentParams) -> Sample {
    Sample {
        image: warp_bilinear(&sample.image, p).map(|v| v.clamp(0.0, 1.0)),
        mask: warp_nearest(&sample.mask, p),
        id: sample.id.clone(),
    }
}

/// Random flips, rotation and crop applied jointly to image and mask.
pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Sample {
    apply_augment(sample, &AugmentParams::draw(rng))
}

fn check_target(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(Error::Config(format!("resize target {h}×{w} must be positive multiples of 32")));
    }
    Ok(())
}

/// Bilinear image, nearest-neighbour mask.
pub fn resize(sample: &Sample, h: usize, w: usize) -> Result<Sample> {
    check_target(h, w)?;
    if sample.size() == (h, w) {
        return Ok(sample.clone());
    }
    Ok(Sample {
        image: resize_bilinear(&sample.image, h, w).map(|v| v.clamp(0.0, 1.0)),
        mask: resize_nearest(&sample.mask, h, w),
        id: sample.id.clone(),
    })
}

/// Nearest-neighbour mask resize; output pixel `o` reads source `⌊o·n/out⌋`.
pub fn downsample_gt(mask: &Tensor, h: usize, w: usize) -> Tensor {
    resize_nearest(mask, h, w)
}

fn box_blur(plane: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let mut s = 0.0;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    s += plane[yy * w + xx];
                }
            }
            out[y * w + x] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Smooth random field in roughly `[-1, 1]`: a coarse grid bilinearly upsampled.
fn low_frequency_noise(rng: &mut impl Rng, h: usize, w: usize) -> Vec<f64> {
    let grid = Tensor::from_fn(&[1, 4, 4], |_| rng.gen_range(-1.0..1.0));
    resize_bilinear(&grid, h, w).into_data()
}

pub const SYNTH_FG_RANGE: (f64, f64) = (0.02, 0.5);

fn synth_one(rng: &mut impl Rng, h: usize, w: usize, id: String) -> Sample {
    let base = [
        rng.gen_range(0.55..0.75),
        rng.gen_range(0.30..0.45),
        rng.gen_range(0.25..0.40),
    ];
    let side = h.min(w) as f64;
    loop {
        let mut mask = vec![0.0; h * w];
        for _ in 0..rng.gen_range(1..=2) {
            let cy = rng.gen_range(0.25..0.75) * h as f64;
            let cx = rng.gen_range(0.25..0.75) * w as f64;
            let a = rng.gen_range(0.10..0.25) * side;
            let b = rng.gen_range(0.10..0.25) * side;
            let (s, c) = rng.gen_range(0.0..std::f64::consts::PI).sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let u = (c * dx + s * dy) / a;
                    let v = (-s * dx + c * dy) / b;
                    if u * u + v * v <= 1.0 {
                        mask[y * w + x] = 1.0;
                    }
                }
            }
        }
        let frac = mask.iter().sum::<f64>() / mask.len() as f64;
        if !(SYNTH_FG_RANGE.0..=SYNTH_FG_RANGE.1).contains(&frac) {
            continue;
        }
        let soft = box_blur(&mask, h, w, 1);
        let offset = rng.gen_range(0.18..0.3);
        let mut image = Vec::with_capacity(3 * h * w);
        for (ch, b) in base.iter().enumerate() {
            let noise = low_frequency_noise(rng, h, w);
            let tint = [1.0, 0.6, 0.5][ch];
            for i in 0..h * w {
                let v = b + 0.12 * noise[i] + offset * tint * soft[i];
                image.push(v.clamp(0.0, 1.0));
            }
        }
        return Sample {
            image: Tensor::new(&[3, h, w], image).expect("shape"),
            mask: Tensor::new(&[1, h, w], mask).expect("shape"),
            id,
        };
    }
}

/// `n` synthetic samples: smooth noisy background plus one or two filled
/// ellipses with a blurred intensity offset; the mask is the ellipse union.
pub fn synth_generate(n: usize, size: (usize, usize), seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Data("synthetic dataset size must be at least 1".into()));
    }
    let (h, w) = size;
    if h < 8 || w < 8 {
        return Err(Error::Config(format!("synthetic image size {h}×{w} is too small")));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            synth_one(&mut rng, h, w, format!("synth_{i:04}"))
        })
        .collect())
}
