//! Scalar reference implementations and fixtures shared by the integration
//! tests. Everything here is written with plain loops over flat buffers and
//! does not call into the library's numeric code.

#![allow(dead_code)]

use dkseg::autograd::Graph;
use dkseg::metrics::ConfusionCounts;
use dkseg::model::forward;
use dkseg::objective::deep_supervision_loss;
use dkseg::{ModelConfig, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Overwrite every parameter with uniform noise of the given scale.
pub fn randomize(p: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y = W x + b` for a row-major `out×in` weight.
pub fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let (out, inp) = (b.len(), x.len());
    (0..out).map(|i| b[i] + (0..inp).map(|j| w[i * inp + j] * x[j]).sum::<f64>()).collect()
}

pub fn linear_of(p: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let w = p.get(&format!("{prefix}.weight")).unwrap().data();
    let b = p.get(&format!("{prefix}.bias")).unwrap().data();
    affine(w, b, x)
}

/// Multi-head attention of one sample: `queries` N×C, `keys`/`values` S×C
/// (row-major), projections `{prefix}.q/k/v/o`.
pub fn attention_oracle(
    p: &ParamStore,
    prefix: &str,
    queries: &[f64],
    keys: &[f64],
    values: &[f64],
    c: usize,
    heads: usize,
) -> Vec<f64> {
    let rows = |x: &[f64], which: &str| -> Vec<Vec<f64>> {
        x.chunks(c).map(|r| linear_of(p, &format!("{prefix}.{which}"), r)).collect()
    };
    let (q, k, v) = (rows(queries, "q"), rows(keys, "k"), rows(values, "v"));
    let d = c / heads;
    let mut out = Vec::new();
    for qi in &q {
        let mut attended = vec![0.0; c];
        for h in 0..heads {
            let lo = h * d;
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| (lo..lo + d).map(|t| qi[t] * kj[t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for t in lo..lo + d {
                    attended[t] += e[j] / z * vj[t];
                }
            }
        }
        out.extend(linear_of(p, &format!("{prefix}.o"), &attended));
    }
    out
}

/// Bin `i` of `bins` over `n` cells: `[⌊i·n/bins⌋, ⌈(i+1)·n/bins⌉)`.
pub fn bin_range(i: usize, n: usize, bins: usize) -> (usize, usize) {
    (i * n / bins, ((i + 1) * n).div_ceil(bins))
}

/// Brute-force pyramid pooling of one `C×H×W` sample into 35 rows of `C`.
pub fn pyramid_oracle(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for bins in [1, 3, 5] {
        for by in 0..bins {
            for bx in 0..bins {
                let (y0, y1) = bin_range(by, h, bins);
                let (x0, x1) = bin_range(bx, w, bins);
                for ch in 0..c {
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += x[(ch * h + y) * w + xx];
                        }
                    }
                    out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pool {
    Sum,
    PixelMean,
    MaskedMean,
}

/// Lesion descriptor of one sample: `D̄` is `C×H×W`, `logits` is at half
/// resolution when `upsample`, else full.
pub fn lesion_oracle(d: &[f64], logits: &[f64], c: usize, h: usize, w: usize, upsample: bool, pool: Pool) -> Vec<f64> {
    let pw = if upsample { w / 2 } else { w };
    let prob = |y: usize, x: usize| {
        let (py, px) = if upsample { (y / 2, x / 2) } else { (y, x) };
        sigmoid(logits[py * pw + px])
    };
    let mass: f64 = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| prob(y, x)).sum();
    (0..c)
        .map(|ch| {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += prob(y, x) * d[(ch * h + y) * w + x];
                }
            }
            match pool {
                Pool::Sum => s,
                Pool::PixelMean => s / (h * w) as f64,
                Pool::MaskedMean => s / (mass + 1e-6),
            }
        })
        .collect()
}

/// One position of the gated kernel update, returning `(K', G_F, G_K)`.
pub fn update_oracle(p: &ParamStore, f: &[f64], k: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let phi = |i: usize, x: &[f64]| linear_of(p, &format!("dk.phi{i}"), x);
    let g: Vec<f64> = phi(3, f).iter().zip(phi(4, k)).map(|(a, b)| a * b).collect();
    let gk: Vec<f64> = phi(5, &g).into_iter().map(sigmoid).collect();
    let gf: Vec<f64> = phi(6, &g).into_iter().map(sigmoid).collect();
    let (f1, k2) = (phi(1, f), phi(2, k));
    let out = (0..f1.len()).map(|i| gf[i] * f1[i] + gk[i] * k2[i]).collect();
    (out, gf, gk)
}

/// Direct 2-D convolution of one sample, zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                s += weight[((co * cin + ci) * k + ky) * k + kx] * x[(ci * h + y as usize) * w + xx as usize];
                            }
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = s;
            }
        }
    }
    (out, oh, ow)
}

pub fn counts_oracle(pred: &[bool], gt: &[bool]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// Smallest model that still exercises every block.
pub fn tiny_model() -> ModelConfig {
    ModelConfig { encoder_channels: [4, 8, 8, 8, 16], input_size: (32, 32), heads: 2, ..Default::default() }
}

/// Deep-supervision loss and its parameter gradients.
pub fn loss_and_grads(p: &ParamStore, cfg: &ModelConfig, images: &Tensor, masks: &Tensor) -> (f64, dkseg::Gradients) {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let trace = forward(&mut g, p, cfg, x).unwrap();
    let loss = deep_supervision_loss(&mut g, &trace, masks, 1.0).unwrap();
    let v = g.value(loss).item();
    (v, g.backward(loss))
}

pub fn loss_only(p: &ParamStore, cfg: &ModelConfig, images: &Tensor, masks: &Tensor) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let trace = forward(&mut g, p, cfg, x).unwrap();
    let loss = deep_supervision_loss(&mut g, &trace, masks, 1.0).unwrap();
    g.value(loss).item()
}

#[derive(Debug)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-5);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Central differences on `per_group` random entries of every parameter
/// whose name starts with one of `groups`.
pub fn gradient_check(
    p: &ParamStore,
    cfg: &ModelConfig,
    images: &Tensor,
    masks: &Tensor,
    groups: &[&str],
    per_group: usize,
    seed: u64,
) -> Vec<GradSample> {
    const H: f64 = 1e-6;
    let (_, grads) = loss_and_grads(p, cfg, images, masks);
    let mut r = rng(seed);
    let mut out = Vec::new();
    for group in groups {
        let names: Vec<String> = p.names().filter(|n| n.starts_with(group)).map(str::to_string).collect();
        assert!(!names.is_empty(), "no parameters under `{group}`");
        for _ in 0..per_group {
            let name = &names[r.gen_range(0..names.len())];
            let len = p.get(name).unwrap().len();
            let index = r.gen_range(0..len);
            let mut plus = p.clone();
            plus.get_mut(name).unwrap().data_mut()[index] += H;
            let mut minus = p.clone();
            minus.get_mut(name).unwrap().data_mut()[index] -= H;
            let numeric = (loss_only(&plus, cfg, images, masks) - loss_only(&minus, cfg, images, masks)) / (2.0 * H);
            let analytic = grads.param(name).unwrap().data()[index];
            out.push(GradSample { name: name.clone(), index, analytic, numeric });
        }
    }
    out
}

/// A batch with a blob-shaped mask so every stage has both classes.
pub fn blob_batch(b: usize, h: usize, w: usize, seed: u64) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    let images = Tensor::from_fn(&[b, 3, h, w], |_| r.gen_range(0.0..1.0));
    let masks = Tensor::from_fn(&[b, 1, h, w], |i| {
        let (y, x) = ((i / w) % h, i % w);
        let (dy, dx) = (y as f64 - h as f64 * 0.45, x as f64 - w as f64 * 0.55);
        (dy * dy + dx * dx < (h as f64 * 0.3).powi(2)) as u8 as f64
    });
    (images, masks)
}
