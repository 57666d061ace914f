//! Differentiable operators recorded on a [`Graph`].

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{adaptive_bin, col2im, gemm, im2col, sigmoid, ConvGeometry, Tensor};

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => shape_err(format!("{what}: expected B×C×H×W, got {s:?}")),
    }
}

/// How the lesion-aware cross-attention turns a query/lesion similarity
/// into a weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LesionGate {
    /// `σ(q·t/√d_k)` per head.
    #[default]
    Sigmoid,
    /// Softmax over the single lesion token, identically 1.
    Softmax,
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, &[a, b], Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("mul: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y)),
                    c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x)),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, &[a], Box::new(move |c| vec![Some(c.grad.map(|g| g * k))]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(
            out,
            &[a],
            Box::new(|c| vec![Some(c.grad.zip_map(c.out, |g, s| g * s * (1.0 - s)))]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(
            out,
            &[a],
            Box::new(|c| vec![Some(c.grad.zip_map(c.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let back: Vec<usize> = self.shape(a).to_vec();
        Ok(self.push(
            out,
            &[a],
            Box::new(move |c| vec![Some(c.grad.clone().reshape(&back).expect("same size"))]),
        ))
    }

    /// `[B, R, S] -> [B, S, R]`.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let (b, r, s) = match *self.shape(a) {
            [b, r, s] => (b, r, s),
            ref sh => return shape_err(format!("transpose_last2: expected rank 3, got {sh:?}")),
        };
        let out = transpose3(self.value(a), b, r, s);
        Ok(self.push(out, &[a], Box::new(move |c| vec![Some(transpose3(c.grad, b, s, r))])))
    }

    /// `[B, C, H, W] -> [B, H·W, C]`.
    pub fn to_tokens(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.value(a), "to_tokens")?;
        let flat = self.reshape(a, &[b, c, h * w])?;
        self.transpose_last2(flat)
    }

    /// `[B, H·W, C] -> [B, C, H, W]`.
    pub fn from_tokens(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let t = self.transpose_last2(a)?;
        let (b, c) = (self.shape(t)[0], self.shape(t)[1]);
        self.reshape(t, &[b, c, h, w])
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return shape_err(format!("concat on axis {axis}: {first:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &wd) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[o * wd..(o + 1) * wd]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        let part_shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        Ok(self.push(
            out,
            parts,
            Box::new(move |c| {
                let row = total * inner;
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &wd) in widths.iter().enumerate() {
                    if c.needs[i] {
                        let mut g = Vec::with_capacity(outer * wd);
                        for o in 0..outer {
                            let start = o * row + offset;
                            g.extend_from_slice(&c.grad.data()[start..start + wd]);
                        }
                        grads.push(Some(Tensor::new(&part_shapes[i], g).expect("consistent")));
                    } else {
                        grads.push(None);
                    }
                    offset += wd;
                }
                grads
            }),
        ))
    }

    /// 2-D convolution, `x: B×Ci×H×W`, `w: Co×Ci×kh×kw`, optional bias `Co`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (_, ci, h, wd) = dims4(self.value(x), "conv2d input")?;
        let (co, wci, kh, kw) = dims4(self.value(w), "conv2d weight")?;
        if wci != ci {
            return shape_err(format!("conv2d: input has {ci} channels, weight expects {wci}"));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [co] {
                return shape_err(format!("conv2d: bias {:?}, expected [{co}]", self.shape(bv)));
            }
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err(format!("conv2d: kernel {kh}×{kw} larger than padded input"));
        }
        let g = ConvGeometry::new(h, wd, kh, kw, stride, pad);
        let mut out = conv_forward(self.value(x), self.value(w).data(), co, &g, true);
        if let Some(bv) = bias {
            add_channel_bias(&mut out, self.value(bv).data());
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(
            out,
            &parents,
            Box::new(move |c| {
                let (dx, dw) =
                    conv_backward(c.inputs[0], c.inputs[1].data(), c.grad, co, &g, true, c.needs[0], c.needs[1]);
                let mut grads = vec![dx, dw];
                if c.inputs.len() == 3 {
                    grads.push(Some(channel_sums(c.grad)));
                }
                grads
            }),
        ))
    }

    /// Convolve each sample with its own single-output kernel:
    /// `x: B×C×H×W`, `k: B×C×kh×kw` → `B×1×H×W`, size-preserving padding.
    pub fn dynamic_conv(&mut self, x: Var, k: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.value(x), "dynamic_conv input")?;
        let (kb, kc, kh, kw) = dims4(self.value(k), "dynamic_conv kernel")?;
        if kb != b || kc != c {
            return shape_err(format!(
                "dynamic_conv: features {:?} vs kernel {:?}",
                self.shape(x),
                self.shape(k)
            ));
        }
        let g = ConvGeometry::same(h, w, kh, kw);
        let out = conv_forward(self.value(x), self.value(k).data(), 1, &g, false);
        Ok(self.push(
            out,
            &[x, k],
            Box::new(move |c| {
                let (dx, dk) =
                    conv_backward(c.inputs[0], c.inputs[1].data(), c.grad, 1, &g, false, c.needs[0], c.needs[1]);
                vec![dx, dk]
            }),
        ))
    }

    /// Group normalization with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (b, c, h, w) = dims4(self.value(x), "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return shape_err(format!("group_norm: {groups} groups do not divide {c} channels"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!("group_norm: affine parameters must be [{c}]"));
        }
        let cpg = c / groups;
        let m = cpg * h * w;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; b * groups];
        let mut out = vec![0.0; xv.len()];
        for n in 0..b {
            for gi in 0..groups {
                let start = (n * c + gi * cpg) * h * w;
                let seg = &xv[start..start + m];
                let mean = seg.iter().sum::<f64>() / m as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let is = 1.0 / (var + EPS).sqrt();
                inv_std[n * groups + gi] = is;
                for (j, &v) in seg.iter().enumerate() {
                    let ch = gi * cpg + j / (h * w);
                    let xh = (v - mean) * is;
                    xhat[start + j] = xh;
                    out[start + j] = xh * gv[ch] + bv[ch];
                }
            }
        }
        let out = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let gamma = ctx.inputs[1].data();
                let dy = ctx.grad.data();
                let plane = h * w;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; dy.len()];
                for n in 0..b {
                    for gi in 0..groups {
                        let start = (n * c + gi * cpg) * plane;
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..m {
                            let ch = gi * cpg + j / plane;
                            let g = dy[start + j];
                            let xh = xhat[start + j];
                            dgamma[ch] += g * xh;
                            dbeta[ch] += g;
                            let dxh = g * gamma[ch];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        let is = inv_std[n * groups + gi];
                        let mf = m as f64;
                        for j in 0..m {
                            let ch = gi * cpg + j / plane;
                            let dxh = dy[start + j] * gamma[ch];
                            dx[start + j] =
                                is / mf * (mf * dxh - sum_dxh - xhat[start + j] * sum_dxh_xh);
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&[b, c, h, w], dx).expect("shape")),
                    Some(Tensor::new(&[c], dgamma).expect("shape")),
                    Some(Tensor::new(&[c], dbeta).expect("shape")),
                ]
            }),
        ))
    }

    /// Nearest-neighbour ×2 upsampling of a `B×C×H×W` map.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.value(x), "upsample2")?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in src.chunks(h * w) {
            for y in 0..oh {
                for xx in 0..ow {
                    out.push(plane[(y / 2) * w + xx / 2]);
                }
            }
        }
        let out = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; b * c * h * w];
                for (p, plane) in ctx.grad.data().chunks(oh * ow).enumerate() {
                    for y in 0..oh {
                        for xx in 0..ow {
                            g[p * h * w + (y / 2) * w + xx / 2] += plane[y * ow + xx];
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, c, h, w], g).expect("shape"))]
            }),
        ))
    }

    /// Adaptive average pooling to `out_h × out_w` bins.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (b, c, h, w) = dims4(self.value(x), "adaptive_avg_pool")?;
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return shape_err("adaptive_avg_pool: empty extent".into());
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for plane in src.chunks(h * w) {
            for r in 0..out_h {
                let (y0, y1) = adaptive_bin(r, h, out_h);
                for q in 0..out_w {
                    let (x0, x1) = adaptive_bin(q, w, out_w);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += plane[y * w + xx];
                        }
                    }
                    out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let out = Tensor::new(&[b, c, out_h, out_w], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; b * c * h * w];
                for (p, gp) in ctx.grad.data().chunks(out_h * out_w).enumerate() {
                    let dst = &mut g[p * h * w..(p + 1) * h * w];
                    for r in 0..out_h {
                        let (y0, y1) = adaptive_bin(r, h, out_h);
                        for q in 0..out_w {
                            let (x0, x1) = adaptive_bin(q, w, out_w);
                            let share = gp[r * out_w + q] / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    dst[y * w + xx] += share;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, c, h, w], g).expect("shape"))]
            }),
        ))
    }

    /// Affine map over the last axis: `x: […, Cin]`, `w: Cout×Cin`, `b: Cout`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let cin = *xs.last().unwrap_or(&0);
        let (cout, wcin) = match *self.shape(w) {
            [o, i] => (o, i),
            ref s => return shape_err(format!("linear weight must be 2-D, got {s:?}")),
        };
        if wcin != cin || self.shape(bias) != [cout] {
            return shape_err(format!(
                "linear: input {xs:?}, weight {:?}, bias {:?}",
                self.shape(w),
                self.shape(bias)
            ));
        }
        let rows = self.value(x).len() / cin.max(1);
        let mut out = vec![0.0; rows * cout];
        for r in out.chunks_mut(cout) {
            r.copy_from_slice(self.value(bias).data());
        }
        gemm(rows, cin, cout, self.value(x).data(), false, self.value(w).data(), true, &mut out, 1.0);
        let mut os = xs.clone();
        *os.last_mut().expect("non-empty") = cout;
        let out = Tensor::new(&os, out)?;
        Ok(self.push(
            out,
            &[x, w, bias],
            Box::new(move |c| {
                let dy = c.grad.data();
                let dx = c.needs[0].then(|| {
                    let mut dx = vec![0.0; rows * cin];
                    gemm(rows, cout, cin, dy, false, c.inputs[1].data(), false, &mut dx, 0.0);
                    Tensor::new(&xs, dx).expect("shape")
                });
                let dw = c.needs[1].then(|| {
                    let mut dw = vec![0.0; cout * cin];
                    gemm(cout, rows, cin, dy, true, c.inputs[0].data(), false, &mut dw, 0.0);
                    Tensor::new(&[cout, cin], dw).expect("shape")
                });
                let db = c.needs[2].then(|| {
                    let mut db = vec![0.0; cout];
                    for r in dy.chunks(cout) {
                        for (a, v) in db.iter_mut().zip(r) {
                            *a += v;
                        }
                    }
                    Tensor::new(&[cout], db).expect("shape")
                });
                vec![dx, dw, db]
            }),
        ))
    }

    /// `[B, C] -> [B, R, C]` by repeating each row `R` times.
    pub fn repeat_rows(&mut self, x: Var, r: usize) -> Result<Var> {
        let (b, c) = match *self.shape(x) {
            [b, c] => (b, c),
            ref s => return shape_err(format!("repeat_rows: expected B×C, got {s:?}")),
        };
        let mut out = Vec::with_capacity(b * r * c);
        for row in self.value(x).data().chunks(c) {
            for _ in 0..r {
                out.extend_from_slice(row);
            }
        }
        let out = Tensor::new(&[b, r, c], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; b * c];
                for (i, row) in ctx.grad.data().chunks(c).enumerate() {
                    let dst = &mut g[(i / r) * c..(i / r + 1) * c];
                    for (a, v) in dst.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                vec![Some(Tensor::new(&[b, c], g).expect("shape"))]
            }),
        ))
    }

    /// Per-channel sum of `feat` weighted by the single-channel map `weight`:
    /// `out[b, c] = Σ_p weight[b, 0, p] · feat[b, c, p]`. With `normalize`
    /// the sum is divided by `Σ_p weight + 1e-6`.
    pub fn weighted_spatial_sum(&mut self, weight: Var, feat: Var, normalize: bool) -> Result<Var> {
        const EPS: f64 = 1e-6;
        let (wb, wc, wh, ww) = dims4(self.value(weight), "weighted_spatial_sum weight")?;
        let (b, c, h, w) = dims4(self.value(feat), "weighted_spatial_sum features")?;
        if wb != b || wc != 1 || wh != h || ww != w {
            return shape_err(format!(
                "weighted_spatial_sum: weight {:?} vs features {:?}",
                self.shape(weight),
                self.shape(feat)
            ));
        }
        let n = h * w;
        let (pv, dv) = (self.value(weight).data(), self.value(feat).data());
        let mut sums = vec![0.0; b * c];
        let mut norms = vec![1.0; b];
        for s in 0..b {
            let p = &pv[s * n..(s + 1) * n];
            for ch in 0..c {
                let d = &dv[(s * c + ch) * n..(s * c + ch + 1) * n];
                sums[s * c + ch] = p.iter().zip(d).map(|(a, b)| a * b).sum();
            }
            if normalize {
                norms[s] = p.iter().sum::<f64>() + EPS;
            }
        }
        let out: Vec<f64> = sums.iter().enumerate().map(|(i, v)| v / norms[i / c]).collect();
        let out = Tensor::new(&[b, c], out)?;
        Ok(self.push(
            out,
            &[weight, feat],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let (pv, dv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut dp = vec![0.0; b * n];
                let mut dd = vec![0.0; b * c * n];
                for s in 0..b {
                    let z = norms[s];
                    let dz = if normalize {
                        -(0..c).map(|ch| g[s * c + ch] * sums[s * c + ch]).sum::<f64>() / (z * z)
                    } else {
                        0.0
                    };
                    for ch in 0..c {
                        let gs = g[s * c + ch] / z;
                        let base = (s * c + ch) * n;
                        for pix in 0..n {
                            dp[s * n + pix] += gs * dv[base + pix];
                            dd[base + pix] = gs * pv[s * n + pix];
                        }
                    }
                    for pix in 0..n {
                        dp[s * n + pix] += dz;
                    }
                }
                vec![
                    Some(Tensor::new(&[b, 1, h, w], dp).expect("shape")),
                    Some(Tensor::new(&[b, c, h, w], dd).expect("shape")),
                ]
            }),
        ))
    }

    /// Scaled dot-product attention with `heads` heads over already
    /// projected `q: B×N×C`, `k, v: B×S×C`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (b, n, c) = match *self.shape(q) {
            [b, n, c] => (b, n, c),
            ref s => return shape_err(format!("attention query must be B×N×C, got {s:?}")),
        };
        let s = match *self.shape(k) {
            [kb, s, kc] if kb == b && kc == c => s,
            ref sh => return shape_err(format!("attention keys {sh:?} vs queries {:?}", self.shape(q))),
        };
        if self.shape(v) != self.shape(k) {
            return shape_err(format!("attention values {:?} vs keys {:?}", self.shape(v), self.shape(k)));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide embedding dim {c}")));
        }
        let weights = attention_weights(self.value(q), self.value(k), heads)?;
        let dk = c / heads;
        let vv = self.value(v).data();
        let mut out = vec![0.0; b * n * c];
        for bi in 0..b {
            for hd in 0..heads {
                for i in 0..n {
                    let a = &weights.data()[((bi * heads + hd) * n + i) * s..][..s];
                    let o = &mut out[(bi * n + i) * c + hd * dk..][..dk];
                    for (j, &aj) in a.iter().enumerate() {
                        let vr = &vv[(bi * s + j) * c + hd * dk..][..dk];
                        for d in 0..dk {
                            o[d] += aj * vr[d];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[b, n, c], out)?;
        let scale = 1.0 / (dk as f64).sqrt();
        Ok(self.push(
            out,
            &[q, k, v],
            Box::new(move |ctx| {
                let (qv, kv, vv) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
                let go = ctx.grad.data();
                let aw = weights.data();
                let mut dq = vec![0.0; b * n * c];
                let mut dkk = vec![0.0; b * s * c];
                let mut dv = vec![0.0; b * s * c];
                let mut da = vec![0.0; s];
                for bi in 0..b {
                    for hd in 0..heads {
                        let off = hd * dk;
                        for i in 0..n {
                            let a = &aw[((bi * heads + hd) * n + i) * s..][..s];
                            let g = &go[(bi * n + i) * c + off..][..dk];
                            let mut dot = 0.0;
                            for j in 0..s {
                                let vr = &vv[(bi * s + j) * c + off..][..dk];
                                da[j] = (0..dk).map(|d| g[d] * vr[d]).sum();
                                dot += a[j] * da[j];
                                let dvr = &mut dv[(bi * s + j) * c + off..][..dk];
                                for d in 0..dk {
                                    dvr[d] += a[j] * g[d];
                                }
                            }
                            let qr = &qv[(bi * n + i) * c + off..][..dk];
                            for j in 0..s {
                                let ds = a[j] * (da[j] - dot) * scale;
                                let kr = &kv[(bi * s + j) * c + off..][..dk];
                                let dqr = &mut dq[(bi * n + i) * c + off..][..dk];
                                for d in 0..dk {
                                    dqr[d] += ds * kr[d];
                                }
                                let dkr = &mut dkk[(bi * s + j) * c + off..][..dk];
                                for d in 0..dk {
                                    dkr[d] += ds * qr[d];
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&[b, n, c], dq).expect("shape")),
                    Some(Tensor::new(&[b, s, c], dkk).expect("shape")),
                    Some(Tensor::new(&[b, s, c], dv).expect("shape")),
                ]
            }),
        ))
    }

    /// Cross-attention against a single token per sample: `q: B×N×C`,
    /// `k, v: B×1×C`. Each query/head pair scales the head's slice of `v` by
    /// the gate weight.
    pub fn lesion_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        gate: LesionGate,
    ) -> Result<Var> {
        let (b, n, c) = match *self.shape(q) {
            [b, n, c] => (b, n, c),
            ref s => return shape_err(format!("lesion attention query must be B×N×C, got {s:?}")),
        };
        if self.shape(k) != [b, 1, c] || self.shape(v) != [b, 1, c] {
            return shape_err(format!(
                "lesion attention expects B×1×C key/value, got {:?} / {:?}",
                self.shape(k),
                self.shape(v)
            ));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide embedding dim {c}")));
        }
        let weights = lesion_gate_weights(self.value(q), self.value(k), heads, gate);
        if !weights.is_finite() {
            return Err(Error::Numeric { stage: 0, what: "lesion attention logits" });
        }
        let dk = c / heads;
        let vv = self.value(v).data();
        let mut out = vec![0.0; b * n * c];
        for bi in 0..b {
            for i in 0..n {
                for hd in 0..heads {
                    let wgt = weights.data()[(bi * n + i) * heads + hd];
                    for d in 0..dk {
                        out[(bi * n + i) * c + hd * dk + d] = wgt * vv[bi * c + hd * dk + d];
                    }
                }
            }
        }
        let out = Tensor::new(&[b, n, c], out)?;
        let scale = 1.0 / (dk as f64).sqrt();
        Ok(self.push(
            out,
            &[q, k, v],
            Box::new(move |ctx| {
                let (qv, kv, vv) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
                let go = ctx.grad.data();
                let wv = weights.data();
                let mut dq = vec![0.0; b * n * c];
                let mut dkk = vec![0.0; b * c];
                let mut dv = vec![0.0; b * c];
                for bi in 0..b {
                    for i in 0..n {
                        for hd in 0..heads {
                            let wgt = wv[(bi * n + i) * heads + hd];
                            let base = (bi * n + i) * c + hd * dk;
                            let tb = bi * c + hd * dk;
                            let mut dw = 0.0;
                            for d in 0..dk {
                                dv[tb + d] += wgt * go[base + d];
                                dw += go[base + d] * vv[tb + d];
                            }
                            if gate == LesionGate::Sigmoid {
                                let ds = dw * wgt * (1.0 - wgt) * scale;
                                for d in 0..dk {
                                    dq[base + d] += ds * kv[tb + d];
                                    dkk[tb + d] += ds * qv[base + d];
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&[b, n, c], dq).expect("shape")),
                    Some(Tensor::new(&[b, 1, c], dkk).expect("shape")),
                    Some(Tensor::new(&[b, 1, c], dv).expect("shape")),
                ]
            }),
        ))
    }

    /// Mean binary cross-entropy on logits, in the stable
    /// `max(x,0) − x·y + ln(1 + e^{−|x|})` form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return shape_err(format!("bce: logits {:?} vs target {:?}", self.shape(logits), target.shape()));
        }
        let x = self.value(logits).data();
        let n = x.len() as f64;
        let loss: f64 = x
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let target = target.clone();
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |c| {
                let g = c.grad.item() / n;
                vec![Some(c.inputs[0].zip_map(&target, |x, y| g * (sigmoid(x) - y)))]
            }),
        ))
    }

    /// Soft Dice loss `1 − (2Σpy + s)/(Σp + Σy + s)` per sample on
    /// `sigmoid(logits)`, averaged over the leading (batch) axis.
    pub fn soft_dice(&mut self, logits: Var, target: &Tensor, smooth: f64) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return shape_err(format!("dice: logits {:?} vs target {:?}", self.shape(logits), target.shape()));
        }
        let b = self.shape(logits)[0];
        let per = self.value(logits).len() / b;
        let p: Vec<f64> = self.value(logits).data().iter().map(|&v| sigmoid(v)).collect();
        let y = target.data();
        let mut stats = Vec::with_capacity(b);
        let mut loss = 0.0;
        for s in 0..b {
            let (ps, ys) = (&p[s * per..(s + 1) * per], &y[s * per..(s + 1) * per]);
            let inter: f64 = ps.iter().zip(ys).map(|(a, b)| a * b).sum();
            let denom = ps.iter().sum::<f64>() + ys.iter().sum::<f64>() + smooth;
            let num = 2.0 * inter + smooth;
            loss += 1.0 - num / denom;
            stats.push((num, denom));
        }
        loss /= b as f64;
        let target = target.clone();
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |c| {
                let g = c.grad.item() / b as f64;
                let y = target.data();
                let mut dx = vec![0.0; p.len()];
                for (s, &(num, denom)) in stats.iter().enumerate() {
                    for j in s * per..(s + 1) * per {
                        let dl_dp = -(2.0 * y[j] * denom - num) / (denom * denom);
                        dx[j] = g * dl_dp * p[j] * (1.0 - p[j]);
                    }
                }
                vec![Some(Tensor::new(c.inputs[0].shape(), dx).expect("shape"))]
            }),
        ))
    }
}

/// Softmax attention weights `B×heads×N×S` for projected queries and keys.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, c) = (q.dim(0), q.dim(1), q.dim(2));
    let s = k.dim(1);
    let dk = c / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let (qv, kv) = (q.data(), k.data());
    let mut out = vec![0.0; b * heads * n * s];
    for bi in 0..b {
        for hd in 0..heads {
            for i in 0..n {
                let qr = &qv[(bi * n + i) * c + hd * dk..][..dk];
                let row = &mut out[((bi * heads + hd) * n + i) * s..][..s];
                for (j, r) in row.iter_mut().enumerate() {
                    let kr = &kv[(bi * s + j) * c + hd * dk..][..dk];
                    *r = (0..dk).map(|d| qr[d] * kr[d]).sum::<f64>() * scale;
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !max.is_finite() {
                    return Err(Error::Numeric { stage: 0, what: "attention logits" });
                }
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    z += *r;
                }
                for r in row.iter_mut() {
                    *r /= z;
                }
            }
        }
    }
    Tensor::new(&[b, heads, n, s], out)
}

/// Per-query, per-head gate weights `B×N×heads` for lesion attention.
pub fn lesion_gate_weights(q: &Tensor, k: &Tensor, heads: usize, gate: LesionGate) -> Tensor {
    let (b, n, c) = (q.dim(0), q.dim(1), q.dim(2));
    let dk = c / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let (qv, kv) = (q.data(), k.data());
    let mut out = Vec::with_capacity(b * n * heads);
    for bi in 0..b {
        for i in 0..n {
            for hd in 0..heads {
                out.push(match gate {
                    LesionGate::Softmax => 1.0,
                    LesionGate::Sigmoid => {
                        let qr = &qv[(bi * n + i) * c + hd * dk..][..dk];
                        let kr = &kv[bi * c + hd * dk..][..dk];
                        sigmoid((0..dk).map(|d| qr[d] * kr[d]).sum::<f64>() * scale)
                    }
                });
            }
        }
    }
    Tensor::new(&[b, n, heads], out).expect("shape")
}

fn transpose3(t: &Tensor, b: usize, r: usize, s: usize) -> Tensor {
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        let base = bi * r * s;
        for i in 0..r {
            for j in 0..s {
                out[base + j * r + i] = src[base + i * s + j];
            }
        }
    }
    Tensor::new(&[b, s, r], out).expect("shape")
}

fn add_channel_bias(out: &mut Tensor, bias: &[f64]) {
    let (c, plane) = (out.dim(1), out.dim(2) * out.dim(3));
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let bv = bias[i % c];
        for v in chunk {
            *v += bv;
        }
    }
}

fn channel_sums(g: &Tensor) -> Tensor {
    let (c, plane) = (g.dim(1), g.dim(2) * g.dim(3));
    let mut out = vec![0.0; c];
    for (i, chunk) in g.data().chunks(plane).enumerate() {
        out[i % c] += chunk.iter().sum::<f64>();
    }
    Tensor::new(&[c], out).expect("shape")
}

/// Convolution forward via im2col + GEMM. With `shared_weights` every sample
/// uses `w`; otherwise `w` holds one `co×C×kh×kw` block per sample.
fn conv_forward(x: &Tensor, w: &[f64], co: usize, g: &ConvGeometry, shared_weights: bool) -> Tensor {
    let (b, ci) = (x.dim(0), x.dim(1));
    let plen = g.patch_len(ci);
    let olen = g.out_len();
    let in_len = ci * g.in_h * g.in_w;
    let mut cols = vec![0.0; plen * olen];
    let mut out = vec![0.0; b * co * olen];
    for s in 0..b {
        im2col(&x.data()[s * in_len..(s + 1) * in_len], ci, g, &mut cols);
        let ws = if shared_weights { w } else { &w[s * co * plen..(s + 1) * co * plen] };
        gemm(co, plen, olen, ws, false, &cols, false, &mut out[s * co * olen..(s + 1) * co * olen], 0.0);
    }
    Tensor::new(&[b, co, g.out_h, g.out_w], out).expect("shape")
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    w: &[f64],
    dy: &Tensor,
    co: usize,
    g: &ConvGeometry,
    shared_weights: bool,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (b, ci) = (x.dim(0), x.dim(1));
    let plen = g.patch_len(ci);
    let olen = g.out_len();
    let in_len = ci * g.in_h * g.in_w;
    let mut cols = vec![0.0; plen * olen];
    let mut dcols = vec![0.0; plen * olen];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let wlen = if shared_weights { co * plen } else { b * co * plen };
    let mut dw = need_dw.then(|| vec![0.0; wlen]);
    for s in 0..b {
        let dys = &dy.data()[s * co * olen..(s + 1) * co * olen];
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[s * in_len..(s + 1) * in_len], ci, g, &mut cols);
            let (dws, beta) = if shared_weights {
                (&mut dw[..], 1.0)
            } else {
                (&mut dw[s * co * plen..(s + 1) * co * plen], 0.0)
            };
            gemm(co, olen, plen, dys, false, &cols, true, dws, beta);
        }
        if let Some(dx) = dx.as_mut() {
            let ws = if shared_weights { w } else { &w[s * co * plen..(s + 1) * co * plen] };
            gemm(plen, co, olen, ws, true, dys, false, &mut dcols, 0.0);
            col2im(&dcols, ci, g, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
    let wshape = if shared_weights {
        vec![co, ci, g.kh, g.kw]
    } else {
        vec![b, ci, g.kh, g.kw]
    };
    (
        dx.map(|d| Tensor::new(x.shape(), d).expect("shape")),
        dw.map(|d| Tensor::new(&wshape, d).expect("shape")),
    )
}
