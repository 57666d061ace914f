//! Five-stage encoder/decoder with per-stage unification, segmentation heads
//! and the attention blocks wired in.

use crate::attention::{self, block_specs, esa_prefix, lca_prefix};
use crate::autograd::{Graph, Var};
use crate::config::{norm_groups, ModelConfig, STAGES, UNIFIED_CHANNELS};
use crate::dynamic_kernel::{self, DynamicKernel};
use crate::error::{Error, Result};
use crate::params::{conv_specs, norm_specs, ParamSpec, ParamStore};
use crate::tensor::Tensor;

pub const STATIC_HEAD: &str = "head";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Encoder,
    Decoder,
    Unified,
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    /// `B×C×H×W`.
    pub values: Var,
    pub stage: usize,
    pub kind: FeatureKind,
}

/// Everything one forward pass produced, indexed by stage (`[0]` is stage 1).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub predictions: Vec<Var>,
    /// Empty when the dynamic kernel is disabled.
    pub kernels: Vec<Var>,
    pub encoder: Vec<FeatureMap>,
    pub decoder: Vec<FeatureMap>,
    pub unified: Vec<FeatureMap>,
}

impl ForwardTrace {
    pub fn prediction(&self, stage: usize) -> Var {
        self.predictions[stage - 1]
    }

    /// `P_1`, the model output.
    pub fn output(&self) -> Var {
        self.predictions[0]
    }
}

fn enc(stage: usize, part: &str) -> String {
    format!("enc{stage}.{part}")
}

fn dec(stage: usize, part: &str) -> String {
    format!("dec{stage}.{part}")
}

fn unify_name(stage: usize) -> String {
    format!("unify{stage}")
}

/// Every trainable tensor of the configured model.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut cin = 3;
    for s in 1..=STAGES {
        let c = cfg.channels(s);
        specs.extend(conv_specs(&enc(s, "conv1"), c, cin, 3));
        specs.extend(norm_specs(&enc(s, "norm1"), c));
        specs.extend(conv_specs(&enc(s, "conv2"), c, c, 3));
        specs.extend(norm_specs(&enc(s, "norm2"), c));
        cin = c;
    }
    for s in 1..STAGES {
        let c = cfg.channels(s);
        specs.extend(conv_specs(&dec(s, "conv1"), c, c + cfg.channels(s + 1), 3));
        specs.extend(norm_specs(&dec(s, "norm1"), c));
        specs.extend(conv_specs(&dec(s, "conv2"), c, c, 3));
        specs.extend(norm_specs(&dec(s, "norm2"), c));
    }
    for s in 1..=STAGES {
        specs.extend(conv_specs(&unify_name(s), UNIFIED_CHANNELS, cfg.channels(s), 1));
    }
    if cfg.use_dk {
        specs.extend(dynamic_kernel::param_specs(cfg.channels(STAGES)));
    } else {
        specs.extend(conv_specs(STATIC_HEAD, 1, UNIFIED_CHANNELS, 1));
    }
    for s in 1..=STAGES {
        if cfg.esa_at(s) {
            specs.extend(block_specs(&esa_prefix(s), cfg.channels(s)));
        }
    }
    for s in 1..STAGES {
        if cfg.lca_at(s) {
            specs.extend(block_specs(&lca_prefix(s), cfg.channels(s)));
        }
    }
    specs
}

pub fn init_params(cfg: &ModelConfig) -> ParamStore {
    ParamStore::init(&param_specs(cfg), cfg.seed)
}

fn conv_norm_relu(g: &mut Graph, p: &ParamStore, conv: &str, norm: &str, x: Var, stride: usize) -> Result<Var> {
    let y = p.conv(g, conv, x, stride, 1)?;
    let groups = norm_groups(g.shape(y)[1]);
    let y = p.group_norm(g, norm, y, groups)?;
    Ok(g.relu(y))
}

/// Five encoder blocks, each halving the resolution.
pub fn encode(g: &mut Graph, p: &ParamStore, cfg: &ModelConfig, images: Var) -> Result<Vec<FeatureMap>> {
    let (h, w) = cfg.input_size;
    match *g.shape(images) {
        [_, 3, ih, iw] if (ih, iw) == (h, w) => {}
        [_, 3, ih, _] if ih != h => {
            return Err(Error::Config(format!("image height {ih} differs from configured {h}")))
        }
        [_, 3, _, iw] => return Err(Error::Config(format!("image width {iw} differs from configured {w}"))),
        ref s => return Err(Error::Shape(format!("images must be B×3×H×W, got {s:?}"))),
    }
    let mut feats = Vec::with_capacity(STAGES);
    let mut x = images;
    for s in 1..=STAGES {
        x = conv_norm_relu(g, p, &enc(s, "conv1"), &enc(s, "norm1"), x, 2)?;
        x = conv_norm_relu(g, p, &enc(s, "conv2"), &enc(s, "norm2"), x, 1)?;
        feats.push(FeatureMap { values: x, stage: s, kind: FeatureKind::Encoder });
    }
    Ok(feats)
}

/// 1×1 projection of a decoder feature to 64 channels.
pub fn unify(g: &mut Graph, p: &ParamStore, d: FeatureMap) -> Result<FeatureMap> {
    if d.kind != FeatureKind::Decoder {
        return Err(Error::Shape(format!("unify expects a decoder feature, got {:?}", d.kind)));
    }
    let values = p.conv(g, &unify_name(d.stage), d.values, 1, 0)?;
    Ok(FeatureMap { values, stage: d.stage, kind: FeatureKind::Unified })
}

/// Upsample the deeper decoder feature ×2, concatenate the skip, then two
/// conv+norm+ReLU layers.
pub fn decode_stage(g: &mut Graph, p: &ParamStore, next: FeatureMap, skip: FeatureMap) -> Result<FeatureMap> {
    let stage = skip.stage;
    let up = g.upsample2(next.values)?;
    if g.shape(up)[2..] != g.shape(skip.values)[2..] {
        return Err(Error::Shape(format!(
            "decoder stage {stage}: upsampled {:?} does not match skip {:?}",
            g.shape(up),
            g.shape(skip.values)
        )));
    }
    let x = g.concat(&[up, skip.values], 1)?;
    let x = conv_norm_relu(g, p, &dec(stage, "conv1"), &dec(stage, "norm1"), x, 1)?;
    let x = conv_norm_relu(g, p, &dec(stage, "conv2"), &dec(stage, "norm2"), x, 1)?;
    Ok(FeatureMap { values: x, stage, kind: FeatureKind::Decoder })
}

/// Full forward pass over a `B×3×H×W` batch.
pub fn forward(g: &mut Graph, p: &ParamStore, cfg: &ModelConfig, images: Var) -> Result<ForwardTrace> {
    cfg.validate()?;
    let encoder = encode(g, p, cfg, images)?;
    let mut skips = encoder.clone();
    for s in 1..=STAGES {
        if cfg.esa_at(s) {
            let values = attention::esa_block(g, p, s, encoder[s - 1].values, cfg.heads)?;
            skips[s - 1] = FeatureMap { values, stage: s, kind: FeatureKind::Encoder };
        }
    }

    let gate = cfg.lca_gate.into();
    let mut predictions = vec![None; STAGES];
    let mut kernels = vec![None; STAGES];
    let mut decoder = vec![None; STAGES];
    let mut unified = vec![None; STAGES];
    let mut kernel: Option<DynamicKernel> = None;
    let mut prev: Option<(FeatureMap, Var)> = None;

    for s in (1..=STAGES).rev() {
        let d = match prev {
            None => FeatureMap { values: skips[s - 1].values, stage: s, kind: FeatureKind::Decoder },
            Some((next, _)) => decode_stage(g, p, next, skips[s - 1])?,
        };
        let du = unify(g, p, d)?;
        let logits = if cfg.use_dk {
            let k = match (kernel, prev) {
                (None, _) => dynamic_kernel::generate_kernel(g, p, encoder[STAGES - 1].values, cfg.kernel_size)?,
                (Some(k_prev), Some((_, p_prev))) => {
                    let f = dynamic_kernel::extract_lesion_feature(
                        g,
                        du.values,
                        p_prev,
                        true,
                        cfg.lesion_pooling,
                        s,
                    )?;
                    dynamic_kernel::update_kernel(g, p, k_prev, f)?.0
                }
                (Some(_), None) => unreachable!("a kernel exists only after stage 5"),
            };
            kernel = Some(k);
            kernels[s - 1] = Some(k.weights);
            dynamic_kernel::predict(g, k, du.values)?
        } else {
            p.conv(g, STATIC_HEAD, du.values, 1, 0)?
        };
        let d = if s < STAGES && cfg.lca_at(s) {
            let values = attention::lca_block(g, p, s, d.values, logits, cfg.heads, gate, cfg.lesion_pooling)?;
            FeatureMap { values, ..d }
        } else {
            d
        };
        predictions[s - 1] = Some(logits);
        decoder[s - 1] = Some(d);
        unified[s - 1] = Some(du);
        prev = Some((d, logits));
    }

    Ok(ForwardTrace {
        predictions: predictions.into_iter().map(|v| v.expect("every stage ran")).collect(),
        kernels: kernels.into_iter().flatten().collect(),
        encoder,
        decoder: decoder.into_iter().map(|v| v.expect("every stage ran")).collect(),
        unified: unified.into_iter().map(|v| v.expect("every stage ran")).collect(),
    })
}

/// Probability maps `B×1×H×W` at the input resolution: `P_1` logits
/// resized bilinearly (registered like the ground-truth downsampling), then
/// squashed.
pub fn predict_probabilities(p: &ParamStore, cfg: &ModelConfig, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let trace = forward(&mut g, p, cfg, x)?;
    let logits = g.value(trace.output());
    let (h, w) = (images.dim(2), images.dim(3));
    let maps: Vec<Tensor> = (0..logits.dim(0))
        .map(|i| crate::tensor::resize_bilinear_registered(&logits.index0(i), h, w).map(crate::tensor::sigmoid))
        .collect();
    Tensor::stack(&maps)
}
