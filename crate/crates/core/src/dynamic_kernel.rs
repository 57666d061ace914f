//! Input-conditioned segmentation kernel: generation from the deepest
//! encoder feature, lesion-feature extraction, and the gated update.
//!
//! The kernel of one sample is a `64×K×K` block. For the update it is viewed
//! as `K·K` position vectors of width 64; the same lesion descriptor is
//! broadcast to every position.

use crate::autograd::{Graph, Var};
use crate::config::{LesionPooling, UNIFIED_CHANNELS};
use crate::error::{Error, Result};
use crate::params::{conv_specs, linear_specs, ParamSpec, ParamStore};

pub const GENERATOR: &str = "dk.gen";

/// Names of the six update transforms, `dk.phi1` … `dk.phi6`.
pub fn phi(i: usize) -> String {
    format!("dk.phi{i}")
}

#[derive(Debug, Clone, Copy)]
pub struct DynamicKernel {
    /// `B×64×K×K`.
    pub weights: Var,
    pub stage: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LesionDescriptor {
    /// `B×C`.
    pub values: Var,
    pub stage: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GatePair {
    /// Gate on the lesion term, `B×K·K×64`.
    pub feature: Var,
    /// Gate on the previous kernel, `B×K·K×64`.
    pub kernel: Var,
}

pub fn param_specs(e5_channels: usize) -> Vec<ParamSpec> {
    let mut specs = conv_specs(GENERATOR, UNIFIED_CHANNELS, e5_channels, 1);
    for i in 1..=6 {
        specs.extend(linear_specs(&phi(i), UNIFIED_CHANNELS, UNIFIED_CHANNELS));
    }
    specs
}

/// Adaptive-average-pool `E_5` to `K×K`, then project to 64 channels.
pub fn generate_kernel(
    g: &mut Graph,
    params: &ParamStore,
    e5: Var,
    kernel_size: usize,
) -> Result<DynamicKernel> {
    let (h, w) = (g.shape(e5)[2], g.shape(e5)[3]);
    if kernel_size > h.min(w) {
        log::warn!(
            "kernel size {kernel_size} exceeds the {h}×{w} deepest feature; pooling bins overlap"
        );
    }
    let pooled = g.adaptive_avg_pool(e5, kernel_size, kernel_size)?;
    let weights = params.conv(g, GENERATOR, pooled, 1, 0)?;
    Ok(DynamicKernel { weights, stage: 5 })
}

/// `F = Σ_pixels σ(P) ∘ D̄`, with `P` nearest-upsampled ×2 first when
/// `upsample` is set.
pub fn extract_lesion_feature(
    g: &mut Graph,
    features: Var,
    prev_logits: Var,
    upsample: bool,
    pooling: LesionPooling,
    stage: usize,
) -> Result<LesionDescriptor> {
    let (fs, ps) = (g.shape(features).to_vec(), g.shape(prev_logits).to_vec());
    let factor = if upsample { 2 } else { 1 };
    if fs.len() != 4 || ps.len() != 4 || ps[2] * factor != fs[2] || ps[3] * factor != fs[3] {
        return Err(Error::Shape(format!(
            "lesion feature at stage {stage}: prediction {ps:?} (×{factor}) does not match features {fs:?}"
        )));
    }
    let mut prob = g.sigmoid(prev_logits);
    if upsample {
        prob = g.upsample2(prob)?;
    }
    let mut values = g.weighted_spatial_sum(prob, features, pooling == LesionPooling::MaskedMean)?;
    if pooling == LesionPooling::PixelMean {
        values = g.scale(values, 1.0 / (fs[2] * fs[3]) as f64);
    }
    Ok(LesionDescriptor { values, stage })
}

/// One gated update step:
/// `G = φ3(F)∘φ4(K)`, `G_K = σ(φ5(G))`, `G_F = σ(φ6(G))`,
/// `K' = G_F∘φ1(F) + G_K∘φ2(K)`.
pub fn update_kernel(
    g: &mut Graph,
    params: &ParamStore,
    prev: DynamicKernel,
    lesion: LesionDescriptor,
) -> Result<(DynamicKernel, GatePair)> {
    let ks = g.shape(prev.weights).to_vec();
    let (b, c, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if c != UNIFIED_CHANNELS || g.shape(lesion.values) != [b, c] {
        return Err(Error::Shape(format!(
            "kernel update at stage {}: kernel {ks:?}, lesion feature {:?}",
            lesion.stage,
            g.shape(lesion.values)
        )));
    }
    let positions = kh * kw;
    let flat = g.reshape(prev.weights, &[b, c, positions])?;
    let kernel = g.transpose_last2(flat)?;
    let feat = g.repeat_rows(lesion.values, positions)?;

    let f3 = params.linear(g, &phi(3), feat)?;
    let k4 = params.linear(g, &phi(4), kernel)?;
    let inter = g.mul(f3, k4)?;
    let k_gate = params.linear(g, &phi(5), inter)?;
    let k_gate = g.sigmoid(k_gate);
    let f_gate = params.linear(g, &phi(6), inter)?;
    let f_gate = g.sigmoid(f_gate);

    let f1 = params.linear(g, &phi(1), feat)?;
    let k2 = params.linear(g, &phi(2), kernel)?;
    let a = g.mul(f_gate, f1)?;
    let bterm = g.mul(k_gate, k2)?;
    let updated = g.add(a, bterm)?;
    if !g.value(updated).is_finite() {
        return Err(Error::Numeric { stage: lesion.stage, what: "kernel update" });
    }
    let t = g.transpose_last2(updated)?;
    let weights = g.reshape(t, &[b, c, kh, kw])?;
    Ok((
        DynamicKernel { weights, stage: lesion.stage },
        GatePair { feature: f_gate, kernel: k_gate },
    ))
}

/// Apply the kernel to unified features: `B×64×H×W` → `B×1×H×W` logits.
pub fn predict(g: &mut Graph, kernel: DynamicKernel, unified: Var) -> Result<Var> {
    let c = g.shape(unified).get(1).copied().unwrap_or(0);
    if c != g.shape(kernel.weights)[1] {
        return Err(Error::Shape(format!(
            "predict at stage {}: features have {c} channels, kernel {:?}",
            kernel.stage,
            g.shape(kernel.weights)
        )));
    }
    g.dynamic_conv(unified, kernel.weights)
}
