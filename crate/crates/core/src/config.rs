use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::LesionGate;

/// Number of encoder (and decoder) stages.
pub const STAGES: usize = 5;
/// Channel width of unified decoder features and of the dynamic kernel.
pub const UNIFIED_CHANNELS: usize = 64;

/// How prediction-weighted lesion features are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionPooling {
    /// Plain probability-weighted sum over pixels.
    Sum,
    /// The same sum divided by the pixel count; a fixed rescaling, so still
    /// linear in the features and monotone in the probabilities.
    #[default]
    PixelMean,
    /// The same sum divided by the total probability mass.
    MaskedMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Sigmoid,
    Softmax,
}

impl From<GateMode> for LesionGate {
    fn from(m: GateMode) -> Self {
        match m {
            GateMode::Sigmoid => LesionGate::Sigmoid,
            GateMode::Softmax => LesionGate::Softmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_channels: [usize; STAGES],
    /// `(H, W)`.
    pub input_size: (usize, usize),
    pub kernel_size: usize,
    pub heads: usize,
    pub esa_stages: BTreeSet<usize>,
    pub lca_stages: BTreeSet<usize>,
    pub use_dk: bool,
    pub use_esa: bool,
    pub use_lca: bool,
    pub seed: u64,
    pub lesion_pooling: LesionPooling,
    pub lca_gate: GateMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_channels: [16, 32, 64, 128, 256],
            input_size: (64, 64),
            kernel_size: 1,
            heads: 8,
            esa_stages: [3, 4, 5].into(),
            lca_stages: [2, 3, 4].into(),
            use_dk: true,
            use_esa: true,
            use_lca: true,
            seed: 0,
            lesion_pooling: LesionPooling::PixelMean,
            lca_gate: GateMode::Sigmoid,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self, stage: usize) -> usize {
        self.encoder_channels[stage - 1]
    }

    /// Spatial size of stage `stage` features.
    pub fn stage_size(&self, stage: usize) -> (usize, usize) {
        let (mut h, mut w) = self.input_size;
        for _ in 0..stage {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    pub fn esa_at(&self, stage: usize) -> bool {
        self.use_esa && self.esa_stages.contains(&stage)
    }

    pub fn lca_at(&self, stage: usize) -> bool {
        self.use_lca && self.lca_stages.contains(&stage)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        let unit = 1 << STAGES;
        if h == 0 || h % unit != 0 {
            return Err(Error::Config(format!("input height {h} is not a positive multiple of {unit}")));
        }
        if w == 0 || w % unit != 0 {
            return Err(Error::Config(format!("input width {w} is not a positive multiple of {unit}")));
        }
        if let Some(i) = self.encoder_channels.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("encoder stage {} has zero channels", i + 1)));
        }
        if self.kernel_size == 0 {
            return Err(Error::Config("kernel_size must be at least 1".into()));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be at least 1".into()));
        }
        if let Some(s) = self.esa_stages.iter().find(|s| !(1..=5).contains(*s)) {
            return Err(Error::Config(format!("esa stage {s} outside 1..=5")));
        }
        if let Some(s) = self.lca_stages.iter().find(|s| !(1..=4).contains(*s)) {
            return Err(Error::Config(format!("lca stage {s} outside 1..=4")));
        }
        for s in 1..=STAGES {
            let c = self.channels(s);
            if (self.esa_at(s) || self.lca_at(s)) && !c.is_multiple_of(self.heads) {
                return Err(Error::Config(format!(
                    "{} heads do not divide the {c} channels of attention stage {s}",
                    self.heads
                )));
            }
        }
        Ok(())
    }
}

/// Group count for normalizing `channels` channels.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dice_smooth: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-3,
            power: 0.9,
            epochs: 20,
            batch_size: 4,
            momentum: 0.9,
            weight_decay: 1e-5,
            dice_smooth: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_init", self.lr_init),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("dice_smooth", self.dice_smooth),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{k} must be positive, got {v}")));
        }
        if !(self.power > 0.0 && self.power <= 1.0) {
            return Err(Error::Config(format!("power must lie in (0, 1], got {}", self.power)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}
