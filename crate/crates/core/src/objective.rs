//! BCE + soft Dice, deep supervision, the poly schedule and momentum SGD.

use std::collections::BTreeMap;

use crate::autograd::{Graph, Var};
use crate::config::TrainConfig;
use crate::data::downsample_gt;
use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub fn bce_loss(g: &mut Graph, logits: Var, gt: &Tensor) -> Result<Var> {
    g.bce_with_logits(logits, gt)
}

pub fn dice_loss(g: &mut Graph, logits: Var, gt: &Tensor, smooth: f64) -> Result<Var> {
    g.soft_dice(logits, gt, smooth)
}

/// Downsample a `B×1×H×W` mask batch to `h×w` by nearest neighbour.
fn downsample_batch(gt: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let items: Vec<Tensor> = (0..gt.dim(0)).map(|i| downsample_gt(&gt.index0(i), h, w)).collect();
    Tensor::stack(&items)
}

/// `Σ_stage (bce + dice)` over the listed stages, each against the mask
/// resized to that stage's resolution.
pub fn supervision_loss(
    g: &mut Graph,
    trace: &ForwardTrace,
    gt: &Tensor,
    smooth: f64,
    stages: &[usize],
) -> Result<Var> {
    if gt.rank() != 4 || gt.dim(1) != 1 {
        return Err(Error::Shape(format!("ground truth must be B×1×H×W, got {:?}", gt.shape())));
    }
    let mut total: Option<Var> = None;
    for &s in stages {
        let logits = trace.prediction(s);
        let (h, w) = (g.shape(logits)[2], g.shape(logits)[3]);
        let target = downsample_batch(gt, h, w)?;
        let bce = bce_loss(g, logits, &target)?;
        let dice = dice_loss(g, logits, &target, smooth)?;
        let stage_loss = g.add(bce, dice)?;
        total = Some(match total {
            None => stage_loss,
            Some(t) => g.add(t, stage_loss)?,
        });
    }
    total.ok_or_else(|| Error::Config("no supervised stages".into()))
}

/// Equal-weight supervision of all five predictions.
pub fn deep_supervision_loss(g: &mut Graph, trace: &ForwardTrace, gt: &Tensor, smooth: f64) -> Result<Var> {
    if trace.predictions.len() != 5 {
        return Err(Error::Shape(format!("expected 5 predictions, got {}", trace.predictions.len())));
    }
    supervision_loss(g, trace, gt, smooth, &[1, 2, 3, 4, 5])
}

/// `lr_init · (1 − epoch/epochs)^power`.
pub fn poly_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Domain(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    Ok(cfg.lr_init * (1.0 - epoch as f64 / cfg.epochs as f64).powf(cfg.power))
}

/// Classical momentum SGD with weight decay folded into the gradient:
/// `g ← g + wd·θ`, `v ← m·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.momentum, cfg.weight_decay)
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: BTreeMap<String, Tensor>) {
        self.velocity = v;
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, grad) in grads {
            let theta = params
                .get_mut(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter `{name}`")))?;
            if theta.shape() != grad.shape() {
                return Err(Error::Shape(format!(
                    "`{name}`: parameter {:?} vs gradient {:?}",
                    theta.shape(),
                    grad.shape()
                )));
            }
            let v = self.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            for ((t, &g), v) in theta.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
                let g = g + self.weight_decay * *t;
                *v = self.momentum * *v + g;
                *t -= lr * *v;
            }
        }
        Ok(())
    }
}
