//! Mini-batch training with deep supervision, poly LR and momentum SGD.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{augment, Sample};
use crate::error::{Error, Result};
use crate::model::{forward, init_params};
use crate::objective::{deep_supervision_loss, poly_lr, Sgd};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub iterations: usize,
    /// Dice on the selection set, when it was evaluated this epoch.
    pub val_dice: Option<f64>,
}

/// RNG for everything random inside `epoch`: batch order and augmentation.
/// Keyed by `(seed, epoch)` so a resumed run replays the same stream.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7472_6169_6e00 + epoch as u64);
    rng
}

pub fn stack_batch(batch: &[Sample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<Tensor> = batch.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Tensor> = batch.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    pub optimizer: Sgd,
    pub next_epoch: usize,
}

impl Trainer {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let params = init_params(&model);
        let optimizer = Sgd::from_config(&train);
        Ok(Self { model, train, params, optimizer, next_epoch: 0 })
    }

    /// Continue from a checkpoint with its parameters, velocity and epoch
    /// counter; `train` may extend the epoch budget.
    pub fn resume(ck: Checkpoint, train: TrainConfig) -> Result<Self> {
        ck.model.validate()?;
        train.validate()?;
        let mut optimizer = Sgd::from_config(&train);
        optimizer.set_velocity(ck.velocity);
        Ok(Self { model: ck.model, train, params: ck.params, optimizer, next_epoch: ck.next_epoch })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: Some(self.train.clone()),
            next_epoch: self.next_epoch,
            params: self.params.clone(),
            velocity: self.optimizer.velocity().clone(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.next_epoch >= self.train.epochs
    }

    /// Loss of one batch; applies one SGD update at `lr`.
    pub fn step(&mut self, batch: &[Sample], lr: f64) -> Result<f64> {
        let (images, masks) = stack_batch(batch)?;
        let mut g = Graph::new();
        let x = g.constant(images);
        let trace = forward(&mut g, &self.params, &self.model, x)?;
        let loss = deep_supervision_loss(&mut g, &trace, &masks, self.train.dice_smooth)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric { stage: 0, what: "training loss" });
        }
        let grads = g.backward(loss).into_params();
        self.optimizer.step(&mut self.params, &grads, lr)?;
        Ok(value)
    }

    /// Run epoch `next_epoch` over `samples` and advance the counter.
    pub fn run_epoch(&mut self, samples: &[Sample], augment_data: bool) -> Result<EpochRecord> {
        if samples.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let epoch = self.next_epoch;
        let lr = poly_lr(epoch, &self.train)?;
        let mut rng = epoch_rng(self.model.seed, epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut iterations = 0;
        for chunk in order.chunks(self.train.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| if augment_data { augment(&samples[i], &mut rng) } else { samples[i].clone() })
                .collect();
            total += self.step(&batch, lr)?;
            iterations += 1;
        }
        self.next_epoch += 1;
        let loss = total / iterations as f64;
        log::info!("epoch {epoch}: lr {lr:.6e} loss {loss:.6}");
        Ok(EpochRecord { epoch, lr, loss, iterations, val_dice: None })
    }
}
