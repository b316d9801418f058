use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::softmax_cross_entropy;
use super::network::{argmax, Network, Tape};
use super::optim::Adam;
use super::spec::GatePlan;
use super::tensor::Tensor3;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1500,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(1e-6..=1e-3).contains(&self.learning_rate) {
            return Err(Error::invalid(format!(
                "learning rate {} is outside [1e-6, 1e-3]",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy over the epoch's training batches, in training mode.
    pub accuracy: f64,
}

/// Owns a network, its optimizer and the epoch counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub(crate) net: Network,
    pub(crate) opt: Adam,
    pub(crate) config: TrainConfig,
    pub(crate) epoch: usize,
}

impl Trainer {
    pub fn new(net: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = Adam::new(config.learning_rate, net.param_count());
        Ok(Self {
            net,
            opt,
            config,
            epoch: 0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Number of completed epochs.
    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let seed = self.config.seed ^ (self.epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One pass over the training set in shuffled mini-batches.
    /// `on_last_batch` sees the tape of the epoch's final batch before the
    /// parameter update.
    pub fn run_epoch(
        &mut self,
        x: &Tensor3,
        labels: &[usize],
        mut on_last_batch: impl FnMut(&Tape),
    ) -> Result<EpochStats> {
        if x.batch() != labels.len() || labels.is_empty() {
            return Err(Error::invalid("training inputs and labels differ in length"));
        }
        let order = self.epoch_order(labels.len());
        let batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for (b, idx) in batches.iter().enumerate() {
            let xb = x.select(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (logits, tape) = self.net.forward_train(&xb)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &yb, self.net.spec().classes);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch,
                    batch: b,
                    loss,
                });
            }
            hits += logits
                .chunks(self.net.spec().classes)
                .zip(&yb)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
            loss_sum += loss * idx.len() as f64;
            if b + 1 == batches.len() {
                on_last_batch(&tape);
            }
            let grads = self.net.backward(&tape, &dlogits);
            self.opt.step(self.net.params_mut(), &grads);
        }
        let stats = EpochStats {
            epoch: self.epoch,
            loss: loss_sum / labels.len() as f64,
            accuracy: hits as f64 / labels.len() as f64,
        };
        self.epoch += 1;
        Ok(stats)
    }

    /// Runs epochs until `total` have been completed.
    pub fn train_until(&mut self, x: &Tensor3, labels: &[usize], total: usize) -> Result<Vec<EpochStats>> {
        let mut history = Vec::new();
        while self.epoch < total {
            history.push(self.run_epoch(x, labels, |_| {})?);
        }
        Ok(history)
    }

    /// Swaps in the network for `plan`, carrying over preserved parameters
    /// and their Adam moments. A plan identical to the current one is a
    /// no-op.
    pub fn apply_plan(&mut self, plan: GatePlan, init_seed: u64) -> Result<()> {
        if &plan == self.net.plan() {
            return Ok(());
        }
        let (net, copied) = self.net.regulated(plan, init_seed)?;
        self.opt = self.opt.remap(&copied, net.param_count());
        self.net = net;
        Ok(())
    }
}
