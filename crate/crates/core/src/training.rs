use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SHUFFLE_SALT: u64 = 0x005e_ed5e_ed0f_f00d;
const AUX_SALT: u64 = 0xa0c5_e1ec;

/// Plain minibatch SGD schedule, plus the hidden widths of the network it
/// trains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 0,
            hidden: vec![32],
        }
    }
}

impl TrainConfig {
    /// `learning_rate = 0` is accepted so that callers can check that a
    /// training run leaves parameters untouched.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning_rate must be finite and non-negative",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        Ok(())
    }

    /// RNG for the primary network's initial weights.
    pub fn init_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// RNG for a secondary network trained alongside the primary one.
    pub fn aux_init_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ AUX_SALT)
    }

    fn shuffle_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ SHUFFLE_SALT)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss seen during each epoch (before each step's update).
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Runs `epochs` passes over `n` items in shuffled minibatches. `step` receives
/// the batch indices, applies its update and returns the summed loss of the
/// batch.
pub(crate) fn sgd_epochs<F>(n: usize, cfg: &TrainConfig, mut step: F) -> Result<Vec<f64>>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    let mut rng = cfg.shuffle_rng();
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            total += step(batch)?;
        }
        losses.push(total / n as f64);
    }
    Ok(losses)
}
