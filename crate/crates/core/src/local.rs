//! One client's share of a federation round.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FlError, Result};
use crate::model::{loss_grad_correct, Batch, ModelSpec};
use crate::tensor::ParameterSet;

/// Client-side SGD settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 64,
            local_epochs: 1,
        }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FlError::config("lr", format!("must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FlError::config(
                "momentum",
                format!("must be in [0, 1), got {}", self.momentum),
            ));
        }
        if self.batch_size == 0 {
            return Err(FlError::config("batch_size", "must be >= 1"));
        }
        if self.local_epochs == 0 {
            return Err(FlError::config("local_epochs", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// `(global - local_final) / lr`.
    pub pseudo_gradient: ParameterSet,
    pub num_samples: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
}

/// Mixes `(seed, round, client)` into one RNG seed (splitmix64 finalizer).
pub fn client_round_seed(seed: u64, round: usize, client_id: usize) -> u64 {
    let mut z = seed
        ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (client_id as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs shuffled mini-batch SGD with momentum from `global_params`.
///
/// The velocity starts at zero. The pseudo-gradient is accumulated as the sum
/// of applied velocities, which equals `(global - local_final) / lr` without
/// the cancellation error of differencing the two weight vectors.
pub fn train_local(
    client_id: usize,
    global_params: &ParameterSet,
    spec: &ModelSpec,
    shard: &Dataset,
    cfg: &LocalConfig,
    seed: u64,
) -> Result<ClientUpdate> {
    if shard.is_empty() {
        return Err(FlError::EmptyInput(format!("client {client_id} has an empty shard")));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = global_params.clone();
    let mut velocity = global_params.zeros_like();
    let mut displacement = global_params.zeros_like();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let dim = shard.dim();
    let mut feats = Vec::with_capacity(cfg.batch_size.min(shard.len()) * dim);
    let mut labels = Vec::with_capacity(cfg.batch_size.min(shard.len()));

    let mut epoch_loss = 0.0;
    let mut epoch_correct = 0;
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        epoch_loss = 0.0;
        epoch_correct = 0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            feats.clear();
            labels.clear();
            for &i in chunk {
                feats.extend_from_slice(shard.row(i));
                labels.push(shard.labels()[i]);
            }
            let (loss, grad, correct) = loss_grad_correct(&params, spec, Batch::new(&feats, &labels))?;
            epoch_loss += loss;
            epoch_correct += correct;
            batches += 1;

            if cfg.momentum == 0.0 {
                velocity = grad;
            } else {
                for (v, g) in velocity.layers_mut().iter_mut().zip(grad.layers()) {
                    for (vi, &gi) in v.values.iter_mut().zip(&g.values) {
                        *vi = cfg.momentum * *vi + gi;
                    }
                }
            }
            params.add_scaled(-cfg.lr, &velocity)?;
            displacement.add_scaled(1.0, &velocity)?;
        }
        epoch_loss /= batches as f64;
    }
    if !epoch_loss.is_finite() || !displacement.is_finite() {
        return Err(FlError::InvalidArgument(format!(
            "client {client_id} diverged during local training"
        )));
    }

    Ok(ClientUpdate {
        client_id,
        pseudo_gradient: displacement,
        num_samples: shard.len(),
        train_loss: epoch_loss,
        train_accuracy: epoch_correct as f64 / shard.len() as f64,
    })
}
