//! The federation round loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{Aggregator, AggregatorConfig, AggregatorState, RoundContext, Strategy};
use crate::data::{self, Dataset, Partition};
use crate::error::{FlError, Result};
use crate::local::{client_round_seed, train_local, ClientUpdate, LocalConfig};
use crate::model::{self, Activation, ModelKind, ModelSpec};
use crate::tensor::ParameterSet;

/// Fraction of the pooled data kept for training; the rest stays on the server.
pub const TRAIN_RATIO: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Mlp,
            hidden_dim: 64,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn spec_for(&self, data: &Dataset) -> ModelSpec {
        ModelSpec {
            kind: self.kind,
            input_dim: data.dim(),
            hidden_dim: self.hidden_dim,
            num_classes: data.num_classes(),
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PartitionScheme {
    Iid,
    LabelSkew { concentration: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Synth {
        num_classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth {
            num_classes: 10,
            per_class: 600,
            dim: 20,
            spread: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub model: ModelConfig,
    pub local: LocalConfig,
    pub aggregator: AggregatorConfig,
    pub partition: PartitionScheme,
    pub data_source: DataSource,
    /// Keep at most this many pooled samples (seeded subset); `None` keeps all.
    pub max_samples: Option<usize>,
    pub seed: u64,
    /// η_g in `ω_r = ω_{r-1} - η_g · lr · G_r`.
    pub global_step_scale: f64,
    /// Write a checkpoint every this many rounds; `None` disables it.
    pub checkpoint_every: Option<usize>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            num_clients: 3,
            rounds: 500,
            model: ModelConfig::default(),
            local: LocalConfig::default(),
            aggregator: AggregatorConfig::default(),
            partition: PartitionScheme::Iid,
            data_source: DataSource::default(),
            max_samples: None,
            seed: 0,
            global_step_scale: 1.0,
            checkpoint_every: None,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(FlError::config("num_clients", "must be >= 1"));
        }
        if self.rounds == 0 {
            return Err(FlError::config("rounds", "must be >= 1"));
        }
        if self.model.kind == ModelKind::Mlp && self.model.hidden_dim == 0 {
            return Err(FlError::config("hidden_dim", "must be >= 1"));
        }
        self.local.validate()?;
        self.aggregator.validate()?;
        if let PartitionScheme::LabelSkew { concentration } = self.partition {
            if !(concentration > 0.0 && concentration.is_finite()) {
                return Err(FlError::config(
                    "concentration",
                    format!("must be > 0, got {concentration}"),
                ));
            }
        }
        if let DataSource::Synth {
            num_classes,
            per_class,
            dim,
            spread,
        } = self.data_source
        {
            if num_classes < 2 {
                return Err(FlError::config("synth_classes", "must be >= 2"));
            }
            if per_class == 0 {
                return Err(FlError::config("synth_per_class", "must be >= 1"));
            }
            if dim == 0 {
                return Err(FlError::config("synth_dim", "must be >= 1"));
            }
            if !(spread > 0.0 && spread.is_finite()) {
                return Err(FlError::config("synth_spread", format!("must be > 0, got {spread}")));
            }
        }
        if self.max_samples == Some(0) {
            return Err(FlError::config("max_samples", "must be >= 1 when set"));
        }
        if !(self.global_step_scale > 0.0 && self.global_step_scale.is_finite()) {
            return Err(FlError::config(
                "global_step_scale",
                format!("must be > 0, got {}", self.global_step_scale),
            ));
        }
        if self.checkpoint_every == Some(0) {
            return Err(FlError::config("checkpoint_every", "must be >= 1 when set"));
        }
        Ok(())
    }
}

/// Independent RNG streams derived from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    client_round_seed(seed ^ 0x5EED_0000_0000_0000, 0, stream as usize + 1)
}

const STREAM_DATA: u64 = 1;
const STREAM_SUBSET: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_PARTITION: u64 = 4;
const STREAM_INIT: u64 = 5;

pub fn load_source(cfg: &FederationConfig) -> Result<Dataset> {
    let pooled = match &cfg.data_source {
        DataSource::Idx { images, labels } => data::load_idx(images, labels)?,
        DataSource::Synth {
            num_classes,
            per_class,
            dim,
            spread,
        } => data::synth_blobs(
            *num_classes,
            *per_class,
            *dim,
            *spread,
            derive_seed(cfg.seed, STREAM_DATA),
        )?,
    };
    match cfg.max_samples {
        Some(k) if k < pooled.len() => {
            let mut idx: Vec<usize> = (0..pooled.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SUBSET)));
            idx.truncate(k);
            idx.sort_unstable();
            pooled.subset(&idx)
        }
        _ => Ok(pooled),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub global_test_accuracy: f64,
    pub global_test_loss: f64,
    pub mean_local_train_loss: f64,
    pub per_client_train_loss: Vec<f64>,
    /// Wall time is kept out of the metrics stream so reruns stay byte-identical.
    #[serde(skip, default)]
    pub wall_ms: u64,
}

/// `ω - scale · G`.
pub fn apply_global_update(weights: &ParameterSet, update: &ParameterSet, scale: f64) -> Result<ParameterSet> {
    weights.zip_map(update, |w, g| w - scale * g)
}

/// Resumable snapshot of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub round: usize,
    pub params: ParameterSet,
    pub state: AggregatorState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| FlError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FlError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| FlError::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// A configured federation: data already split and partitioned, model
/// initialized, aggregator ready.
#[derive(Debug, Clone)]
pub struct Federation {
    cfg: FederationConfig,
    spec: ModelSpec,
    train: Dataset,
    test: Dataset,
    partition: Partition,
    shards: Vec<Dataset>,
    params: ParameterSet,
    aggregator: Aggregator,
}

impl Federation {
    pub fn new(cfg: FederationConfig) -> Result<Self> {
        cfg.validate()?;
        let pooled = load_source(&cfg)?;
        let (train, test) = data::split_train_test(&pooled, TRAIN_RATIO, derive_seed(cfg.seed, STREAM_SPLIT))?;
        Federation::from_split(cfg, train, test)
    }

    /// Builds a federation over an explicit train/test split.
    pub fn from_split(cfg: FederationConfig, train: Dataset, test: Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.dim() != test.dim() || train.num_classes() != test.num_classes() {
            return Err(FlError::InvalidArgument("train and test sets disagree on shape".into()));
        }
        let pseed = derive_seed(cfg.seed, STREAM_PARTITION);
        let partition = match cfg.partition {
            PartitionScheme::Iid => data::partition_iid(&train, cfg.num_clients, pseed)?,
            PartitionScheme::LabelSkew { concentration } => {
                data::partition_label_skew(&train, cfg.num_clients, concentration, pseed)?
            }
        };
        let shards = partition.materialize(&train)?;
        let spec = cfg.model.spec_for(&train);
        let params = model::init_params(&spec, derive_seed(cfg.seed, STREAM_INIT))?;
        let aggregator = Aggregator::new(cfg.aggregator, &params)?;
        Ok(Federation {
            cfg,
            spec,
            train,
            test,
            partition,
            shards,
            params,
            aggregator,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn shards(&self) -> &[Dataset] {
        &self.shards
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    /// Completed rounds.
    pub fn round(&self) -> usize {
        self.aggregator.round()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            round: self.round(),
            params: self.params.clone(),
            state: self.aggregator.state.clone(),
        }
    }

    pub fn restore(&mut self, ckpt: Checkpoint) -> Result<()> {
        ckpt.params.check_same_structure(&self.params)?;
        ckpt.state.m.check_same_structure(&self.params)?;
        if ckpt.round != ckpt.state.round {
            return Err(FlError::InvalidArgument(format!(
                "checkpoint round {} disagrees with aggregator round {}",
                ckpt.round, ckpt.state.round
            )));
        }
        self.params = ckpt.params;
        self.aggregator.state = ckpt.state;
        Ok(())
    }

    /// Trains every client from the current global weights for round `round`.
    pub fn client_updates(&self, round: usize) -> Result<Vec<ClientUpdate>> {
        let mut updates = self
            .shards
            .par_iter()
            .enumerate()
            .map(|(id, shard)| {
                train_local(
                    id,
                    &self.params,
                    &self.spec,
                    shard,
                    &self.cfg.local,
                    client_round_seed(self.cfg.seed, round, id),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        updates.sort_by_key(|u| u.client_id);
        Ok(updates)
    }

    /// `V[i][j]`: accuracy of client `i`'s local model on client `j`'s shard.
    fn cross_validation(&self, updates: &[ClientUpdate]) -> Result<Vec<Vec<f64>>> {
        let lr = self.cfg.local.lr;
        updates
            .par_iter()
            .map(|u| {
                let local = apply_global_update(&self.params, &u.pseudo_gradient, lr)?;
                self.shards
                    .iter()
                    .map(|s| Ok(model::evaluate(&local, &self.spec, s)?.accuracy))
                    .collect()
            })
            .collect()
    }

    fn try_step(&mut self, round: usize) -> Result<RoundRecord> {
        let start = Instant::now();
        let updates = self.client_updates(round)?;
        let ctx = if self.cfg.aggregator.strategy == Strategy::FedBoosting {
            RoundContext {
                cross_val: Some(self.cross_validation(&updates)?),
            }
        } else {
            RoundContext::default()
        };
        let global_update = self.aggregator.aggregate(&updates, &ctx)?;
        let scale = self.cfg.global_step_scale * self.cfg.local.lr;
        let next = apply_global_update(&self.params, &global_update, scale)?;
        if !next.is_finite() {
            return Err(FlError::InvalidArgument("global weights became non-finite".into()));
        }
        self.params = next;
        let eval = model::evaluate(&self.params, &self.spec, &self.test)?;
        let per_client: Vec<f64> = updates.iter().map(|u| u.train_loss).collect();
        Ok(RoundRecord {
            round,
            global_test_accuracy: eval.accuracy,
            global_test_loss: eval.mean_loss,
            mean_local_train_loss: per_client.iter().sum::<f64>() / per_client.len() as f64,
            per_client_train_loss: per_client,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// Runs one round, tagging any failure with the round number.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let round = self.round() + 1;
        let snapshot = (self.params.clone(), self.aggregator.state.clone());
        self.try_step(round).map_err(|e| {
            self.params = snapshot.0;
            self.aggregator.state = snapshot.1;
            FlError::Round {
                round,
                source: Box::new(e),
            }
        })
    }
}

/// Runs all configured rounds, calling `observe` after each one.
pub fn run_federation_with(
    cfg: FederationConfig,
    mut observe: impl FnMut(&Federation, &RoundRecord) -> Result<()>,
) -> Result<Vec<RoundRecord>> {
    let mut fed = Federation::new(cfg)?;
    let rounds = fed.cfg.rounds;
    let mut records = Vec::with_capacity(rounds);
    while fed.round() < rounds {
        let rec = fed.step()?;
        observe(&fed, &rec)?;
        records.push(rec);
    }
    Ok(records)
}

pub fn run_federation(cfg: FederationConfig) -> Result<Vec<RoundRecord>> {
    run_federation_with(cfg, |_, _| Ok(()))
}
