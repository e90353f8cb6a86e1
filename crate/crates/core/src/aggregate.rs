//! Server-side aggregation strategies.
//!
//! Every strategy turns one round of [`ClientUpdate`]s into a global update
//! `G` expressed in pseudo-gradient units; the orchestrator applies it to the
//! global weights. Updates are sorted by `client_id` before any reduction, so
//! the result does not depend on the order clients finished in.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlError, Result};
use crate::local::ClientUpdate;
use crate::tensor::{self, cross_client_softmax, elementwise_weighted_sum, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    FedAvg,
    FedOpt,
    FedAms,
    Ewwa,
    FedAdp,
    FedBoosting,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::FedAvg,
        Strategy::FedOpt,
        Strategy::FedAms,
        Strategy::Ewwa,
        Strategy::FedAdp,
        Strategy::FedBoosting,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedOpt => "fedopt",
            Strategy::FedAms => "fedams",
            Strategy::Ewwa => "ewwa",
            Strategy::FedAdp => "fedadp",
            Strategy::FedBoosting => "fedboosting",
        }
    }

    /// Whether the `variant` setting changes this strategy's behavior.
    pub fn uses_variant(self) -> bool {
        matches!(self, Strategy::FedOpt | Strategy::Ewwa)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

/// Second-moment rule shared by the adaptive strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Adam,
    Adagrad,
    Yogi,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Adam => "adam",
            Variant::Adagrad => "adagrad",
            Variant::Yogi => "yogi",
        }
    }

    /// Next second moment from the previous value `v` and gradient `g`.
    pub fn second_moment(self, v: f64, g: f64, beta2: f64) -> f64 {
        let g2 = g * g;
        match self {
            Variant::Adam => beta2 * v + (1.0 - beta2) * g2,
            Variant::Adagrad => v + g2,
            Variant::Yogi => beta2 * v + (1.0 - beta2) * g2 * sign(v - g2),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [Variant::Adam, Variant::Adagrad, Variant::Yogi]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

/// `sign` with `sign(0) = 0`.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Denominator root. The Yogi rule can drive `v` negative, so the magnitude
/// is used; for Adam and Adagrad `v >= 0` and this is plain `sqrt`.
fn root(v: f64) -> f64 {
    v.abs().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub strategy: Strategy,
    pub variant: Variant,
    /// η₀ for fedopt/fedams, α in the ewwa contribution.
    pub server_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub adp_alpha: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            strategy: Strategy::Ewwa,
            variant: Variant::Adam,
            server_lr: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            adp_alpha: 5.0,
        }
    }
}

impl AggregatorConfig {
    pub fn new(strategy: Strategy, variant: Variant) -> Self {
        AggregatorConfig {
            strategy,
            variant,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(FlError::config(key, format!("must be > 0, got {x}")))
            }
        };
        positive("server_lr", self.server_lr)?;
        positive("epsilon", self.epsilon)?;
        positive("adp_alpha", self.adp_alpha)?;
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(FlError::config(key, format!("must be in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    /// `η_r = η₀ · sqrt(1 - β₂^r) / (1 - β₁^r)`.
    pub fn adaptive_lr(&self, round: usize) -> f64 {
        let r = round as i32;
        self.server_lr * (1.0 - self.beta2.powi(r)).sqrt() / (1.0 - self.beta1.powi(r))
    }
}

/// Server state carried between rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorState {
    /// Number of completed aggregations.
    pub round: usize,
    pub m: ParameterSet,
    pub v: ParameterSet,
    pub v_max: ParameterSet,
    /// FedAdp running-mean angles, indexed by ascending client id.
    pub smoothed_angles: Vec<f64>,
    /// FedAdp angles observed in the latest round.
    pub last_angles: Vec<f64>,
    pub warnings: Vec<String>,
}

impl AggregatorState {
    pub fn new(template: &ParameterSet) -> Self {
        let zeros = template.zeros_like();
        AggregatorState {
            round: 0,
            m: zeros.clone(),
            v: zeros.clone(),
            v_max: zeros,
            smoothed_angles: Vec::new(),
            last_angles: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

fn sorted_updates(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    if updates.is_empty() {
        return Err(FlError::EmptyFederation);
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(FlError::InvalidArgument(format!(
                "duplicate update from client {}",
                pair[0].client_id
            )));
        }
        pair[0].pseudo_gradient.check_same_structure(&pair[1].pseudo_gradient)?;
    }
    Ok(sorted)
}

fn gradients(sorted: &[&ClientUpdate]) -> Vec<ParameterSet> {
    sorted.iter().map(|u| u.pseudo_gradient.clone()).collect()
}

/// Sample-count weighted mean of pseudo-gradients.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ParameterSet> {
    let sorted = sorted_updates(updates)?;
    let total: usize = sorted.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(FlError::InvalidArgument("client updates report zero samples".into()));
    }
    let weights: Vec<f64> = sorted.iter().map(|u| u.num_samples as f64 / total as f64).collect();
    tensor::weighted_sum(&weights, &gradients(&sorted))
}

/// Uniform mean of pseudo-gradients, the reference direction for FedAdp and
/// the input to the FedOpt server optimizer.
pub fn uniform_mean_gradient(updates: &[ClientUpdate]) -> Result<ParameterSet> {
    let sorted = sorted_updates(updates)?;
    tensor::mean(&gradients(&sorted))
}

fn check_state(state: &AggregatorState, like: &ParameterSet) -> Result<()> {
    state.m.check_same_structure(like)?;
    state.v.check_same_structure(like)?;
    state.v_max.check_same_structure(like)
}

/// Adaptive server optimizer on the averaged pseudo-gradient.
pub fn fedopt_aggregate(
    updates: &[ClientUpdate],
    state: &mut AggregatorState,
    cfg: &AggregatorConfig,
) -> Result<ParameterSet> {
    server_optimizer_step(updates, state, cfg, cfg.variant, false)
}

/// FedAdam with a running element-wise maximum of `v` in the denominator.
pub fn fedams_aggregate(
    updates: &[ClientUpdate],
    state: &mut AggregatorState,
    cfg: &AggregatorConfig,
) -> Result<ParameterSet> {
    server_optimizer_step(updates, state, cfg, Variant::Adam, true)
}

fn server_optimizer_step(
    updates: &[ClientUpdate],
    state: &mut AggregatorState,
    cfg: &AggregatorConfig,
    variant: Variant,
    max_stabilized: bool,
) -> Result<ParameterSet> {
    let mean_grad = uniform_mean_gradient(updates)?;
    check_state(state, &mean_grad)?;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let round = state.round + 1;
    let m = state.m.zip_map(&mean_grad, |m, g| b1 * m + (1.0 - b1) * g)?;
    let v = state.v.zip_map(&mean_grad, |v, g| variant.second_moment(v, g, b2))?;
    let v_max = if max_stabilized {
        state.v_max.zip_map(&v, f64::max)?
    } else {
        state.v_max.clone()
    };
    let eta = cfg.adaptive_lr(round);
    let eps = cfg.epsilon;
    let denom_source = if max_stabilized { &v_max } else { &v };
    let update = m.zip_map(denom_source, |m, v| eta * m / (root(v) + eps))?;

    state.round = round;
    state.m = m;
    state.v = v;
    state.v_max = v_max;
    Ok(update)
}

/// Everything one element-wise round computes before touching state.
#[derive(Debug, Clone)]
pub struct EwwaRound {
    /// Per-client element-wise proportions, ascending client id.
    pub proportions: Vec<ParameterSet>,
    /// Per-client contributions `b` fed to the softmax.
    pub contributions: Vec<ParameterSet>,
    pub update: ParameterSet,
    pub next_m: ParameterSet,
    pub next_v: ParameterSet,
}

/// Computes an element-wise aggregation round without mutating `state`.
pub fn ewwa_round(updates: &[ClientUpdate], state: &AggregatorState, cfg: &AggregatorConfig) -> Result<EwwaRound> {
    let sorted = sorted_updates(updates)?;
    check_state(state, &sorted[0].pseudo_gradient)?;
    let round = state.round + 1;
    let (b1, b2, eps, alpha) = (cfg.beta1, cfg.beta2, cfg.epsilon, cfg.server_lr);
    let bc1 = 1.0 - b1.powi(round as i32);
    let bc2 = 1.0 - b2.powi(round as i32);
    let variant = cfg.variant;

    // (m_c, v_c, b_c) for each client, all derived from the shared state.
    let per_client: Vec<(ParameterSet, ParameterSet, ParameterSet)> = sorted
        .par_iter()
        .map(|u| {
            let g = &u.pseudo_gradient;
            let m = state.m.zip_map(g, |m, g| b1 * m + (1.0 - b1) * g)?;
            let v = state.v.zip_map(g, |v, g| variant.second_moment(v, g, b2))?;
            let b = m.zip_map(&v, |m, v| alpha * (m / bc1) / (root(v / bc2) + eps))?;
            Ok((m, v, b))
        })
        .collect::<Result<_>>()?;

    let mut ms = Vec::with_capacity(per_client.len());
    let mut vs = Vec::with_capacity(per_client.len());
    let mut contributions = Vec::with_capacity(per_client.len());
    for (m, v, b) in per_client {
        ms.push(m);
        vs.push(v);
        contributions.push(b);
    }
    let proportions = cross_client_softmax(&contributions)?;
    let update = elementwise_weighted_sum(&proportions, &gradients(&sorted))?;
    Ok(EwwaRound {
        proportions,
        contributions,
        update,
        next_m: tensor::mean(&ms)?,
        next_v: tensor::mean(&vs)?,
    })
}

/// Element-wise adaptive aggregation; the shared moments advance to the
/// uniform mean of the per-client moments.
pub fn ewwa_aggregate(
    updates: &[ClientUpdate],
    state: &mut AggregatorState,
    cfg: &AggregatorConfig,
) -> Result<ParameterSet> {
    let EwwaRound {
        update, next_m, next_v, ..
    } = ewwa_round(updates, state, cfg)?;
    state.round += 1;
    state.m = next_m;
    state.v = next_v;
    Ok(update)
}

/// Softmax over a plain slice, max-subtracted.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `α(1 - exp(-exp(α(1 - θ̂))))`.
pub fn gompertz_contribution(alpha: f64, smoothed_angle: f64) -> f64 {
    alpha * (1.0 - (-(alpha * (1.0 - smoothed_angle)).exp()).exp())
}

/// Angle between two parameter sets, or `None` if either has zero norm.
pub fn gradient_angle(reference: &ParameterSet, g: &ParameterSet) -> Result<Option<f64>> {
    let dot = tensor::flat_inner_product(reference, g)?;
    let norms = reference.l2_norm() * g.l2_norm();
    if norms == 0.0 || !norms.is_finite() {
        return Ok(None);
    }
    Ok(Some((dot / norms).clamp(-1.0, 1.0).acos()))
}

/// Model-level weighting by smoothed angle to the round's mean gradient.
pub fn fedadp_aggregate(
    updates: &[ClientUpdate],
    state: &mut AggregatorState,
    cfg: &AggregatorConfig,
    global_mean_grad: &ParameterSet,
) -> Result<ParameterSet> {
    let sorted = sorted_updates(updates)?;
    global_mean_grad.check_same_structure(&sorted[0].pseudo_gradient)?;
    let c = sorted.len();
    if !state.smoothed_angles.is_empty() && state.smoothed_angles.len() != c {
        return Err(FlError::structure(
            "smoothed_angles",
            format!("state tracks {} clients, round has {c}", state.smoothed_angles.len()),
        ));
    }
    let round = state.round + 1;
    let mut angles = Vec::with_capacity(c);
    for u in &sorted {
        let theta = match gradient_angle(global_mean_grad, &u.pseudo_gradient)? {
            Some(t) => t,
            None => {
                let msg = format!(
                    "round {round}: client {} has a zero-norm gradient; angle set to pi/2",
                    u.client_id
                );
                log::warn!("{msg}");
                state.warnings.push(msg);
                FRAC_PI_2
            }
        };
        angles.push(theta);
    }
    let smoothed: Vec<f64> = if round == 1 || state.smoothed_angles.is_empty() {
        angles.clone()
    } else {
        let r = round as f64;
        state
            .smoothed_angles
            .iter()
            .zip(&angles)
            .map(|(&prev, &theta)| ((r - 1.0) * prev + theta) / r)
            .collect()
    };
    let scores: Vec<f64> = smoothed
        .iter()
        .map(|&t| gompertz_contribution(cfg.adp_alpha, t))
        .collect();
    let proportions = softmax(&scores);
    let update = tensor::weighted_sum(&proportions, &gradients(&sorted))?;

    state.round = round;
    state.smoothed_angles = smoothed;
    state.last_angles = angles;
    Ok(update)
}

/// Per-client proportions `softmax(softmax(T)_i · Σ_{j≠i} V[i][j])`.
///
/// Row and column `i` of `cross_val`, and `train_metrics[i]`, refer to the
/// `i`-th client in ascending id order.
pub fn fedboosting_proportions(cross_val: &[Vec<f64>], train_metrics: &[f64]) -> Result<Vec<f64>> {
    let c = train_metrics.len();
    if c == 0 {
        return Err(FlError::EmptyFederation);
    }
    if cross_val.len() != c {
        return Err(FlError::structure(
            "cross_val",
            format!("{} rows for {c} clients", cross_val.len()),
        ));
    }
    if let Some((i, row)) = cross_val.iter().enumerate().find(|(_, r)| r.len() != c) {
        return Err(FlError::structure(
            "cross_val",
            format!("row {i} has {} columns, expected {c}", row.len()),
        ));
    }
    let s = softmax(train_metrics);
    let q: Vec<f64> = cross_val
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let off_diag: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &x)| x).sum();
            s[i] * off_diag
        })
        .collect();
    Ok(softmax(&q))
}

pub fn fedboosting_aggregate(
    updates: &[ClientUpdate],
    cross_val: &[Vec<f64>],
    train_metrics: &[f64],
) -> Result<ParameterSet> {
    let sorted = sorted_updates(updates)?;
    if train_metrics.len() != sorted.len() {
        return Err(FlError::structure(
            "train_metrics",
            format!("{} entries for {} clients", train_metrics.len(), sorted.len()),
        ));
    }
    let p = fedboosting_proportions(cross_val, train_metrics)?;
    tensor::weighted_sum(&p, &gradients(&sorted))
}

/// Extra per-round inputs some strategies need.
#[derive(Debug, Clone, Default)]
pub struct RoundContext {
    /// FedBoosting validation matrix, ascending client id order.
    pub cross_val: Option<Vec<Vec<f64>>>,
}

/// A strategy together with its persistent state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregator {
    pub config: AggregatorConfig,
    pub state: AggregatorState,
}

impl Aggregator {
    pub fn new(config: AggregatorConfig, template: &ParameterSet) -> Result<Self> {
        config.validate()?;
        Ok(Aggregator {
            config,
            state: AggregatorState::new(template),
        })
    }

    pub fn round(&self) -> usize {
        self.state.round
    }

    /// Produces this round's global update and advances the state.
    pub fn aggregate(&mut self, updates: &[ClientUpdate], ctx: &RoundContext) -> Result<ParameterSet> {
        let cfg = self.config;
        let state = &mut self.state;
        match cfg.strategy {
            Strategy::FedAvg => {
                let g = fedavg_aggregate(updates)?;
                state.round += 1;
                Ok(g)
            }
            Strategy::FedOpt => fedopt_aggregate(updates, state, &cfg),
            Strategy::FedAms => fedams_aggregate(updates, state, &cfg),
            Strategy::Ewwa => ewwa_aggregate(updates, state, &cfg),
            Strategy::FedAdp => {
                let reference = uniform_mean_gradient(updates)?;
                fedadp_aggregate(updates, state, &cfg, &reference)
            }
            Strategy::FedBoosting => {
                let cross_val = ctx
                    .cross_val
                    .as_ref()
                    .ok_or_else(|| FlError::InvalidArgument("fedboosting needs a cross-validation matrix".into()))?;
                let sorted = sorted_updates(updates)?;
                let train: Vec<f64> = sorted.iter().map(|u| u.train_accuracy).collect();
                let g = fedboosting_aggregate(updates, cross_val, &train)?;
                state.round += 1;
                Ok(g)
            }
        }
    }
}
