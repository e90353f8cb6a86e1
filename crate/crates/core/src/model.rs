//! Small classifiers with hand-written forward and backward passes.
//!
//! Both models end in a softmax over `num_classes` logits and are trained on
//! mean cross-entropy. Weight matrices are stored row-major as
//! `[out_dim, in_dim]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FlError, Result};
use crate::tensor::{Layer, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SoftmaxRegression,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Ignored by softmax regression.
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn softmax_regression(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::SoftmaxRegression,
            input_dim,
            hidden_dim: 1,
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize, activation: Activation) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dim,
            num_classes,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(FlError::InvalidArgument("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(FlError::InvalidArgument("num_classes must be at least 2".into()));
        }
        if self.kind == ModelKind::Mlp && self.hidden_dim == 0 {
            return Err(FlError::InvalidArgument("mlp hidden_dim must be positive".into()));
        }
        Ok(())
    }

    /// `(name, shape, fan_in, fan_out)` for every layer, sorted by name.
    fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (d, h, k) = (self.input_dim, self.hidden_dim, self.num_classes);
        match self.kind {
            ModelKind::SoftmaxRegression => vec![("linear.bias", vec![k]), ("linear.weight", vec![k, d])],
            ModelKind::Mlp => vec![
                ("fc1.bias", vec![h]),
                ("fc1.weight", vec![h, d]),
                ("fc2.bias", vec![k]),
                ("fc2.weight", vec![k, h]),
            ],
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    fn check_params(&self, params: &ParameterSet) -> Result<()> {
        let layout = self.layout();
        for (i, (name, shape)) in layout.iter().enumerate() {
            match params.layers().get(i) {
                Some(l) if l.name == *name && l.shape == *shape => {}
                Some(l) => {
                    return Err(FlError::structure(
                        &l.name,
                        format!("expected layer `{name}` with shape {shape:?}"),
                    ))
                }
                None => return Err(FlError::structure(*name, "missing layer")),
            }
        }
        if params.layers().len() != layout.len() {
            return Err(FlError::structure(
                &params.layers()[layout.len()].name,
                "unexpected extra layer",
            ));
        }
        Ok(())
    }
}

/// A borrowed mini-batch: `labels.len()` rows of width `dim`.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a [f64],
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a [f64], labels: &'a [usize]) -> Self {
        Batch { features, labels }
    }

    pub fn from_dataset(data: &'a Dataset) -> Self {
        Batch::new(data.features(), data.labels())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParameterSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            if shape.len() == 1 {
                Layer::zeros(name, shape)
            } else {
                let (fan_out, fan_in) = (shape[0], shape[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let values = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
                Layer::new(name, shape, values)
            }
        })
        .collect();
    ParameterSet::new(layers)
}

fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
}

/// Lowest index among maximal entries.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn affine(weight: &[f64], bias: &[f64], input: &[f64], out: &mut [f64]) {
    let width = input.len();
    for (o, (row, &b)) in out.iter_mut().zip(weight.chunks_exact(width).zip(bias)) {
        *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
    }
}

/// Scratch buffers for one forward pass.
struct Forward {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    logp: Vec<f64>,
}

impl Forward {
    fn new(spec: &ModelSpec) -> Self {
        Forward {
            pre: vec![0.0; spec.hidden_dim],
            hidden: vec![0.0; spec.hidden_dim],
            logits: vec![0.0; spec.num_classes],
            logp: vec![0.0; spec.num_classes],
        }
    }

    fn run(&mut self, spec: &ModelSpec, params: &ParameterSet, x: &[f64]) {
        let l = params.layers();
        match spec.kind {
            ModelKind::SoftmaxRegression => affine(&l[1].values, &l[0].values, x, &mut self.logits),
            ModelKind::Mlp => {
                affine(&l[1].values, &l[0].values, x, &mut self.pre);
                for (a, &z) in self.hidden.iter_mut().zip(&self.pre) {
                    *a = spec.activation.apply(z);
                }
                affine(&l[3].values, &l[2].values, &self.hidden, &mut self.logits);
            }
        }
        log_softmax_into(&self.logits, &mut self.logp);
    }
}

fn check_batch(spec: &ModelSpec, batch: &Batch<'_>) -> Result<()> {
    if batch.is_empty() {
        return Err(FlError::EmptyInput("batch has no rows".into()));
    }
    if batch.features.len() != batch.len() * spec.input_dim {
        return Err(FlError::InvalidArgument(format!(
            "batch of {} rows has {} feature values, model expects width {}",
            batch.len(),
            batch.features.len(),
            spec.input_dim
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= spec.num_classes) {
        return Err(FlError::InvalidArgument(format!(
            "label {bad} outside 0..{}",
            spec.num_classes
        )));
    }
    Ok(())
}

/// Mean cross-entropy over the batch and its gradient.
pub fn loss_and_grad(params: &ParameterSet, spec: &ModelSpec, batch: Batch<'_>) -> Result<(f64, ParameterSet)> {
    let (loss, grad, _) = loss_grad_correct(params, spec, batch)?;
    Ok((loss, grad))
}

/// Like [`loss_and_grad`], also counting argmax-correct rows.
pub(crate) fn loss_grad_correct(
    params: &ParameterSet,
    spec: &ModelSpec,
    batch: Batch<'_>,
) -> Result<(f64, ParameterSet, usize)> {
    spec.check_params(params)?;
    check_batch(spec, &batch)?;
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let (d, h, k) = (spec.input_dim, spec.hidden_dim, spec.num_classes);
    let mut grad = params.zeros_like();
    let mut fwd = Forward::new(spec);
    let mut dlogits = vec![0.0; k];
    let mut dhidden = vec![0.0; h];
    let mut total = 0.0;
    let mut correct = 0;

    for (x, &y) in batch.features.chunks_exact(d).zip(batch.labels) {
        fwd.run(spec, params, x);
        total -= fwd.logp[y];
        if argmax(&fwd.logits) == y {
            correct += 1;
        }
        for (g, &lp) in dlogits.iter_mut().zip(&fwd.logp) {
            *g = lp.exp() * inv_n;
        }
        dlogits[y] -= inv_n;

        let (head_input, bias_idx, weight_idx): (&[f64], usize, usize) = match spec.kind {
            ModelKind::SoftmaxRegression => (x, 0, 1),
            ModelKind::Mlp => (&fwd.hidden, 2, 3),
        };
        let width = head_input.len();
        {
            let gl = grad.layers_mut();
            for (gb, &dz) in gl[bias_idx].values.iter_mut().zip(&dlogits) {
                *gb += dz;
            }
            for (row, &dz) in gl[weight_idx].values.chunks_exact_mut(width).zip(&dlogits) {
                for (gw, &a) in row.iter_mut().zip(head_input) {
                    *gw += dz * a;
                }
            }
        }

        if spec.kind == ModelKind::Mlp {
            let w2 = &params.layers()[3].values;
            dhidden.iter_mut().for_each(|v| *v = 0.0);
            for (row, &dz) in w2.chunks_exact(h).zip(&dlogits) {
                for (dh, &w) in dhidden.iter_mut().zip(row) {
                    *dh += dz * w;
                }
            }
            for ((dh, &z), &a) in dhidden.iter_mut().zip(&fwd.pre).zip(&fwd.hidden) {
                *dh *= spec.activation.derivative(z, a);
            }
            let gl = grad.layers_mut();
            for (gb, &dz) in gl[0].values.iter_mut().zip(&dhidden) {
                *gb += dz;
            }
            for (row, &dz) in gl[1].values.chunks_exact_mut(d).zip(&dhidden) {
                if dz != 0.0 {
                    for (gw, &xi) in row.iter_mut().zip(x) {
                        *gw += dz * xi;
                    }
                }
            }
        }
    }
    Ok((total * inv_n, grad, correct))
}

/// Evaluation result on a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

pub fn predict(params: &ParameterSet, spec: &ModelSpec, x: &[f64]) -> Result<usize> {
    spec.check_params(params)?;
    if x.len() != spec.input_dim {
        return Err(FlError::InvalidArgument(format!(
            "row width {} != input_dim {}",
            x.len(),
            spec.input_dim
        )));
    }
    let mut fwd = Forward::new(spec);
    fwd.run(spec, params, x);
    Ok(argmax(&fwd.logits))
}

/// Top-1 accuracy and mean cross-entropy; argmax ties go to the lowest class.
pub fn evaluate(params: &ParameterSet, spec: &ModelSpec, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(FlError::EmptyInput("evaluation dataset is empty".into()));
    }
    spec.check_params(params)?;
    let batch = Batch::from_dataset(data);
    check_batch(spec, &batch)?;
    let mut fwd = Forward::new(spec);
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (x, &y) in batch.features.chunks_exact(spec.input_dim).zip(batch.labels) {
        fwd.run(spec, params, x);
        loss -= fwd.logp[y];
        if argmax(&fwd.logits) == y {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
    })
}
