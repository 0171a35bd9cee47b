//! The attack model: a `k → h1 → h2 → 1` perceptron with rectifier hidden
//! units and a logistic output, trained by mini-batch gradient descent on
//! mean binary cross-entropy.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Membership, Origin, Standardizer, UserFeature};
use crate::seeding::{derive_seed, rng_from_seed, shuffle, StageRng};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("attack training needs at least one member and one non-member sample")]
    SingleClass,
    #[error("feature has length {found}, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("feature for user {0} has non-finite entries")]
    NonFiniteFeature(crate::dataset::UserId),
    #[error("attack training received a target-side sample (user {0})")]
    TargetSample(crate::dataset::UserId),
    #[error("attack training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("malformed network: {0}")]
    Malformed(String),
    #[error("failed to write model dump: {0}")]
    Dump(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackTrainConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AttackTrainConfig {
    fn default() -> Self {
        Self {
            hidden1: 32,
            hidden2: 16,
            learning_rate: 0.01,
            epochs: 200,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl AttackTrainConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.hidden1 < 1 || self.hidden2 < 1 || self.batch_size < 1 {
            return Err(AttackError::InvalidConfig(
                "hidden1, hidden2 and batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AttackError::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Fully connected layer, weights stored row-major as `[outputs][inputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    // Glorot-uniform weights, zero biases.
    fn glorot(inputs: usize, outputs: usize, rng: &mut StageRng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| rng.gen_range(-limit..=limit))
                .collect(),
            biases: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.biases)
                .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()),
        );
    }

    fn num_parameters(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// Layer stack without the input transform. Every layer but the last is
/// followed by a rectifier; the last layer has one output, the logit.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Dense>,
}

impl Network {
    pub fn new(layers: Vec<Dense>) -> Result<Self, AttackError> {
        if layers.is_empty() {
            return Err(AttackError::Malformed("no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(AttackError::Malformed(format!(
                    "layer emits {} values but next expects {}",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        for l in &layers {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(AttackError::Malformed(
                    "parameter count does not match shape".into(),
                ));
            }
        }
        if layers.last().is_some_and(|l| l.outputs != 1) {
            return Err(AttackError::Malformed(
                "output layer must have one unit".into(),
            ));
        }
        Ok(Self { layers })
    }

    fn initialize(dims: &[usize], rng: &mut StageRng) -> Self {
        Self {
            layers: dims
                .windows(2)
                .map(|w| Dense::glorot(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(Dense::num_parameters).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend(&l.weights);
            out.extend(&l.biases);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_parameters(), "parameter count");
        let mut rest = params;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.weights.len());
            let (b, r) = r.split_at(l.biases.len());
            l.weights.copy_from_slice(w);
            l.biases.copy_from_slice(b);
            rest = r;
        }
    }

    /// `θ ← θ − lr·grad` with `grad` in [`Network::parameters`] order.
    pub fn descend(&mut self, grad: &[f64], lr: f64) {
        assert_eq!(grad.len(), self.num_parameters(), "gradient length");
        let mut g = grad.iter();
        for l in &mut self.layers {
            for (p, d) in l.weights.iter_mut().chain(l.biases.iter_mut()).zip(&mut g) {
                *p -= lr * d;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|x| x.is_finite()))
    }

    // Pre-activations of every layer for one input.
    fn forward_cached(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(l.outputs);
            l.forward(&act, &mut z);
            if i + 1 < self.layers.len() {
                act = z.iter().map(|v| v.max(0.0)).collect();
            }
            pre.push(z);
        }
        pre
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        let mut act = x.to_vec();
        let mut z = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.forward(&act, &mut z);
            if i + 1 < self.layers.len() {
                act.clear();
                act.extend(z.iter().map(|v| v.max(0.0)));
            }
        }
        z[0]
    }

    /// Mean cross-entropy over the batch and its gradient, flattened in the
    /// same order as [`Network::parameters`].
    pub fn loss_and_gradient(&self, inputs: &[&[f64]], targets: &[f64]) -> (f64, Vec<f64>) {
        let n = inputs.len().max(1) as f64;
        let mut grads: Vec<Dense> = self
            .layers
            .iter()
            .map(|l| Dense::zeros(l.inputs, l.outputs))
            .collect();
        let mut loss = 0.0;

        for (x, &y) in inputs.iter().zip(targets) {
            let pre = self.forward_cached(x);
            let z = pre[pre.len() - 1][0];
            loss += logistic_loss(z, y);

            let mut delta = vec![sigmoid(z) - y];
            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let relu_in: Vec<f64>;
                let input: &[f64] = if li == 0 {
                    x
                } else {
                    relu_in = pre[li - 1].iter().map(|v| v.max(0.0)).collect();
                    &relu_in
                };
                let g = &mut grads[li];
                for (o, d) in delta.iter().enumerate() {
                    g.biases[o] += d;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, a) in row.iter_mut().zip(input) {
                        *gw += d * a;
                    }
                }
                if li > 0 {
                    let mut next = vec![0.0; layer.inputs];
                    for (o, d) in delta.iter().enumerate() {
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (nx, w) in next.iter_mut().zip(row) {
                            *nx += w * d;
                        }
                    }
                    for (nx, z) in next.iter_mut().zip(&pre[li - 1]) {
                        if *z <= 0.0 {
                            *nx = 0.0;
                        }
                    }
                    delta = next;
                }
            }
        }

        let mut flat = Vec::with_capacity(self.num_parameters());
        for g in &grads {
            flat.extend(g.weights.iter().map(|v| v / n));
            flat.extend(g.biases.iter().map(|v| v / n));
        }
        (loss / n, flat)
    }

    pub fn mean_loss(&self, inputs: &[&[f64]], targets: &[f64]) -> f64 {
        let n = inputs.len().max(1) as f64;
        inputs
            .iter()
            .zip(targets)
            .map(|(x, &y)| logistic_loss(self.logit(x), y))
            .sum::<f64>()
            / n
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(z)` against `y`, evaluated on the logit
/// as `max(z, 0) − z·y + ln(1 + e^−|z|)`.
pub fn logistic_loss(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Trained attack classifier: the fitted feature standardizer plus the
/// network it feeds.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub network: Network,
    pub standardizer: Standardizer,
}

#[derive(Serialize, Deserialize)]
struct MlpDump {
    shapes: Vec<[usize; 2]>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    standardizer: Standardizer,
}

impl MlpModel {
    pub fn new(network: Network, standardizer: Standardizer) -> Result<Self, AttackError> {
        if standardizer.dim() != network.input_dim() {
            return Err(AttackError::DimensionMismatch {
                expected: network.input_dim(),
                found: standardizer.dim(),
            });
        }
        Ok(Self {
            network,
            standardizer,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<(), AttackError> {
        let layers = self.network.layers();
        let dump = MlpDump {
            shapes: layers.iter().map(|l| [l.inputs, l.outputs]).collect(),
            weights: layers.iter().map(|l| l.weights.clone()).collect(),
            biases: layers.iter().map(|l| l.biases.clone()).collect(),
            standardizer: self.standardizer.clone(),
        };
        serde_json::to_writer_pretty(writer, &dump)?;
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, AttackError> {
        let dump: MlpDump = serde_json::from_str(s)?;
        if dump.shapes.len() != dump.weights.len() || dump.shapes.len() != dump.biases.len() {
            return Err(AttackError::Malformed(
                "layer arrays disagree in length".into(),
            ));
        }
        let layers = dump
            .shapes
            .iter()
            .zip(dump.weights)
            .zip(dump.biases)
            .map(|((s, weights), biases)| Dense {
                inputs: s[0],
                outputs: s[1],
                weights,
                biases,
            })
            .collect();
        Self::new(Network::new(layers)?, dump.standardizer)
    }
}

/// Membership probability for one raw (unstandardized) feature vector,
/// strictly inside (0, 1).
pub fn predict_membership(model: &MlpModel, feature: &[f64]) -> Result<f64, AttackError> {
    if feature.len() != model.input_dim() {
        return Err(AttackError::DimensionMismatch {
            expected: model.input_dim(),
            found: feature.len(),
        });
    }
    let z = model.network.logit(&model.standardizer.apply(feature));
    // 1 − 2⁻⁵³ is the largest f64 below one.
    Ok(sigmoid(z).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

fn target_of(label: Membership) -> f64 {
    if label.is_member() {
        1.0
    } else {
        0.0
    }
}

/// Fits the standardizer on `samples`, then trains a freshly initialized
/// network on the standardized features.
pub fn train_attack(
    samples: &[UserFeature],
    config: &AttackTrainConfig,
) -> Result<MlpModel, AttackError> {
    config.validate()?;
    let dim = samples
        .first()
        .ok_or(AttackError::SingleClass)?
        .vector
        .len();
    let mut has = [false; 2];
    for s in samples {
        if s.origin != Origin::Shadow {
            return Err(AttackError::TargetSample(s.user_id));
        }
        if s.vector.len() != dim {
            return Err(AttackError::DimensionMismatch {
                expected: dim,
                found: s.vector.len(),
            });
        }
        if !s.vector.iter().all(|x| x.is_finite()) {
            return Err(AttackError::NonFiniteFeature(s.user_id));
        }
        has[usize::from(s.label.is_member())] = true;
    }
    if !(has[0] && has[1]) {
        return Err(AttackError::SingleClass);
    }
    if dim == 0 {
        return Err(AttackError::DimensionMismatch {
            expected: 1,
            found: 0,
        });
    }

    let standardizer = Standardizer::fit(samples.iter().map(|s| s.vector.as_slice()));
    let xs: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| standardizer.apply(&s.vector))
        .collect();
    let ys: Vec<f64> = samples.iter().map(|s| target_of(s.label)).collect();

    let mut init_rng = rng_from_seed(derive_seed(config.seed, "attack-init"));
    let mut network = Network::initialize(&[dim, config.hidden1, config.hidden2, 1], &mut init_rng);
    let mut order_rng = rng_from_seed(derive_seed(config.seed, "attack-order"));
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut batch_x: Vec<&[f64]> = Vec::with_capacity(config.batch_size);
    let mut batch_y: Vec<f64> = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.epochs {
        shuffle(&mut order, &mut order_rng);
        for chunk in order.chunks(config.batch_size) {
            batch_x.clear();
            batch_y.clear();
            batch_x.extend(chunk.iter().map(|&i| xs[i].as_slice()));
            batch_y.extend(chunk.iter().map(|&i| ys[i]));
            let (loss, grad) = network.loss_and_gradient(&batch_x, &batch_y);
            if !loss.is_finite() {
                return Err(AttackError::Diverged { epoch });
            }
            network.descend(&grad, config.learning_rate);
        }
        if !network.all_finite() {
            return Err(AttackError::Diverged { epoch });
        }
        if log::log_enabled!(log::Level::Trace) {
            let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            log::trace!(
                "attack epoch {epoch}: loss {:.6}",
                network.mean_loss(&refs, &ys)
            );
        }
    }

    MlpModel::new(network, standardizer)
}

/// Mean cross-entropy of `model` over labelled raw features.
pub fn training_loss(model: &MlpModel, samples: &[UserFeature]) -> f64 {
    let xs: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| model.standardizer.apply(&s.vector))
        .collect();
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let ys: Vec<f64> = samples.iter().map(|s| target_of(s.label)).collect();
    model.network.mean_loss(&refs, &ys)
}
