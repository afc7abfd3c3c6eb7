//! SGD with momentum and the two training schedules.
//!
//! * **Direct**: every minibatch takes one step on `XE - complement`, where
//!   the complement term is nothing (`xe`), complement entropy (`cot`) or
//!   hierarchical complement entropy (`hcot`).
//! * **Alternating**: every minibatch takes an ascent step on the complement
//!   term, then a fresh forward pass and a descent step on `XE`. The order
//!   is configurable. With `xe` the complement step is skipped.
//!
//! The update is `v <- momentum * v + grad + weight_decay * theta`,
//! `theta <- theta - lr * v`. The learning rate is divided by 10 at every
//! milestone epoch.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, Dataset};
use crate::hierarchy::LabelHierarchy;
use crate::network::{Network, NetworkError};
use crate::objectives::{
    self, EntropyOptions, LogitBatch, ObjectiveError, ObjectiveKind, ObjectiveResult,
};
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Direct,
    Alternating,
}

impl std::str::FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(Schedule::Direct),
            "alternating" => Ok(Schedule::Alternating),
            other => Err(format!(
                "unknown schedule `{other}` (expected direct or alternating)"
            )),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::Direct => "direct",
            Schedule::Alternating => "alternating",
        })
    }
}

/// Step order within one alternating iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlternatingOrder {
    #[default]
    ComplementFirst,
    XeFirst,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    #[serde(default)]
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Epochs at which the learning rate is divided by 10.
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    /// Shuffle seed; epoch `e` uses permutation seed `derive(seed, e)`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub entropy: EntropyOptions,
    #[serde(default)]
    pub alternating_order: AlternatingOrder,
    /// Learning-rate multiplier for the complement step of the alternating schedule.
    #[serde(default)]
    pub complement_lr_scale: Option<f64>,
    /// Random crop and flip of 32x32x3 inputs.
    #[serde(default)]
    pub augment: bool,
}

impl TrainConfig {
    /// The CIFAR-100 regime: momentum 0.9, weight decay 1e-4, lr 0.1 divided
    /// by 10 at epochs 100 and 150, 200 epochs of batch 128.
    pub fn cifar_default(objective: ObjectiveKind) -> Self {
        Self {
            objective,
            schedule: Schedule::Alternating,
            epochs: 200,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_milestones: vec![100, 150],
            seed: 0,
            entropy: EntropyOptions::default(),
            alternating_order: AlternatingOrder::ComplementFirst,
            complement_lr_scale: None,
            augment: true,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "lr_milestones must be strictly increasing, got {:?}",
                self.lr_milestones
            ));
        }
        if let Some(&last) = self.lr_milestones.last() {
            if last >= self.epochs {
                return bad(format!(
                    "milestone {last} is not before epoch count {}",
                    self.epochs
                ));
            }
        }
        if let Some(scale) = self.complement_lr_scale {
            if !(scale > 0.0 && scale.is_finite()) {
                return bad(format!("complement_lr_scale must be positive, got {scale}"));
            }
        }
        Ok(())
    }

    /// Learning rate for `epoch`: `lr / 10^(milestones <= epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        (0..drops).fold(self.lr, |lr, _| lr / 10.0)
    }
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<f64>,
}

impl OptimizerState {
    pub fn new(net: &Network) -> Self {
        Self {
            velocity: vec![0.0; net.parameter_count()],
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

/// One SGD-with-momentum update from the network's gradient buffer.
/// The gradient buffer is left as is.
pub fn sgd_step(
    net: &mut Network,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (params, grads) = net.params_and_grads_mut();
    assert_eq!(
        state.velocity.len(),
        params.len(),
        "optimizer state belongs to another network"
    );
    for ((theta, &g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *theta;
        *theta -= lr * *v;
    }
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    pub updates: usize,
    /// Mean of the loss that drove the updates (`xe - complement` for direct).
    pub loss: f64,
    pub xe: f64,
    /// Mean complement term. For `xe` runs it is measured but never trained on.
    pub complement: f64,
    /// Whether the complement term contributed to parameter updates.
    pub complement_in_updates: bool,
}

/// Runs one epoch with the configured schedule.
pub fn train_epoch(
    net: &mut Network,
    state: &mut OptimizerState,
    data: &Dataset,
    h: Option<&LabelHierarchy>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats, TrainError> {
    match cfg.schedule {
        Schedule::Direct => train_epoch_direct(net, state, data, h, cfg, epoch),
        Schedule::Alternating => train_epoch_alternating(net, state, data, h, cfg, epoch),
    }
}

/// Seeded permutation of `0..n` for `epoch`.
pub fn epoch_permutation(n: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(shuffle_seed, epoch as u64)));
    order
}

/// Inputs and fine labels of one minibatch.
type Batch = (Array2<f64>, Vec<usize>);

struct Minibatches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    augment_seed: Option<u64>,
    next: usize,
}

impl<'a> Minibatches<'a> {
    fn new(data: &'a Dataset, cfg: &TrainConfig, epoch: usize) -> Result<Self, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let epoch_seed = seed::derive(cfg.seed, epoch as u64);
        Ok(Self {
            data,
            order: epoch_permutation(data.len(), cfg.seed, epoch),
            batch_size: cfg.batch_size,
            augment_seed: cfg.augment.then(|| seed::derive(epoch_seed, seed::AUGMENT)),
            next: 0,
        })
    }

    fn next_batch(&mut self) -> Result<Option<Batch>, TrainError> {
        let start = self.next * self.batch_size;
        if start >= self.order.len() {
            return Ok(None);
        }
        let end = (start + self.batch_size).min(self.order.len());
        let (mut inputs, labels) = self.data.gather(&self.order[start..end]);
        if let Some(s) = self.augment_seed {
            data::augment_crop_flip(&mut inputs, seed::derive(s, self.next as u64))?;
        }
        self.next += 1;
        Ok(Some((inputs, labels)))
    }
}

/// Complement value for logging when the objective does not train on one.
fn audit_complement(
    batch: &LogitBatch<'_>,
    h: Option<&LabelHierarchy>,
    opts: EntropyOptions,
) -> Result<f64, ObjectiveError> {
    match h {
        Some(h) => objectives::hierarchical_complement_entropy(batch, h, opts).map(|r| r.value),
        None if batch.num_classes() >= 2 => {
            objectives::complement_entropy(batch, opts).map(|r| r.value)
        }
        None => Ok(0.0),
    }
}

fn check_hierarchy(cfg: &TrainConfig, h: Option<&LabelHierarchy>) -> Result<(), TrainError> {
    if cfg.objective == ObjectiveKind::Hcot && h.is_none() {
        return Err(ObjectiveError::MissingHierarchy(ObjectiveKind::Hcot).into());
    }
    Ok(())
}

fn finite(value: f64, what: &'static str, epoch: usize, batch: usize) -> Result<(), TrainError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite { what, epoch, batch })
    }
}

fn descend(
    net: &mut Network,
    state: &mut OptimizerState,
    cache: &crate::network::ForwardCache,
    loss: &ObjectiveResult,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    net.backward(cache, loss.grad.view())?;
    sgd_step(net, state, lr, cfg.momentum, cfg.weight_decay);
    Ok(())
}

fn finish(
    net: &Network,
    epoch: usize,
    lr: f64,
    batches: usize,
    updates: usize,
    sums: [f64; 3],
    complement_in_updates: bool,
) -> Result<EpochStats, TrainError> {
    if net.params().iter().any(|p| !p.is_finite()) {
        return Err(TrainError::NonFinite {
            what: "parameter",
            epoch,
            batch: batches.saturating_sub(1),
        });
    }
    let n = batches as f64;
    Ok(EpochStats {
        epoch,
        lr,
        batches,
        updates,
        loss: sums[0] / n,
        xe: sums[1] / n,
        complement: sums[2] / n,
        complement_in_updates,
    })
}

/// One step per minibatch on `XE - complement`.
pub fn train_epoch_direct(
    net: &mut Network,
    state: &mut OptimizerState,
    data: &Dataset,
    h: Option<&LabelHierarchy>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats, TrainError> {
    check_hierarchy(cfg, h)?;
    let lr = cfg.lr_at(epoch);
    let mut batches = Minibatches::new(data, cfg, epoch)?;
    let (mut count, mut sums) = (0, [0.0; 3]);
    while let Some((inputs, labels)) = batches.next_batch()? {
        let (logits, cache) = net.forward(inputs.view())?;
        let batch = LogitBatch::new(logits.view(), &labels).map_err(|e| match e {
            ObjectiveError::NonFinite { .. } => TrainError::NonFinite {
                what: "logit",
                epoch,
                batch: count,
            },
            other => other.into(),
        })?;
        let xe = objectives::cross_entropy(&batch)?;
        let (loss, complement) =
            match objectives::complement_term(cfg.objective, &batch, h, cfg.entropy)? {
                Some(c) => {
                    let value = c.value;
                    (xe.clone().minus(&c), value)
                }
                None => (xe.clone(), audit_complement(&batch, h, cfg.entropy)?),
            };
        finite(loss.value, "loss", epoch, count)?;
        descend(net, state, &cache, &loss, lr, cfg)?;
        sums[0] += loss.value;
        sums[1] += xe.value;
        sums[2] += complement;
        count += 1;
    }
    finish(
        net,
        epoch,
        lr,
        count,
        count,
        sums,
        cfg.objective != ObjectiveKind::Xe,
    )
}

/// Per minibatch: ascent on the complement term, then descent on `XE`, each
/// with its own forward pass.
pub fn train_epoch_alternating(
    net: &mut Network,
    state: &mut OptimizerState,
    data: &Dataset,
    h: Option<&LabelHierarchy>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats, TrainError> {
    check_hierarchy(cfg, h)?;
    let lr = cfg.lr_at(epoch);
    let complement_lr = lr * cfg.complement_lr_scale.unwrap_or(1.0);
    let mut batches = Minibatches::new(data, cfg, epoch)?;
    let (mut count, mut updates, mut sums) = (0, 0, [0.0; 3]);
    while let Some((inputs, labels)) = batches.next_batch()? {
        let mut xe_value = 0.0;
        let mut complement_value = None;
        let steps: [bool; 2] = match cfg.alternating_order {
            AlternatingOrder::ComplementFirst => [true, false],
            AlternatingOrder::XeFirst => [false, true],
        };
        for is_complement_step in steps {
            if is_complement_step && cfg.objective == ObjectiveKind::Xe {
                continue;
            }
            let (logits, cache) = net.forward(inputs.view())?;
            let batch = LogitBatch::new(logits.view(), &labels).map_err(|e| match e {
                ObjectiveError::NonFinite { .. } => TrainError::NonFinite {
                    what: "logit",
                    epoch,
                    batch: count,
                },
                other => other.into(),
            })?;
            if is_complement_step {
                let term = objectives::complement_term(cfg.objective, &batch, h, cfg.entropy)?
                    .expect("non-xe objectives have a complement term");
                finite(term.value, "loss", epoch, count)?;
                complement_value = Some(term.value);
                descend(net, state, &cache, &term.negated(), complement_lr, cfg)?;
            } else {
                let xe = objectives::cross_entropy(&batch)?;
                finite(xe.value, "loss", epoch, count)?;
                xe_value = xe.value;
                if cfg.objective == ObjectiveKind::Xe {
                    complement_value = Some(audit_complement(&batch, h, cfg.entropy)?);
                }
                descend(net, state, &cache, &xe, lr, cfg)?;
            }
            updates += 1;
        }
        let complement = complement_value.unwrap_or(0.0);
        let loss = if cfg.objective == ObjectiveKind::Xe {
            xe_value
        } else {
            xe_value - complement
        };
        sums[0] += loss;
        sums[1] += xe_value;
        sums[2] += complement;
        count += 1;
    }
    finish(
        net,
        epoch,
        lr,
        count,
        updates,
        sums,
        cfg.objective != ObjectiveKind::Xe,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerSpec;

    fn cfg() -> TrainConfig {
        TrainConfig {
            objective: ObjectiveKind::Xe,
            schedule: Schedule::Direct,
            epochs: 10,
            batch_size: 4,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_milestones: vec![],
            seed: 1,
            entropy: EntropyOptions::default(),
            alternating_order: AlternatingOrder::ComplementFirst,
            complement_lr_scale: None,
            augment: false,
        }
    }

    fn scalar_net(value: f64) -> Network {
        let mut net = Network::zeros(
            &[LayerSpec::Dense {
                inputs: 1,
                outputs: 1,
            }],
            0,
        )
        .unwrap();
        net.params_mut()[0] = value;
        net
    }

    fn set_grad(net: &mut Network, g: f64) {
        // grads are only writable through backward: x = 1, dy = g gives dW = g, db = g
        let x = ndarray::array![[1.0]];
        let (_, cache) = net.forward(x.view()).unwrap();
        net.backward(&cache, ndarray::array![[g]].view()).unwrap();
    }

    #[test]
    fn lr_schedule_milestones() {
        let c = TrainConfig {
            epochs: 200,
            lr_milestones: vec![100, 150],
            ..cfg()
        };
        assert_eq!(c.lr_at(0), 0.1);
        assert_eq!(c.lr_at(99), 0.1);
        assert!((c.lr_at(100) - 0.01).abs() < 1e-18);
        assert!((c.lr_at(150) - 0.001).abs() < 1e-18);
        assert_eq!(cfg().lr_at(9), 0.1);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(TrainConfig::cifar_default(ObjectiveKind::Hcot)
            .validate()
            .is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..cfg() },
            TrainConfig {
                momentum: 1.0,
                ..cfg()
            },
            TrainConfig {
                weight_decay: -1.0,
                ..cfg()
            },
            TrainConfig {
                lr_milestones: vec![5, 5],
                ..cfg()
            },
            TrainConfig {
                lr_milestones: vec![10],
                ..cfg()
            },
            TrainConfig {
                batch_size: 0,
                ..cfg()
            },
        ] {
            assert!(
                matches!(bad.validate(), Err(TrainError::InvalidConfig(_))),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = scalar_net(0.7);
        let mut state = OptimizerState::new(&net);
        sgd_step(&mut net, &mut state, 0.1, 0.9, 0.0);
        assert_eq!(net.params(), &[0.7, 0.0]);
    }

    #[test]
    fn plain_gradient_descent_without_momentum() {
        let mut net = scalar_net(0.7);
        set_grad(&mut net, 2.0);
        let mut state = OptimizerState::new(&net);
        sgd_step(&mut net, &mut state, 0.1, 0.0, 0.0);
        assert_eq!(net.params(), &[0.7 - 0.1 * 2.0, -0.1 * 2.0]);
        assert_eq!(net.grads(), &[2.0, 2.0]);
    }

    #[test]
    fn two_momentum_steps_match_closed_form() {
        // scalar oracle: v1 = g, v2 = m g + g; displacement lr (v1 + v2) = lr g (2 + m)
        let (lr, g, m): (f64, f64, f64) = (0.05, 1.5, 0.9);
        let mut oracle_theta: f64 = 0.3;
        let mut v = 0.0;
        for _ in 0..2 {
            v = m * v + g;
            oracle_theta -= lr * v;
        }
        assert!((0.3 - oracle_theta - lr * g * (2.0 + m)).abs() < 1e-15);

        let mut net = scalar_net(0.3);
        set_grad(&mut net, g);
        let mut state = OptimizerState::new(&net);
        sgd_step(&mut net, &mut state, lr, m, 0.0);
        sgd_step(&mut net, &mut state, lr, m, 0.0);
        assert!((net.params()[0] - oracle_theta).abs() < 1e-15);
        assert!((0.3 - net.params()[0] - lr * g * (2.0 + m)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_coupled() {
        let mut net = scalar_net(2.0);
        let mut state = OptimizerState::new(&net);
        sgd_step(&mut net, &mut state, 0.5, 0.0, 0.1);
        assert!((net.params()[0] - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
        assert!((state.velocity()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn permutations_depend_on_seed_and_epoch() {
        let a = epoch_permutation(50, 3, 0);
        assert_eq!(a, epoch_permutation(50, 3, 0));
        assert_ne!(a, epoch_permutation(50, 3, 1));
        assert_ne!(a, epoch_permutation(50, 4, 0));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn empty_and_missing_hierarchy_errors() {
        let data =
            Dataset::new(Array2::zeros((2, 1)), vec![0, 0], crate::data::Split::Train).unwrap();
        let mut net = Network::init(
            &[LayerSpec::Dense {
                inputs: 1,
                outputs: 3,
            }],
            0,
        )
        .unwrap();
        let mut state = OptimizerState::new(&net);
        let hcot = TrainConfig {
            objective: ObjectiveKind::Hcot,
            ..cfg()
        };
        for schedule in [Schedule::Direct, Schedule::Alternating] {
            let c = TrainConfig {
                schedule,
                ..hcot.clone()
            };
            assert!(matches!(
                train_epoch(&mut net, &mut state, &data, None, &c, 0),
                Err(TrainError::Objective(ObjectiveError::MissingHierarchy(_)))
            ));
        }
        assert!(train_epoch(&mut net, &mut state, &data, None, &cfg(), 0).is_ok());
    }
}
