//! Plain SGD training with step-decayed learning rate, class-balanced batches,
//! on-the-fly augmentation and bit-reproducible resumption.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointError, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{augment, AugmentationSpec, BalancedSampler, DataError, PatchDataset};
use crate::losses::{LossConfig, NodeReduction};
use crate::metricnet::{aggregate, Aggregation};
use crate::model::{LoopyModel, ModelError};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss at iteration {iteration}; last good checkpoint at iteration {}", last_good.iteration)]
    NonFiniteLoss { iteration: u64, last_good: Box<Checkpoint> },
    #[error("dataset patches are {got:?} but the model expects {expected}x{expected}")]
    PatchSize { expected: usize, got: (usize, usize) },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Iterations between learning-rate decays.
    pub decay_interval: u64,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub max_epochs: u64,
    /// Weight of the monotonous loss.
    pub lambda: f64,
    pub reduction: NodeReduction,
    pub augmentation: AugmentationSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            decay_interval: 1000,
            decay_factor: 0.9,
            batch_size: 32,
            max_epochs: 70,
            lambda: 0.4,
            reduction: NodeReduction::Mean,
            augmentation: AugmentationSpec::all(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_interval == 0 {
            return bad("decay interval must be positive".into());
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return bad(format!("batch size must be even and positive, got {}", self.batch_size));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { lambda: self.lambda, reduction: self.reduction }
    }

    /// Test-time aggregation implied by `lambda`.
    pub fn aggregation(&self) -> Aggregation {
        Aggregation::for_lambda(self.lambda)
    }
}

/// `initial · factor^⌊iteration / interval⌋`.
pub fn lr_schedule(iteration: u64, cfg: &TrainConfig) -> f64 {
    let steps = (iteration / cfg.decay_interval) as i32;
    cfg.learning_rate * cfg.decay_factor.powi(steps)
}

/// `θ ← θ − lr·∇θ` for every parameter, then clears the gradients. Nothing is
/// updated if any gradient is non-finite.
pub fn sgd_step(params: &mut [(&str, &mut Tensor)], grads: &mut [Vec<f64>], lr: f64) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len(), "one gradient buffer per parameter");
    for ((name, t), g) in params.iter().zip(grads.iter()) {
        assert_eq!(t.len(), g.len(), "gradient length for {name}");
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient { param: name.to_string() });
        }
    }
    for ((_, t), g) in params.iter_mut().zip(grads.iter_mut()) {
        for (p, d) in t.data_mut().iter_mut().zip(g.iter_mut()) {
            *p -= lr * *d;
            *d = 0.0;
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}", self.iteration, self.lr, self.loss, self.accuracy)
    }
}

/// Mean loss, accuracy and summed gradients of one batch.
struct BatchResult {
    loss: f64,
    accuracy: f64,
    grads: Vec<Vec<f64>>,
}

/// Owns the model during training.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: LoopyModel,
    pub config: TrainConfig,
    pub iteration: u64,
    pub epoch: u64,
    rng: ChaCha8Rng,
    last_good: Option<Box<Checkpoint>>,
}

/// Stream of the training RNG; stream 0 of the same seed initializes weights.
const TRAIN_STREAM: u64 = 1;

impl Trainer {
    pub fn new(model: LoopyModel, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self { model, config, iteration: 0, epoch: 0, rng, last_good: None })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, TrainError> {
        ck.train.validate()?;
        let rng = ck.rng.restore();
        Ok(Self {
            model: ck.model,
            config: ck.train,
            iteration: ck.iteration,
            epoch: ck.epoch,
            rng,
            last_good: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            iteration: self.iteration,
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
        }
    }

    fn check_dataset(&self, ds: &PatchDataset) -> Result<(), TrainError> {
        let s = self.model.input_size();
        if ds.patch_size() != (s, s) {
            return Err(TrainError::PatchSize { expected: s, got: ds.patch_size() });
        }
        Ok(())
    }

    fn run_batch(&mut self, ds: &PatchDataset, batch: &[usize]) -> Result<BatchResult, TrainError> {
        let loss_cfg = self.config.loss();
        let aggregation = self.config.aggregation();
        let mut grads: Vec<Vec<f64>> = self.model.named_tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for &i in batch {
            let pair = ds.pair(i);
            let a = augment(&pair.a, &self.config.augmentation, &mut self.rng);
            let b = augment(&pair.b, &self.config.augmentation, &mut self.rng);
            let mut g = Graph::new();
            let bound = self.model.bind(&mut g);
            let (loss, u) = self.model.pair_loss(&mut g, &bound, &a, &b, pair.label, &loss_cfg)?;
            let scores: Vec<f64> = u.scores.iter().map(|&v| g.scalar(v)).collect();
            let score = aggregate(&scores, aggregation).map_err(ModelError::from)?;
            if (score > 0.5) == pair.label.is_match() {
                correct += 1;
            }
            loss_sum += g.scalar(loss);
            g.backward(loss)?;
            for (acc, v) in grads.iter_mut().zip(bound.vars()) {
                if let Some(pg) = g.grad(v) {
                    for (x, y) in acc.iter_mut().zip(pg) {
                        *x += y;
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for g in &mut grads {
            g.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(BatchResult { loss: loss_sum * inv, accuracy: correct as f64 * inv, grads })
    }

    fn abort(&self) -> TrainError {
        TrainError::NonFiniteLoss {
            iteration: self.iteration,
            last_good: self.last_good.clone().unwrap_or_else(|| Box::new(self.checkpoint())),
        }
    }

    /// One SGD update on the given pair indices.
    pub fn step(&mut self, ds: &PatchDataset, batch: &[usize]) -> Result<LogEntry, TrainError> {
        let lr = lr_schedule(self.iteration, &self.config);
        let mut r = self.run_batch(ds, batch)?;
        if !r.loss.is_finite() {
            return Err(self.abort());
        }
        let names: Vec<String> = self.model.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut params: Vec<(&str, &mut Tensor)> =
            names.iter().map(String::as_str).zip(self.model.tensors_mut()).collect();
        sgd_step(&mut params, &mut r.grads, lr)?;
        let entry = LogEntry { iteration: self.iteration, lr, loss: r.loss, accuracy: r.accuracy };
        self.iteration += 1;
        Ok(entry)
    }

    /// Runs one epoch of balanced batches.
    pub fn train_epoch(&mut self, ds: &PatchDataset) -> Result<Vec<LogEntry>, TrainError> {
        self.check_dataset(ds)?;
        if self.last_good.is_none() {
            self.last_good = Some(Box::new(self.checkpoint()));
        }
        let sampler = BalancedSampler::new(ds, self.config.batch_size)?;
        let batches = sampler.epoch(&mut self.rng);
        let mut log = Vec::with_capacity(batches.len());
        for batch in &batches {
            log.push(self.step(ds, batch)?);
        }
        self.epoch += 1;
        self.last_good = Some(Box::new(self.checkpoint()));
        Ok(log)
    }

    /// Trains until `config.max_epochs`, calling `on_epoch` after every epoch.
    pub fn run<F>(&mut self, ds: &PatchDataset, mut on_epoch: F) -> Result<Vec<LogEntry>, TrainError>
    where
        F: FnMut(&Trainer, &[LogEntry]) -> Result<(), TrainError>,
    {
        let mut log = Vec::new();
        while self.epoch < self.config.max_epochs {
            let entries = self.train_epoch(ds)?;
            on_epoch(self, &entries)?;
            log.extend(entries);
        }
        Ok(log)
    }
}

/// Trains `model` from scratch and returns the final checkpoint and the log.
pub fn train(ds: &PatchDataset, model: LoopyModel, cfg: &TrainConfig) -> Result<(Checkpoint, Vec<LogEntry>), TrainError> {
    let mut t = Trainer::new(model, cfg.clone())?;
    let log = t.run(ds, |_, _| Ok(()))?;
    Ok((t.checkpoint(), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::featurenet::FeatureConfig;
    use crate::metricnet::LoopyConfig;

    fn tiny(seed: u64) -> LoopyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LoopyModel::init(FeatureConfig::tiny(), LoopyConfig::new(4, 4, 0), &mut rng).unwrap()
    }

    #[test]
    fn schedule_boundaries() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.01);
        assert_eq!(lr_schedule(999, &cfg), 0.01);
        assert_eq!(lr_schedule(1000, &cfg), 0.01 * 0.9);
        assert!((lr_schedule(2500, &cfg) - 0.0081).abs() < 1e-15);
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = Tensor::scalar(1.0);
        let mut g = vec![vec![2.0]];
        sgd_step(&mut [("p", &mut p)], &mut g, 0.1).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(g[0], vec![0.0]);

        let mut q = Tensor::vector(vec![0.3, -0.7]);
        let before = q.clone();
        sgd_step(&mut [("q", &mut q)], &mut [vec![5.0, 1.0]], 0.0).unwrap();
        assert_eq!(q, before);

        let (mut a, mut b) = (Tensor::scalar(1.0), Tensor::scalar(1.0));
        for _ in 0..2 {
            sgd_step(&mut [("a", &mut a)], &mut [vec![0.5]], 0.25).unwrap();
        }
        sgd_step(&mut [("b", &mut b)], &mut [vec![0.5]], 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let err = sgd_step(&mut [("metric.w_i", &mut p)], &mut [vec![0.0, f64::NAN]], 0.1).unwrap_err();
        assert!(err.to_string().contains("metric.w_i"));
        assert_eq!(p.data(), &[1.0, 2.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.batch_size = 7;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.decay_factor = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.learning_rate = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lambda = -0.1;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = generate_synthetic(3, 2, 16, 1);
        let cfg = TrainConfig { batch_size: 4, max_epochs: 2, seed: 5, ..Default::default() };
        let (c1, l1) = train(&ds, tiny(1), &cfg).unwrap();
        let (c2, l2) = train(&ds, tiny(1), &cfg).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(c1.model, c2.model);
        assert_eq!(l1.len(), 6);
        assert_eq!(c1.iteration, 6);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = generate_synthetic(3, 2, 16, 2);
        let cfg = TrainConfig { batch_size: 4, max_epochs: 3, seed: 8, ..Default::default() };
        let (straight, log) = train(&ds, tiny(4), &cfg).unwrap();

        let mut first = Trainer::new(tiny(4), cfg).unwrap();
        let mut resumed_log = first.train_epoch(&ds).unwrap();
        let bytes = first.checkpoint().to_bytes();
        let mut second = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        resumed_log.extend(second.run(&ds, |_, _| Ok(())).unwrap());
        assert_eq!(resumed_log, log);
        assert_eq!(second.checkpoint().to_bytes(), straight.to_bytes());
    }

    #[test]
    fn patch_size_mismatch() {
        let ds = generate_synthetic(2, 1, 64, 1);
        let mut t = Trainer::new(tiny(0), TrainConfig { batch_size: 2, ..Default::default() }).unwrap();
        assert!(matches!(t.train_epoch(&ds), Err(TrainError::PatchSize { expected: 16, .. })));
    }

    #[test]
    fn non_finite_loss_keeps_last_good() {
        let ds = generate_synthetic(2, 1, 16, 1);
        let mut t = Trainer::new(tiny(0), TrainConfig { batch_size: 2, max_epochs: 3, ..Default::default() }).unwrap();
        t.train_epoch(&ds).unwrap();
        let good = t.checkpoint();
        t.model.metric.theta.data_mut()[0] = f64::NAN;
        match t.train_epoch(&ds) {
            Err(TrainError::NonFiniteLoss { last_good, .. }) => assert_eq!(*last_good, good),
            other => panic!("expected non-finite loss, got {other:?}"),
        }
    }
}
