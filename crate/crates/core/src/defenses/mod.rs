//! Training-time defenses and randomized smoothing.
//!
//! Every trainer here is the same minibatch loop with a different
//! perturbation applied to each batch before the gradient step.

mod smoothing;

pub use smoothing::{smoothed_predict, smoothed_votes, SmoothedClassifier, SmoothingConfig};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::attacks::{pgd, roa_attack, AttackBudget, MaskSet, ModelLoss, RoaConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{build_cnn, forward_on_tape, ConvNetSpec, ModelParams, TapedParams, TAPE_CHUNK};
use crate::optim::{OptimState, OptimizerConfig};
use crate::rng::{derive_seed, seeded, shuffle};
use crate::tape::{Reduction, Tape};
use crate::tensor::Tensor;

// Sub-stream tags keeping shuffling and noise draws independent.
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const NOISE_STREAM: u64 = 0x4E4F_4953;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    /// Keep a copy of the parameters after every epoch.
    #[serde(default)]
    pub snapshots: bool,
}

fn default_batch() -> usize {
    32
}

impl TrainConfig {
    pub fn new(epochs: usize, optimizer: OptimizerConfig, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: default_batch(),
            optimizer,
            seed,
            snapshots: false,
        }
    }

    /// Fine-tuning defaults used for occlusion training.
    pub fn doa_defaults(seed: u64) -> Self {
        Self::new(5, OptimizerConfig::adam(1e-4), seed)
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate {} must be positive",
                self.optimizer.lr
            )));
        }
        Ok(())
    }
}

/// What happens to each training batch before the gradient step.
#[derive(Clone, Debug, PartialEq)]
pub enum Perturbation {
    None,
    /// Untargeted PGD against the current parameters.
    Pgd(AttackBudget),
    /// Rectangular occlusion attack against the current parameters.
    Roa(RoaConfig),
    /// Additive Gaussian noise with this standard deviation.
    Noise(f64),
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    /// Mean training loss (on perturbed batches) per epoch.
    pub epoch_losses: Vec<f64>,
    /// Parameters after each epoch when requested.
    pub snapshots: Vec<ModelParams>,
}

/// Minibatch training from `start`.
pub fn train(
    start: ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
    perturbation: &Perturbation,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    if let Perturbation::Noise(sigma) = perturbation {
        if !(sigma.is_finite() && *sigma >= 0.0) {
            return Err(Error::config(format!("noise sigma {sigma} must be non-negative")));
        }
    }
    if data.classes() > start.spec().classes {
        return Err(Error::shape(format!(
            "dataset has {} classes, model outputs {}",
            data.classes(),
            start.spec().classes
        )));
    }
    let mut params = start;
    let mut optim = OptimState::new(cfg.optimizer, params.tensors());
    let mut history = TrainHistory::default();
    let n = data.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(
            &mut seeded(derive_seed(cfg.seed ^ SHUFFLE_STREAM, epoch as u64)),
            &mut order,
        );
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.batch(chunk)?;
            let noise_seed = derive_seed(derive_seed(cfg.seed ^ NOISE_STREAM, epoch as u64), b as u64);
            let x = perturb(&params, x, &y, perturbation, noise_seed)?;
            let loss = step(&mut params, &mut optim, x, &y)?;
            total += loss * chunk.len() as f64;
        }
        let mean = total / n as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged in epoch {epoch} (loss {mean})"
            )));
        }
        debug!(epoch, loss = mean, "epoch finished");
        history.epoch_losses.push(mean);
        if cfg.snapshots {
            history.snapshots.push(params.clone());
        }
    }
    Ok((params, history))
}

fn perturb(params: &ModelParams, x: Tensor, y: &[usize], how: &Perturbation, noise_seed: u64) -> Result<Tensor> {
    match how {
        Perturbation::None => Ok(x),
        Perturbation::Pgd(b) if b.epsilon == 0.0 || b.iterations == 0 => Ok(x),
        Perturbation::Pgd(b) => Ok(pgd(&ModelLoss::untargeted(params), &x, y, b, &MaskSet::All)?.images),
        Perturbation::Roa(cfg) => Ok(roa_attack(&ModelLoss::untargeted(params), &x, y, cfg)?
            .adversarial
            .images),
        Perturbation::Noise(sigma) if *sigma == 0.0 => Ok(x),
        Perturbation::Noise(sigma) => {
            let mut rng = seeded(noise_seed);
            let mut x = x;
            for v in x.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
            Ok(x)
        }
    }
}

fn step(params: &mut ModelParams, optim: &mut OptimState, x: Tensor, y: &[usize]) -> Result<f64> {
    let n = y.len();
    let per = x.len() / n;
    let mut total = 0.0;
    let mut sum: Option<Vec<Tensor>> = None;
    for start in (0..n).step_by(TAPE_CHUNK) {
        let end = (start + TAPE_CHUNK).min(n);
        let mut dims = x.dims().to_vec();
        dims[0] = end - start;
        let chunk = Tensor::new(dims, x.data()[start * per..end * per].to_vec())?;
        let mut tape = Tape::new();
        let handles = TapedParams::inputs(&mut tape, params);
        let input = tape.constant(chunk);
        let logits = forward_on_tape(&mut tape, params.spec(), &handles, input)?;
        let loss = tape.cross_entropy(logits, &y[start..end], Reduction::Sum)?;
        total += tape.value(loss).item()?;
        let mut grads = tape.backward(loss)?;
        let g = handles.vars.iter().map(|&v| grads.take(v).expect("parameter gradient"));
        match &mut sum {
            None => sum = Some(g.collect()),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(g) {
                    for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                        *av += gv;
                    }
                }
            }
        }
    }
    let scale = 1.0 / n as f64;
    let g: Vec<Tensor> = sum
        .expect("non-empty batch")
        .into_iter()
        .map(|t| t.map(|v| v * scale))
        .collect();
    let refs: Vec<Option<&Tensor>> = g.iter().map(Some).collect();
    optim.step(params.tensors_mut(), &refs)?;
    Ok(total * scale)
}

/// Train a fresh network of `spec` initialized from `seed`.
pub fn train_from_scratch(
    spec: &ConvNetSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    perturbation: &Perturbation,
) -> Result<(ModelParams, TrainHistory)> {
    train(build_cnn(spec, cfg.seed)?, data, cfg, perturbation)
}

/// PGD adversarial training with the usual step of ε/4 (0–255 scale input).
pub fn adversarial_train(
    start: ModelParams,
    data: &Dataset,
    epsilon_255: f64,
    iterations: usize,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    let budget = AttackBudget::pgd_training(epsilon_255, iterations)?;
    train(start, data, cfg, &Perturbation::Pgd(budget))
}

/// Gaussian data augmentation, the base classifier for smoothing.
pub fn gaussian_noise_train(
    start: ModelParams,
    data: &Dataset,
    sigma: f64,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    train(start, data, cfg, &Perturbation::Noise(sigma))
}

/// Fine-tune `start` (normally a clean model) against rectangular occlusion.
pub fn doa_train(
    start: ModelParams,
    data: &Dataset,
    roa: &RoaConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    train(start, data, cfg, &Perturbation::Roa(*roa))
}

/// Doubling ε schedule from `start` to `target` (both 0–255 scale).
pub fn curriculum_schedule(start: f64, target: f64) -> Result<Vec<f64>> {
    if !(start > 0.0 && start.is_finite() && target >= start) {
        return Err(Error::config(format!(
            "curriculum needs 0 < start <= target, got {start} and {target}"
        )));
    }
    let mut eps = vec![start];
    while *eps.last().expect("non-empty") < target {
        eps.push(eps.last().expect("non-empty") * 2.0);
    }
    if *eps.last().expect("non-empty") != target {
        return Err(Error::config(format!(
            "target {target} is not {start} doubled a whole number of times"
        )));
    }
    Ok(eps)
}

/// One ε level of curriculum training.
#[derive(Clone, Debug)]
pub struct Stage {
    pub epsilon: f64,
    pub start: ModelParams,
    pub end: ModelParams,
    pub history: TrainHistory,
}

/// PGD training through a sequence of ε levels, each stage starting from
/// the previous stage's parameters.
pub fn curriculum_train(
    start: ModelParams,
    data: &Dataset,
    schedule: &[f64],
    iterations: usize,
    cfg: &TrainConfig,
) -> Result<Vec<Stage>> {
    let mut stages = Vec::with_capacity(schedule.len());
    let mut current = start;
    for (k, &eps) in schedule.iter().enumerate() {
        info!(epsilon = eps, stage = k, "curriculum stage");
        let stage_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, k as u64),
            ..cfg.clone()
        };
        let (end, history) = adversarial_train(current.clone(), data, eps, iterations, &stage_cfg)?;
        stages.push(Stage {
            epsilon: eps,
            start: current,
            end: end.clone(),
            history,
        });
        current = end;
    }
    Ok(stages)
}
