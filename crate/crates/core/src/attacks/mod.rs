//! Attack algorithms. Everything here maximizes a per-example loss supplied
//! through [`Objective`], so the same code drives model attacks and the
//! closed-form toy losses used in tests.
//!
//! All attacks take `[N, C, H, W]` batches and treat examples independently:
//! attacking a batch gives bit-identical results to attacking each image
//! alone.

mod patch;
mod pgd;
mod physical;
mod roa;

pub use patch::{
    patch_apply, patch_evaluate, patch_side, patch_train, rotate_quarter_turns, PatchConfig, PatchPlacement,
};
pub use pgd::{pgd, pgd_snapshots, MaskSet};
pub use physical::{eyeglass_attack, sticker_attack, EyeglassConfig, StickerConfig};
pub use roa::{
    grey_fill, placements, roa_attack, roa_exhaustive_position, roa_gradient_positions, roa_snapshots, RoaConfig,
    RoaOutcome, RoaPlacement, Search, GREY,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{forward_on_tape, ModelParams, TapedParams, TAPE_CHUNK};
use crate::tape::{Reduction, Tape};
use crate::tensor::Tensor;

/// Attacked images with the loss each one reached.
#[derive(Clone, Debug)]
pub struct Adversarial {
    pub images: Tensor,
    pub losses: Vec<f64>,
}

/// A differentiable per-example loss to be maximized.
pub trait Objective {
    /// Loss of each `[N, C, H, W]` image against its label.
    fn losses(&self, images: &Tensor, labels: &[usize]) -> Result<Vec<f64>>;

    /// Losses plus the gradient of their sum with respect to `images`.
    fn losses_and_grad(&self, images: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)>;
}

/// Which quantity of a classifier an attack maximizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Goal {
    /// Cross-entropy against the true label (untargeted).
    Misclassify,
    /// Log-probability of the label, used as the target class.
    Target,
}

/// Classifier loss as an [`Objective`].
#[derive(Clone, Copy, Debug)]
pub struct ModelLoss<'a> {
    pub params: &'a ModelParams,
    pub goal: Goal,
}

impl<'a> ModelLoss<'a> {
    pub fn untargeted(params: &'a ModelParams) -> Self {
        Self {
            params,
            goal: Goal::Misclassify,
        }
    }

    pub fn targeted(params: &'a ModelParams) -> Self {
        Self {
            params,
            goal: Goal::Target,
        }
    }

    fn sign(&self) -> f64 {
        match self.goal {
            Goal::Misclassify => 1.0,
            Goal::Target => -1.0,
        }
    }
}

impl Objective for ModelLoss<'_> {
    fn losses(&self, images: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        let ce = crate::model::example_losses(self.params, images, labels)?;
        let s = self.sign();
        Ok(ce.into_iter().map(|l| s * l).collect())
    }

    fn losses_and_grad(&self, images: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let n = images.dims().first().copied().unwrap_or(0);
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} images", labels.len())));
        }
        if n <= TAPE_CHUNK {
            return self.chunk_grad(images, labels);
        }
        let per = images.len() / n;
        let mut losses = Vec::with_capacity(n);
        let mut grad = Vec::with_capacity(images.len());
        for start in (0..n).step_by(TAPE_CHUNK) {
            let end = (start + TAPE_CHUNK).min(n);
            let mut dims = images.dims().to_vec();
            dims[0] = end - start;
            let chunk = Tensor::new(dims, images.data()[start * per..end * per].to_vec())?;
            let (l, g) = self.chunk_grad(&chunk, &labels[start..end])?;
            losses.extend(l);
            grad.extend_from_slice(g.data());
        }
        Ok((losses, Tensor::new(images.dims().to_vec(), grad)?))
    }
}

impl ModelLoss<'_> {
    fn chunk_grad(&self, images: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let mut tape = Tape::new();
        let params = TapedParams::constants(&mut tape, self.params);
        let x = tape.input(images.clone());
        let logits = forward_on_tape(&mut tape, self.params.spec(), &params, x)?;
        let root = tape.cross_entropy(logits, labels, Reduction::Sum)?;
        let root = if self.goal == Goal::Target {
            tape.scale(root, -1.0)
        } else {
            root
        };
        let (ce, _) = kernels::cross_entropy_rows(tape.value(logits), labels)?;
        let mut grads = tape.backward(root)?;
        let g = grads.take(x).expect("input gradient");
        let s = self.sign();
        Ok((ce.into_iter().map(|l| s * l).collect(), g))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Inf,
    Two,
}

/// Perturbation bound and step schedule, on the unit pixel scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BudgetConfig", into = "BudgetConfig")]
pub struct AttackBudget {
    pub norm: Norm,
    pub epsilon: f64,
    pub step: f64,
    pub iterations: usize,
    /// Return the highest-loss iterate rather than the last one.
    pub keep_best: bool,
}

impl AttackBudget {
    pub fn linf(epsilon: f64, step: f64, iterations: usize) -> Self {
        Self {
            norm: Norm::Inf,
            epsilon,
            step,
            iterations,
            keep_best: true,
        }
    }

    pub fn l2(epsilon: f64, step: f64, iterations: usize) -> Self {
        Self {
            norm: Norm::Two,
            ..Self::linf(epsilon, step, iterations)
        }
    }

    /// Bound and step given on the 0–255 pixel scale.
    pub fn from_255(norm: Norm, epsilon: f64, step: f64, iterations: usize) -> Result<Self> {
        let b = Self {
            norm,
            epsilon: epsilon / 255.0,
            step: step / 255.0,
            iterations,
            keep_best: true,
        };
        b.validate()?;
        Ok(b)
    }

    /// The usual adversarial-training inner attack: `iterations` l∞ steps of
    /// `epsilon / 4` (0–255 scale).
    pub fn pgd_training(epsilon_255: f64, iterations: usize) -> Result<Self> {
        Self::from_255(Norm::Inf, epsilon_255, epsilon_255 / 4.0, iterations)
    }

    pub fn with_iterations(self, iterations: usize) -> Self {
        Self { iterations, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config(format!(
                "epsilon {} outside [0, 1] (255 on the pixel scale)",
                self.epsilon
            )));
        }
        let idle = self.iterations == 0 || self.epsilon == 0.0;
        if !(self.step <= 1.0 && (self.step > 0.0 || idle && self.step == 0.0)) {
            return Err(Error::config(format!(
                "step size {} must be in (0, 1] when iterating with a nonzero bound",
                self.step
            )));
        }
        Ok(())
    }
}

/// Serialized form of [`AttackBudget`] with bound and step on the 0–255 scale.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    #[serde(default = "default_norm")]
    pub norm: Norm,
    pub epsilon: f64,
    pub step: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "yes")]
    pub keep_best: bool,
}

fn default_norm() -> Norm {
    Norm::Inf
}

fn default_iterations() -> usize {
    10
}

fn yes() -> bool {
    true
}

impl TryFrom<BudgetConfig> for AttackBudget {
    type Error = Error;

    fn try_from(c: BudgetConfig) -> Result<Self> {
        let mut b = AttackBudget::from_255(c.norm, c.epsilon, c.step, c.iterations)?;
        b.keep_best = c.keep_best;
        Ok(b)
    }
}

impl From<AttackBudget> for BudgetConfig {
    fn from(b: AttackBudget) -> Self {
        Self {
            norm: b.norm,
            epsilon: b.epsilon * 255.0,
            step: b.step * 255.0,
            iterations: b.iterations,
            keep_best: b.keep_best,
        }
    }
}

pub(crate) fn check_losses(losses: &[f64]) -> Result<()> {
    match losses.iter().position(|l| !l.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("non-finite loss {} for example {i}", losses[i]))),
        None => Ok(()),
    }
}

/// `sgn` with `sgn(0) = 0`.
#[inline]
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Accept `[C, H, W]` or `[N, C, H, W]`; returns the batch and whether the
/// input was a single unbatched image.
pub(crate) fn as_batch(image: &Tensor) -> Result<(Tensor, bool)> {
    match image.dims() {
        [c, h, w] => Ok((image.clone().reshape(&[1, *c, *h, *w])?, true)),
        [_, _, _, _] => Ok((image.clone(), false)),
        other => Err(Error::shape(format!(
            "images must be [C, H, W] or [N, C, H, W], got {other:?}"
        ))),
    }
}

pub(crate) fn restore_rank(batch: Tensor, unbatched: bool) -> Result<Tensor> {
    if unbatched {
        let d = batch.dims()[1..].to_vec();
        batch.reshape(&d)
    } else {
        Ok(batch)
    }
}

/// `[C, H, W]` of a batch.
pub(crate) fn image_dims(batch: &Tensor) -> (usize, usize, usize, usize) {
    let d = batch.dims();
    (d[0], d[1], d[2], d[3])
}
