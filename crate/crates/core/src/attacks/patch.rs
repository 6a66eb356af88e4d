//! Universal adversarial patch: one square sticker trained to push any image
//! towards a target class wherever it is pasted.

use serde::{Deserialize, Serialize};

use super::{as_batch, image_dims, restore_rank, Objective};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::rng::{below, derive_seed, seeded, unit, SplitMix64};
use crate::tape::clip;
use crate::tensor::Tensor;
use crate::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    /// Patch area as a fraction of the image area.
    pub fraction: f64,
    pub target: usize,
    /// Step size on the 0–255 scale.
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Gradient steps per design image per epoch.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    5.0
}

fn default_iterations() -> usize {
    100
}

fn default_epochs() -> usize {
    5
}

impl PatchConfig {
    pub fn new(fraction: f64, target: usize) -> Self {
        Self {
            fraction,
            target,
            lr: default_lr(),
            iterations: default_iterations(),
            epochs: default_epochs(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::config(format!(
                "patch fraction {} outside [0, 1]",
                self.fraction
            )));
        }
        Ok(())
    }
}

/// Side of the square patch covering `fraction` of an `h × w` image.
pub fn patch_side(fraction: f64, h: usize, w: usize) -> usize {
    ((fraction * (h * w) as f64).sqrt().round() as usize).min(h).min(w)
}

/// Where and how a patch is pasted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchPlacement {
    pub row: usize,
    pub col: usize,
    /// Counter-clockwise quarter turns.
    pub turns: usize,
}

impl PatchPlacement {
    /// Uniform position and rotation for a `side`-pixel patch.
    pub fn random(rng: &mut SplitMix64, side: usize, h: usize, w: usize) -> Self {
        Self {
            row: below(rng, h - side + 1),
            col: below(rng, w - side + 1),
            turns: below(rng, 4),
        }
    }
}

/// Rotate a `[C, s, s]` patch by `turns` counter-clockwise quarter turns.
pub fn rotate_quarter_turns(patch: &Tensor, turns: usize) -> Result<Tensor> {
    let (c, s) = match patch.dims() {
        [c, a, b] if a == b => (*c, *a),
        other => return Err(Error::shape(format!("patch must be [C, s, s], got {other:?}"))),
    };
    let mut cur = patch.clone();
    for _ in 0..turns % 4 {
        let src = cur.data();
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            let p = ch * s * s;
            for i in 0..s {
                for j in 0..s {
                    out[p + i * s + j] = src[p + j * s + (s - 1 - i)];
                }
            }
        }
        cur = Tensor::new(cur.dims().to_vec(), out)?;
    }
    Ok(cur)
}

/// Paste the rotated patch over every image of `images` at one placement.
pub fn patch_apply(images: &Tensor, patch: &Tensor, at: PatchPlacement) -> Result<Tensor> {
    let (batch, unbatched) = as_batch(images)?;
    let (n, c, h, w) = image_dims(&batch);
    let rotated = rotate_quarter_turns(patch, at.turns)?;
    let s = rotated.dims()[1];
    if rotated.dims()[0] != c {
        return Err(Error::shape(format!(
            "{}-channel patch on {c}-channel images",
            rotated.dims()[0]
        )));
    }
    if at.row + s > h || at.col + s > w {
        return Err(Error::Bounds(format!(
            "{s}×{s} patch at ({}, {}) leaves the {h}×{w} image",
            at.row, at.col
        )));
    }
    let mut out = batch;
    let d = out.data_mut();
    let r = rotated.data();
    for i in 0..n {
        for ch in 0..c {
            for y in 0..s {
                let dst = ((i * c + ch) * h + at.row + y) * w + at.col;
                d[dst..dst + s].copy_from_slice(&r[(ch * s + y) * s..(ch * s + y + 1) * s]);
            }
        }
    }
    restore_rank(out, unbatched)
}

/// Train a patch by gradient ascent on `objective` (normally the target
/// class log-probability) over random placements on the design images.
/// Every design image is attacked towards `cfg.target`.
pub fn patch_train<O: Objective + ?Sized>(objective: &O, design: &Tensor, cfg: &PatchConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (batch, _) = as_batch(design)?;
    let (n, c, h, w) = image_dims(&batch);
    let s = patch_side(cfg.fraction, h, w);
    let mut rng = seeded(cfg.seed);
    let mut patch = Tensor::new(vec![c, s, s], (0..c * s * s).map(|_| unit(&mut rng)).collect())?;
    if s == 0 {
        return Ok(patch);
    }
    let step = cfg.lr / 255.0;
    for _ in 0..cfg.epochs {
        for i in 0..n {
            let image = batch.slice_outer(i)?;
            for _ in 0..cfg.iterations {
                let at = PatchPlacement::random(&mut rng, s, h, w);
                let x = patch_apply(&image, &patch, at)?;
                let (_, g) = objective.losses_and_grad(&x, &[cfg.target])?;
                let mut footprint = vec![0.0; c * s * s];
                for ch in 0..c {
                    for y in 0..s {
                        let src = (ch * h + at.row + y) * w + at.col;
                        footprint[(ch * s + y) * s..(ch * s + y + 1) * s].copy_from_slice(&g.data()[src..src + s]);
                    }
                }
                let footprint = Tensor::new(vec![c, s, s], footprint)?;
                let grad = rotate_quarter_turns(&footprint, (4 - at.turns) % 4)?;
                for (p, g) in patch.data_mut().iter_mut().zip(grad.data()) {
                    *p = clip(*p + step * g, 0.0, 1.0);
                }
            }
        }
    }
    Ok(patch)
}

/// Accuracy on `dataset` with the patch pasted at an independent random
/// placement per image. Target-class images are scored too, so an empty
/// patch gives exactly the clean accuracy.
pub fn patch_evaluate<C: Classifier + ?Sized>(judge: &C, dataset: &Dataset, patch: &Tensor, seed: u64) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::contract("cannot evaluate a patch on an empty dataset"));
    }
    let [_, h, w] = dataset.image_dims();
    let s = patch.dims().get(1).copied().unwrap_or(0);
    let pasted = (0..dataset.len())
        .map(|i| {
            let mut rng = seeded(derive_seed(seed, i as u64));
            patch_apply(&dataset.image(i)?, patch, PatchPlacement::random(&mut rng, s, h, w))
        })
        .collect::<Result<Vec<_>>>()?;
    let predicted = judge.classify(&Tensor::stack_outer(&pasted)?)?;
    let correct = predicted.iter().zip(dataset.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / dataset.len() as f64)
}
