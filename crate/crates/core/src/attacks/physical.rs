//! Mask-confined attacks modelled on printed eyeglass frames and stop-sign
//! stickers.

use serde::{Deserialize, Serialize};

use super::{as_batch, check_losses, image_dims, restore_rank, Adversarial, MaskSet, Objective};
use crate::error::{Error, Result};
use crate::optim::{OptimState, OptimizerConfig};
use crate::rng::{derive_seed, seeded, unit};
use crate::tape::clip;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EyeglassConfig {
    /// Step size on the 0–255 scale.
    pub lr: f64,
    pub momentum: f64,
    pub iterations: usize,
    /// Random solid colours tried at initialization.
    pub colors: usize,
    pub seed: u64,
}

impl Default for EyeglassConfig {
    fn default() -> Self {
        Self {
            lr: 20.0,
            momentum: 0.4,
            iterations: 300,
            colors: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StickerConfig {
    /// Adam step size on the unit scale.
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for StickerConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            iterations: 300,
            seed: 0,
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

struct Prepared {
    batch: Tensor,
    unbatched: bool,
    offsets: Vec<Vec<usize>>,
    per: usize,
    channels: usize,
}

fn prepare(images: &Tensor, labels: &[usize], masks: &MaskSet) -> Result<Prepared> {
    let (batch, unbatched) = as_batch(images)?;
    let (n, c, h, w) = image_dims(&batch);
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} images", labels.len())));
    }
    let offsets = masks.offsets(n, c, h, w)?;
    Ok(Prepared {
        batch,
        unbatched,
        offsets,
        per: c * h * w,
        channels: c,
    })
}

/// Momentum ascent on normalized gradients from the best of several solid
/// colours, with pixels kept on the 8-bit grid.
pub fn eyeglass_attack<O: Objective + ?Sized>(
    objective: &O,
    images: &Tensor,
    labels: &[usize],
    masks: &MaskSet,
    cfg: &EyeglassConfig,
    checkpoints: &[usize],
) -> Result<Vec<Adversarial>> {
    if cfg.colors == 0 {
        return Err(Error::config("eyeglass attack needs at least one initial colour"));
    }
    let p = prepare(images, labels, masks)?;
    let n = labels.len();
    let plane = p.per / p.channels.max(1);

    // every example gets `colors` solid-colour candidates
    let mut candidates = Vec::with_capacity(n * cfg.colors);
    let mut cand_labels = Vec::with_capacity(n * cfg.colors);
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = seeded(derive_seed(cfg.seed, i as u64));
        let base = p.batch.slice_outer(i)?;
        for _ in 0..cfg.colors {
            let colour: Vec<f64> = (0..p.channels).map(|_| quantize(unit(&mut rng))).collect();
            let mut cand = base.clone();
            for &k in &p.offsets[i] {
                cand.data_mut()[k] = colour[k / plane];
            }
            candidates.push(cand);
            cand_labels.push(label);
        }
    }
    let scores = objective.losses(&Tensor::stack_outer(&candidates)?, &cand_labels)?;
    check_losses(&scores)?;
    let mut x = p.batch.clone();
    for i in 0..n {
        let s = &scores[i * cfg.colors..(i + 1) * cfg.colors];
        let mut best = 0;
        for (j, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = j;
            }
        }
        x.data_mut()[i * p.per..(i + 1) * p.per].copy_from_slice(candidates[i * cfg.colors + best].data());
    }

    let mut velocity = vec![0.0; x.len()];
    let scale = cfg.lr / 255.0;
    run_iterations(objective, &mut x, labels, checkpoints, p.unbatched, |x, g| {
        let (xd, gd) = (x.data_mut(), g.data());
        for (i, idx) in p.offsets.iter().enumerate() {
            let base = i * p.per;
            let m = idx.iter().map(|&k| gd[base + k].abs()).fold(0.0, f64::max);
            if m == 0.0 {
                continue;
            }
            for &k in idx {
                let j = base + k;
                velocity[j] = cfg.momentum * velocity[j] + gd[j] / m;
                xd[j] = quantize(clip(xd[j] + scale * velocity[j], 0.0, 1.0));
            }
        }
        Ok(())
    })
}

/// Adam ascent on masked pixels from a seeded uniform start.
pub fn sticker_attack<O: Objective + ?Sized>(
    objective: &O,
    images: &Tensor,
    labels: &[usize],
    masks: &MaskSet,
    cfg: &StickerConfig,
    checkpoints: &[usize],
) -> Result<Vec<Adversarial>> {
    let p = prepare(images, labels, masks)?;
    let mut x = p.batch.clone();
    for (i, idx) in p.offsets.iter().enumerate() {
        let mut rng = seeded(derive_seed(cfg.seed, i as u64));
        for &k in idx {
            x.data_mut()[i * p.per + k] = unit(&mut rng);
        }
    }
    let mut optim = OptimState::ascending(OptimizerConfig::adam(cfg.lr), std::slice::from_ref(&x));
    let original = p.batch;
    run_iterations(objective, &mut x, labels, checkpoints, p.unbatched, |x, g| {
        let mut masked = Tensor::zeros(g.dims());
        for (i, idx) in p.offsets.iter().enumerate() {
            for &k in idx {
                let j = i * p.per + k;
                masked.data_mut()[j] = g.data()[j];
            }
        }
        optim.step(std::slice::from_mut(x), &[Some(&masked)])?;
        let xd = x.data_mut();
        let od = original.data();
        let mut inside = vec![false; xd.len()];
        for (i, idx) in p.offsets.iter().enumerate() {
            for &k in idx {
                inside[i * p.per + k] = true;
            }
        }
        for (j, v) in xd.iter_mut().enumerate() {
            *v = if inside[j] { clip(*v, 0.0, 1.0) } else { od[j] };
        }
        Ok(())
    })
}

fn run_iterations<O: Objective + ?Sized>(
    objective: &O,
    x: &mut Tensor,
    labels: &[usize],
    checkpoints: &[usize],
    unbatched: bool,
    mut update: impl FnMut(&mut Tensor, &Tensor) -> Result<()>,
) -> Result<Vec<Adversarial>> {
    let last = checkpoints.iter().copied().max().unwrap_or(0);
    let mut out: Vec<Option<Adversarial>> = vec![None; checkpoints.len()];
    for t in 0..=last {
        let (losses, grad) = if t < last {
            let (l, g) = objective.losses_and_grad(x, labels)?;
            (l, Some(g))
        } else {
            (objective.losses(x, labels)?, None)
        };
        check_losses(&losses)?;
        for (slot, _) in out.iter_mut().zip(checkpoints).filter(|(_, &k)| k == t) {
            *slot = Some(Adversarial {
                images: restore_rank(x.clone(), unbatched)?,
                losses: losses.clone(),
            });
        }
        if let Some(g) = grad {
            update(x, &g)?;
        }
    }
    Ok(out.into_iter().map(|a| a.expect("every checkpoint reached")).collect())
}
