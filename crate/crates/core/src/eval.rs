//! Accuracy under attack, swept over an attack-strength grid.

use rayon::prelude::*;
use tracing::debug;

use crate::attacks::{
    eyeglass_attack, patch_apply, patch_evaluate, patch_train, pgd_snapshots, roa_snapshots, sticker_attack,
    AttackBudget, EyeglassConfig, MaskSet, ModelLoss, PatchConfig, PatchPlacement, RoaConfig, StickerConfig,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{fraction_correct, Classifier, ModelParams};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Examples attacked together. Fixed so results do not depend on the
/// number of worker threads.
const EVAL_CHUNK: usize = 16;

#[derive(Clone, Debug)]
pub enum Attack {
    Pgd(AttackBudget),
    Roa(RoaConfig),
    Eyeglass { mask: Mask, config: EyeglassConfig },
    Sticker { mask: Mask, config: StickerConfig },
    Patch(PatchConfig),
}

impl Attack {
    pub fn name(&self) -> &'static str {
        match self {
            Attack::Pgd(_) => "pgd",
            Attack::Roa(_) => "roa",
            Attack::Eyeglass { .. } => "eyeglass",
            Attack::Sticker { .. } => "sticker",
            Attack::Patch(_) => "patch",
        }
    }

    /// What the sweep grid varies.
    pub fn param(&self) -> &'static str {
        match self {
            Attack::Patch(_) => "fraction",
            _ => "iterations",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub accuracy: f64,
}

/// Accuracy of `judge` on `data` attacked through `target` at each grid
/// value. A grid value of zero means the unattacked data. Patches are
/// trained on the non-target images of `design`.
pub fn sweep<C: Classifier + Sync + ?Sized>(
    judge: &C,
    target: &ModelParams,
    data: &Dataset,
    attack: &Attack,
    grid: &[f64],
    design: Option<&Dataset>,
) -> Result<Vec<SweepPoint>> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    if let Attack::Patch(cfg) = attack {
        return patch_sweep(judge, target, data, cfg, grid, design);
    }
    let mut iterations = Vec::with_capacity(grid.len());
    for &v in grid {
        if !(v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
            return Err(Error::config(format!(
                "iteration count {v} is not a non-negative integer"
            )));
        }
        iterations.push(v as usize);
    }
    let n = data.len();
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let per_chunk: Vec<Vec<usize>> = starts
        .par_iter()
        .map(|&start| {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let (x, y) = data.batch(&idx)?;
            let attacked = attack_chunk(target, &x, &y, attack, &iterations, start as u64)?;
            attacked
                .iter()
                .map(|adv| {
                    let predicted = judge.classify(adv)?;
                    Ok(predicted.iter().zip(&y).filter(|(p, l)| p == l).count())
                })
                .collect::<Result<Vec<usize>>>()
        })
        .collect::<Result<_>>()?;
    let points = grid
        .iter()
        .enumerate()
        .map(|(k, &value)| SweepPoint {
            value,
            accuracy: per_chunk.iter().map(|c| c[k]).sum::<usize>() as f64 / n as f64,
        })
        .collect();
    debug!(attack = attack.name(), ?points, "sweep finished");
    Ok(points)
}

/// The attacked version of every image in `data` at one strength, in
/// dataset order. Patches are pasted on every image, target class included.
pub fn attacked_images(
    target: &ModelParams,
    data: &Dataset,
    attack: &Attack,
    strength: f64,
    design: Option<&Dataset>,
) -> Result<Tensor> {
    if let Attack::Patch(cfg) = attack {
        let design = design.ok_or_else(|| Error::contract("patch attacks need a design set"))?;
        let design = design.without_class(cfg.target)?;
        let c = PatchConfig {
            fraction: strength,
            ..*cfg
        };
        let patch = patch_train(&ModelLoss::targeted(target), design.images(), &c)?;
        let [_, h, w] = data.image_dims();
        let side = patch.dims()[1];
        let seed = derive_seed(cfg.seed, 1);
        let pasted = (0..data.len())
            .map(|i| {
                let mut rng = crate::rng::seeded(derive_seed(seed, i as u64));
                let at = PatchPlacement::random(&mut rng, side, h, w);
                patch_apply(&data.image(i)?, &patch, at)
            })
            .collect::<Result<Vec<_>>>()?;
        return Tensor::stack_outer(&pasted);
    }
    if !(strength >= 0.0 && strength.fract() == 0.0) {
        return Err(Error::config(format!(
            "iteration count {strength} is not a non-negative integer"
        )));
    }
    let n = data.len();
    let parts = (0..n)
        .step_by(EVAL_CHUNK)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&start| {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let (x, y) = data.batch(&idx)?;
            let mut runs = attack_chunk(target, &x, &y, attack, &[strength as usize], start as u64)?;
            Ok(runs.pop().expect("one strength"))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_outer(&parts)
}

fn attack_chunk(
    target: &ModelParams,
    x: &Tensor,
    y: &[usize],
    attack: &Attack,
    iterations: &[usize],
    chunk_seed: u64,
) -> Result<Vec<Tensor>> {
    let objective = ModelLoss::untargeted(target);
    let runs: Vec<Tensor> = match attack {
        Attack::Pgd(budget) => pgd_snapshots(&objective, x, None, y, budget, &MaskSet::All, iterations)?
            .into_iter()
            .map(|a| a.images)
            .collect(),
        Attack::Roa(cfg) => roa_snapshots(&objective, x, y, cfg, iterations)?
            .into_iter()
            .map(|o| o.adversarial.images)
            .collect(),
        Attack::Eyeglass { mask, config } => {
            let config = EyeglassConfig {
                seed: derive_seed(config.seed, chunk_seed),
                ..*config
            };
            eyeglass_attack(&objective, x, y, &MaskSet::Shared(mask.clone()), &config, iterations)?
                .into_iter()
                .map(|a| a.images)
                .collect()
        }
        Attack::Sticker { mask, config } => {
            let config = StickerConfig {
                seed: derive_seed(config.seed, chunk_seed),
                ..*config
            };
            sticker_attack(&objective, x, y, &MaskSet::Shared(mask.clone()), &config, iterations)?
                .into_iter()
                .map(|a| a.images)
                .collect()
        }
        Attack::Patch(_) => unreachable!("patches are swept separately"),
    };
    Ok(runs
        .into_iter()
        .zip(iterations)
        .map(|(adv, &k)| if k == 0 { x.clone() } else { adv })
        .collect())
}

fn patch_sweep<C: Classifier + Sync + ?Sized>(
    judge: &C,
    target: &ModelParams,
    data: &Dataset,
    cfg: &PatchConfig,
    grid: &[f64],
    design: Option<&Dataset>,
) -> Result<Vec<SweepPoint>> {
    let design = design.ok_or_else(|| Error::contract("patch sweeps need a design set"))?;
    let design = design.without_class(cfg.target)?;
    let objective = ModelLoss::targeted(target);
    grid.iter()
        .map(|&fraction| {
            let accuracy = if fraction == 0.0 {
                fraction_correct(&judge.classify(data.images())?, data.labels())
            } else {
                let c = PatchConfig { fraction, ..*cfg };
                let patch = patch_train(&objective, design.images(), &c)?;
                patch_evaluate(judge, data, &patch, derive_seed(cfg.seed, 1))?
            };
            Ok(SweepPoint {
                value: fraction,
                accuracy,
            })
        })
        .collect()
}
