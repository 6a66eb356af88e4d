use super::{as_batch, check_losses, image_dims, restore_rank, sign, Adversarial, AttackBudget, Norm, Objective};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tape::clip;
use crate::tensor::Tensor;

/// Which pixels of each example an attack may change.
#[derive(Clone, Debug, Default)]
pub enum MaskSet {
    #[default]
    All,
    Shared(Mask),
    PerExample(Vec<Mask>),
}

impl MaskSet {
    /// Attackable flat offsets within one `[C, H, W]` image, per example.
    pub(crate) fn offsets(&self, n: usize, c: usize, h: usize, w: usize) -> Result<Vec<Vec<usize>>> {
        match self {
            MaskSet::All => Ok(vec![(0..c * h * w).collect(); n]),
            MaskSet::Shared(m) => {
                m.check_spatial(h, w)?;
                Ok(vec![m.element_indices(c); n])
            }
            MaskSet::PerExample(ms) => {
                if ms.len() != n {
                    return Err(Error::shape(format!("{} masks for {n} examples", ms.len())));
                }
                ms.iter()
                    .map(|m| {
                        m.check_spatial(h, w)?;
                        Ok(m.element_indices(c))
                    })
                    .collect()
            }
        }
    }
}

/// Projected gradient ascent around `images`, confined to `masks`.
pub fn pgd<O: Objective + ?Sized>(
    objective: &O,
    images: &Tensor,
    labels: &[usize],
    budget: &AttackBudget,
    masks: &MaskSet,
) -> Result<Adversarial> {
    let mut runs = pgd_snapshots(objective, images, None, labels, budget, masks, &[budget.iterations])?;
    Ok(runs.pop().expect("one checkpoint"))
}

/// Run PGD once for `max(checkpoints)` iterations and report the result a
/// run of each checkpoint length would have returned. `start` defaults to
/// `images`; the ε-ball is always centred on `images`.
pub fn pgd_snapshots<O: Objective + ?Sized>(
    objective: &O,
    images: &Tensor,
    start: Option<&Tensor>,
    labels: &[usize],
    budget: &AttackBudget,
    masks: &MaskSet,
    checkpoints: &[usize],
) -> Result<Vec<Adversarial>> {
    budget.validate()?;
    let (center, unbatched) = as_batch(images)?;
    let mut x = match start {
        Some(s) => {
            let (s, _) = as_batch(s)?;
            s.same_dims(&center)?;
            s
        }
        None => center.clone(),
    };
    let (n, c, h, w) = image_dims(&center);
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} images", labels.len())));
    }
    let offsets = masks.offsets(n, c, h, w)?;
    let per = c * h * w;
    let last = checkpoints.iter().copied().max().unwrap_or(0);

    let mut best = x.clone();
    let mut best_loss = vec![f64::NEG_INFINITY; n];
    let mut out: Vec<Option<Adversarial>> = vec![None; checkpoints.len()];
    for t in 0..=last {
        let (losses, grad) = if t < last {
            let (l, g) = objective.losses_and_grad(&x, labels)?;
            (l, Some(g))
        } else {
            (objective.losses(&x, labels)?, None)
        };
        check_losses(&losses)?;
        if budget.keep_best {
            for i in 0..n {
                if losses[i] > best_loss[i] {
                    best_loss[i] = losses[i];
                    best.data_mut()[i * per..(i + 1) * per].copy_from_slice(&x.data()[i * per..(i + 1) * per]);
                }
            }
        }
        for (slot, _) in out.iter_mut().zip(checkpoints).filter(|(_, &k)| k == t) {
            let (images, losses) = if budget.keep_best {
                (best.clone(), best_loss.clone())
            } else {
                (x.clone(), losses.clone())
            };
            *slot = Some(Adversarial {
                images: restore_rank(images, unbatched)?,
                losses,
            });
        }
        if let Some(g) = grad {
            step(&mut x, &center, &g, &offsets, budget);
        }
    }
    Ok(out.into_iter().map(|a| a.expect("every checkpoint reached")).collect())
}

fn step(x: &mut Tensor, center: &Tensor, g: &Tensor, offsets: &[Vec<usize>], budget: &AttackBudget) {
    let per = x.len() / offsets.len().max(1);
    let eps = budget.epsilon;
    let alpha = budget.step;
    let (xd, cd, gd) = (x.data_mut(), center.data(), g.data());
    for (i, idx) in offsets.iter().enumerate() {
        let base = i * per;
        match budget.norm {
            Norm::Inf => {
                for &k in idx {
                    let j = base + k;
                    let v = xd[j] + alpha * sign(gd[j]);
                    let v = clip(v, cd[j] - eps, cd[j] + eps);
                    xd[j] = clip(v, 0.0, 1.0);
                }
            }
            Norm::Two => {
                let norm = idx.iter().map(|&k| gd[base + k] * gd[base + k]).sum::<f64>().sqrt();
                if norm == 0.0 {
                    continue;
                }
                for &k in idx {
                    xd[base + k] += alpha * gd[base + k] / norm;
                }
                let dn = idx
                    .iter()
                    .map(|&k| {
                        let d = xd[base + k] - cd[base + k];
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt();
                let scale = if dn > eps { eps / dn } else { 1.0 };
                for &k in idx {
                    let j = base + k;
                    let d = (xd[j] - cd[j]) * scale;
                    xd[j] = clip(cd[j] + d, 0.0, 1.0);
                }
            }
        }
    }
}
