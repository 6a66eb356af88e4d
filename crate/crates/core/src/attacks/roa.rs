use serde::{Deserialize, Serialize};

use super::{
    as_batch, check_losses, image_dims, pgd_snapshots, restore_rank, Adversarial, AttackBudget, MaskSet, Objective,
};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

/// Fill value of the rectangle before optimization.
pub const GREY: f64 = 0.5;

/// How the rectangle position is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Search {
    /// Grey-fill every placement and keep the worst.
    Exhaustive,
    /// Grey-fill only the placements with the largest input-gradient energy.
    #[default]
    Gradient,
}

/// Rectangular occlusion attack settings. `step` is on the unit scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RoaFile", into = "RoaFile")]
pub struct RoaConfig {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub candidates: usize,
    pub search: Search,
    pub iterations: usize,
    pub step: f64,
}

impl RoaConfig {
    /// `height × width` rectangle with stride 2, 10 candidates, gradient
    /// search and 30 inner iterations.
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            stride: 2,
            candidates: 10,
            search: Search::Gradient,
            iterations: 30,
            step: default_step_255(30) / 255.0,
        }
    }

    pub fn with_iterations(self, iterations: usize) -> Self {
        Self {
            iterations,
            step: default_step_255(iterations) / 255.0,
            ..self
        }
    }

    pub fn with_search(self, search: Search) -> Self {
        Self { search, ..self }
    }

    /// The inner l∞ attack: radius 0.5 around the grey-filled image.
    pub fn inner_budget(&self) -> AttackBudget {
        AttackBudget::linf(GREY, self.step, self.iterations)
    }

    pub fn validate(&self, image_h: usize, image_w: usize) -> Result<()> {
        if self.height > image_h || self.width > image_w {
            return Err(Error::config(format!(
                "{}×{} rectangle does not fit a {image_h}×{image_w} image",
                self.height, self.width
            )));
        }
        if self.stride == 0 {
            return Err(Error::config("ROA stride must be at least 1"));
        }
        if self.candidates == 0 {
            return Err(Error::config("ROA needs at least one candidate"));
        }
        self.inner_budget().validate()
    }
}

/// Default inner step (0–255 scale) for a given iteration count.
pub(crate) fn default_step_255(iterations: usize) -> f64 {
    match iterations {
        0..=7 => 32.0,
        8..=20 => 16.0,
        21..=30 => 8.0,
        _ => 4.0,
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoaFile {
    height: usize,
    width: usize,
    #[serde(default = "default_stride")]
    stride: usize,
    #[serde(default = "default_candidates")]
    candidates: usize,
    #[serde(default)]
    search: Search,
    #[serde(default = "default_iterations")]
    iterations: usize,
    /// 0–255 scale.
    #[serde(default)]
    step: Option<f64>,
}

fn default_stride() -> usize {
    2
}

fn default_candidates() -> usize {
    10
}

fn default_iterations() -> usize {
    30
}

impl TryFrom<RoaFile> for RoaConfig {
    type Error = Error;

    fn try_from(f: RoaFile) -> Result<Self> {
        let c = Self {
            height: f.height,
            width: f.width,
            stride: f.stride,
            candidates: f.candidates,
            search: f.search,
            iterations: f.iterations,
            step: f.step.unwrap_or_else(|| default_step_255(f.iterations)) / 255.0,
        };
        if c.stride == 0 || c.candidates == 0 {
            return Err(Error::config("ROA stride and candidates must be at least 1"));
        }
        c.inner_budget().validate()?;
        Ok(c)
    }
}

impl From<RoaConfig> for RoaFile {
    fn from(c: RoaConfig) -> Self {
        Self {
            height: c.height,
            width: c.width,
            stride: c.stride,
            candidates: c.candidates,
            search: c.search,
            iterations: c.iterations,
            step: Some(c.step * 255.0),
        }
    }
}

/// Chosen top-left corner and the grey-fill loss there.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoaPlacement {
    pub row: usize,
    pub col: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct RoaOutcome {
    pub adversarial: Adversarial,
    pub placements: Vec<RoaPlacement>,
}

/// Every fully contained top-left corner on the stride grid, row-major.
pub fn placements(image_h: usize, image_w: usize, cfg: &RoaConfig) -> Result<Vec<(usize, usize)>> {
    cfg.validate(image_h, image_w)?;
    let rows = (image_h - cfg.height) / cfg.stride;
    let cols = (image_w - cfg.width) / cfg.stride;
    Ok((0..=rows)
        .flat_map(|j| (0..=cols).map(move |k| (j * cfg.stride, k * cfg.stride)))
        .collect())
}

/// Copy of `image` with an `h × w` grey rectangle at `(row, col)` in every
/// channel. Accepts `[C, H, W]` or `[1, C, H, W]`.
pub fn grey_fill(image: &Tensor, row: usize, col: usize, h: usize, w: usize) -> Result<Tensor> {
    let (batch, unbatched) = as_batch(image)?;
    let (n, c, ih, iw) = image_dims(&batch);
    if row + h > ih || col + w > iw {
        return Err(Error::Bounds(format!(
            "{h}×{w} rectangle at ({row}, {col}) leaves the {ih}×{iw} image"
        )));
    }
    let mut out = batch;
    let d = out.data_mut();
    for plane in 0..n * c {
        for y in row..row + h {
            let start = plane * ih * iw + y * iw + col;
            d[start..start + w].fill(GREY);
        }
    }
    restore_rank(out, unbatched)
}

fn single(image: &Tensor) -> Result<Tensor> {
    let (b, _) = as_batch(image)?;
    if b.dims()[0] != 1 {
        return Err(Error::shape(format!(
            "expected one image, got a batch of {}",
            b.dims()[0]
        )));
    }
    Ok(b)
}

fn best_of<O: Objective + ?Sized>(
    objective: &O,
    image: &Tensor,
    label: usize,
    cfg: &RoaConfig,
    corners: &[(usize, usize)],
) -> Result<RoaPlacement> {
    let filled: Vec<Tensor> = corners
        .iter()
        .map(|&(r, c)| grey_fill(image, r, c, cfg.height, cfg.width))
        .collect::<Result<_>>()?;
    let batch = Tensor::stack_outer(&filled)?;
    let losses = objective.losses(&batch, &vec![label; corners.len()])?;
    check_losses(&losses)?;
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l > losses[best] {
            best = i;
        }
    }
    Ok(RoaPlacement {
        row: corners[best].0,
        col: corners[best].1,
        loss: losses[best],
    })
}

/// Worst grey-filled placement over the whole stride grid. Ties go to the
/// first placement in row-major order.
pub fn roa_exhaustive_position<O: Objective + ?Sized>(
    objective: &O,
    image: &Tensor,
    label: usize,
    cfg: &RoaConfig,
) -> Result<RoaPlacement> {
    let image = single(image)?;
    let (_, _, h, w) = image_dims(&image);
    let corners = placements(h, w, cfg)?;
    best_of(objective, &image, label, cfg, &corners)
}

/// Rank placements by the squared input gradient under the rectangle, then
/// grey-fill only the top `cfg.candidates`.
pub fn roa_gradient_positions<O: Objective + ?Sized>(
    objective: &O,
    image: &Tensor,
    label: usize,
    cfg: &RoaConfig,
) -> Result<RoaPlacement> {
    let image = single(image)?;
    let (_, c, h, w) = image_dims(&image);
    let corners = placements(h, w, cfg)?;
    let (_, grad) = objective.losses_and_grad(&image, &[label])?;
    let mut energy = vec![0.0; h * w];
    for ch in 0..c {
        for (e, g) in energy.iter_mut().zip(&grad.data()[ch * h * w..(ch + 1) * h * w]) {
            *e += g * g;
        }
    }
    let scores: Vec<f64> = corners
        .iter()
        .map(|&(r, col)| {
            (r..r + cfg.height)
                .map(|y| energy[y * w + col..y * w + col + cfg.width].iter().sum::<f64>())
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..corners.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(cfg.candidates);
    order.sort_unstable();
    let chosen: Vec<(usize, usize)> = order.iter().map(|&i| corners[i]).collect();
    best_of(objective, &image, label, cfg, &chosen)
}

/// Full ROA: choose a position per example, grey-fill it, then run masked
/// l∞ PGD inside the rectangle.
pub fn roa_attack<O: Objective + ?Sized>(
    objective: &O,
    images: &Tensor,
    labels: &[usize],
    cfg: &RoaConfig,
) -> Result<RoaOutcome> {
    let mut runs = roa_snapshots(objective, images, labels, cfg, &[cfg.iterations])?;
    Ok(runs.pop().expect("one checkpoint"))
}

/// [`roa_attack`] reporting the result after each requested number of
/// inner iterations from a single run.
pub fn roa_snapshots<O: Objective + ?Sized>(
    objective: &O,
    images: &Tensor,
    labels: &[usize],
    cfg: &RoaConfig,
    checkpoints: &[usize],
) -> Result<Vec<RoaOutcome>> {
    let (batch, unbatched) = as_batch(images)?;
    let (n, _, h, w) = image_dims(&batch);
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} images", labels.len())));
    }
    cfg.validate(h, w)?;
    let mut found = Vec::with_capacity(n);
    let mut filled = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let image = batch.slice_outer(i)?;
        let p = match cfg.search {
            Search::Exhaustive => roa_exhaustive_position(objective, &image, label, cfg)?,
            Search::Gradient => roa_gradient_positions(objective, &image, label, cfg)?,
        };
        filled.push(grey_fill(&image, p.row, p.col, cfg.height, cfg.width)?);
        masks.push(Mask::rect(h, w, p.row, p.col, cfg.height, cfg.width)?);
        found.push(p);
    }
    let filled = Tensor::stack_outer(&filled)?;
    let runs = pgd_snapshots(
        objective,
        &filled,
        None,
        labels,
        &cfg.inner_budget(),
        &MaskSet::PerExample(masks),
        checkpoints,
    )?;
    runs.into_iter()
        .map(|a| {
            Ok(RoaOutcome {
                adversarial: Adversarial {
                    images: restore_rank(a.images, unbatched)?,
                    losses: a.losses,
                },
                placements: found.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::toy::Linear;
    use super::*;

    #[test]
    fn placement_grid_is_row_major_and_contained() {
        let cfg = RoaConfig {
            stride: 3,
            ..RoaConfig::new(2, 3)
        };
        let p = placements(7, 8, &cfg).unwrap();
        assert_eq!(p, vec![(0, 0), (0, 3), (3, 0), (3, 3)]);
        assert_eq!(placements(32, 32, &RoaConfig::new(7, 7)).unwrap().len(), 169);
        assert!(placements(4, 4, &RoaConfig::new(5, 1)).is_err());
    }

    #[test]
    fn grey_fill_only_touches_the_rectangle() {
        let x = Tensor::zeros(&[2, 3, 3]);
        let y = grey_fill(&x, 1, 1, 2, 1).unwrap();
        let greys: Vec<usize> = y
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == GREY)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(greys, vec![4, 7, 13, 16]);
    }

    #[test]
    fn exhaustive_picks_the_heaviest_window() {
        // loss = w · x on a 1×3×3 image; darkest corner to grey raises it most
        let mut weights = vec![0.0; 9];
        weights[8] = 1.0;
        let obj = Linear { weights };
        let x = Tensor::zeros(&[1, 1, 3, 3]);
        let cfg = RoaConfig {
            stride: 1,
            ..RoaConfig::new(2, 2)
        };
        let p = roa_exhaustive_position(&obj, &x, 0, &cfg).unwrap();
        assert_eq!((p.row, p.col, p.loss), (1, 1, 0.5));
        let g = roa_gradient_positions(&obj, &x, 0, &RoaConfig { candidates: 1, ..cfg }).unwrap();
        assert_eq!(g, p);
    }

    #[test]
    fn ties_go_to_the_first_placement() {
        let obj = Linear { weights: vec![0.0; 9] };
        let x = Tensor::zeros(&[1, 1, 3, 3]);
        let cfg = RoaConfig {
            stride: 1,
            ..RoaConfig::new(2, 2)
        };
        let p = roa_exhaustive_position(&obj, &x, 0, &cfg).unwrap();
        assert_eq!((p.row, p.col), (0, 0));
    }

    #[test]
    fn empty_rectangle_leaves_image_unchanged() {
        let obj = Linear { weights: vec![1.0; 9] };
        let x = Tensor::full(&[1, 1, 3, 3], 0.25);
        let r = roa_attack(&obj, &x, &[0], &RoaConfig::new(0, 0)).unwrap();
        assert_eq!(r.adversarial.images, x);
    }
}
