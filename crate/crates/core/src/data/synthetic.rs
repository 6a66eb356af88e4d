//! Procedural traffic-sign-like glyphs.
//!
//! Image `i` (numbered `j · classes + c` for example `j` of class `c`) is
//! drawn from its own SplitMix64 stream seeded with `derive_seed(seed, i)`.
//! Per image, in order: background grey level and three channel tints,
//! three foreground colour jitters, centre row/column jitter, radius scale,
//! then one noise draw per pixel in `[C, H, W]` order. Every draw is
//! `(next_u64 >> 11) · 2⁻⁵³`, so the output is fixed by the seed alone.

use serde::{Deserialize, Serialize};

use super::{default_class_names, Dataset, Split};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Additive uniform noise amplitude.
const NOISE: f64 = 0.05;

const PALETTE: [[f64; 3]; 4] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.25, 0.85],
    [0.90, 0.85, 0.10],
    [0.10, 0.70, 0.20],
];

const SHAPES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            seed: 42,
            classes: 16,
            per_class: 100,
            side: 32,
        }
    }
}

/// Train/validation/test partitions of one generated set.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SplitDataset {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Balanced RGB glyph dataset. Example `j` of each class goes to train when
/// `j < 70%·per_class`, to validation below `90%`, otherwise to test; each
/// split lists examples by `j`, then by class.
pub fn gen_synthetic_signs(seed: u64, classes: usize, per_class: usize, side: usize) -> Result<SplitDataset> {
    if !(2..=32).contains(&classes) {
        return Err(Error::config(format!("classes must be in [2, 32], got {classes}")));
    }
    if ![16, 32, 64].contains(&side) {
        return Err(Error::config(format!("side must be 16, 32 or 64, got {side}")));
    }
    if per_class == 0 {
        return Err(Error::config("per_class must be positive"));
    }
    let n_train = per_class * 7 / 10;
    let n_val = per_class * 9 / 10 - n_train;
    let names = default_class_names(classes);
    let per_image = 3 * side * side;

    let build = |range: std::ops::Range<usize>, split: Split| -> Result<Dataset> {
        let count = range.len() * classes;
        let mut data = Vec::with_capacity(count * per_image);
        let mut labels = Vec::with_capacity(count);
        for j in range {
            for c in 0..classes {
                let index = (j * classes + c) as u64;
                data.extend(render(rng::derive_seed(seed, index), c, side));
                labels.push(c);
            }
        }
        Dataset::new(
            Tensor::new(vec![count, 3, side, side], data)?,
            labels,
            names.clone(),
            split,
        )
    };
    Ok(SplitDataset {
        train: build(0..n_train, Split::Train)?,
        val: build(n_train..n_train + n_val, Split::Val)?,
        test: build(n_train + n_val..per_class, Split::Test)?,
    })
}

fn inside(shape: usize, dx: f64, dy: f64) -> bool {
    match shape {
        // disc
        0 => dx * dx + dy * dy <= 1.0,
        // square
        1 => dx.abs() <= 0.8 && dy.abs() <= 0.8,
        // upward triangle
        2 => (-1.0..=0.8).contains(&dy) && dx.abs() <= 0.55 * (dy + 1.0),
        // downward triangle
        3 => (-0.8..=1.0).contains(&dy) && dx.abs() <= 0.55 * (1.0 - dy),
        // diamond
        4 => dx.abs() + dy.abs() <= 1.0,
        // horizontal bar
        5 => dx.abs() <= 1.0 && dy.abs() <= 0.38,
        // vertical bar
        6 => dx.abs() <= 0.38 && dy.abs() <= 1.0,
        // plus
        _ => (dx.abs() <= 0.3 && dy.abs() <= 1.0) || (dy.abs() <= 0.3 && dx.abs() <= 1.0),
    }
}

fn render(seed: u64, class: usize, side: usize) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    let s = side as f64;
    let grey = rng::uniform(&mut r, 0.3, 0.6);
    let background: [f64; 3] = std::array::from_fn(|_| grey + rng::uniform(&mut r, -0.06, 0.06));
    let base = PALETTE[(class / SHAPES) % PALETTE.len()];
    let foreground: [f64; 3] = std::array::from_fn(|ch| base[ch] + rng::uniform(&mut r, -0.05, 0.05));
    let jitter = s / 10.0;
    let cy = s / 2.0 + rng::uniform(&mut r, -jitter, jitter);
    let cx = s / 2.0 + rng::uniform(&mut r, -jitter, jitter);
    let radius = s * 0.3 * rng::uniform(&mut r, 0.85, 1.1);
    let shape = class % SHAPES;

    let mut out = Vec::with_capacity(3 * side * side);
    for ch in 0..3 {
        for y in 0..side {
            for x in 0..side {
                let dy = (y as f64 + 0.5 - cy) / radius;
                let dx = (x as f64 + 0.5 - cx) / radius;
                let v = if inside(shape, dx, dy) {
                    foreground[ch]
                } else {
                    background[ch]
                };
                let noisy = v + rng::uniform(&mut r, -NOISE, NOISE);
                out.push(noisy.clamp(0.0, 1.0));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_follow_seventy_twenty_ten() {
        let d = gen_synthetic_signs(3, 16, 10, 16).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (112, 32, 16));
        assert_eq!(d.train.split(), Split::Train);
    }

    #[test]
    fn parameters_are_validated() {
        assert!(matches!(gen_synthetic_signs(0, 1, 10, 32), Err(Error::Config(_))));
        assert!(matches!(gen_synthetic_signs(0, 33, 10, 32), Err(Error::Config(_))));
        assert!(matches!(gen_synthetic_signs(0, 4, 10, 24), Err(Error::Config(_))));
    }

    #[test]
    fn classes_are_balanced_and_interleaved() {
        let d = gen_synthetic_signs(0, 4, 10, 16).unwrap();
        assert_eq!(&d.train.labels()[..8], &[0, 1, 2, 3, 0, 1, 2, 3]);
        for c in 0..4 {
            assert_eq!(d.test.labels().iter().filter(|&&l| l == c).count(), 1);
        }
    }
}
