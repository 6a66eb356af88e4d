use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::as_batch;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingConfig {
    pub sigma: f64,
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SmoothingConfig {
    fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::config(format!(
                "smoothing sigma {} must be non-negative",
                self.sigma
            )));
        }
        if self.samples == 0 {
            return Err(Error::config("smoothing needs at least one noise sample"));
        }
        Ok(())
    }
}

/// Class vote counts `[N][classes]` of the base classifier under Gaussian
/// noise. Sample `m` of image `i` uses its own seed derived from `(i, m)`, so
/// votes do not depend on chunking. Noisy inputs are not clipped.
pub fn smoothed_votes<C: Classifier + ?Sized>(
    base: &C,
    images: &Tensor,
    cfg: &SmoothingConfig,
) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let (batch, _) = as_batch(images)?;
    let n = batch.dims()[0];
    let per = batch.len() / n.max(1);
    let mut dims = batch.dims().to_vec();
    let mut votes = vec![vec![0usize; base.classes()]; n];
    for (i, counts) in votes.iter_mut().enumerate() {
        let image = &batch.data()[i * per..(i + 1) * per];
        let image_seed = derive_seed(cfg.seed, i as u64);
        for start in (0..cfg.samples).step_by(CHUNK) {
            let end = (start + CHUNK).min(cfg.samples);
            let mut data = Vec::with_capacity((end - start) * per);
            for m in start..end {
                let mut rng = seeded(derive_seed(image_seed, m as u64));
                data.extend(image.iter().map(|&v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + cfg.sigma * z
                }));
            }
            dims[0] = end - start;
            for class in base.classify(&Tensor::new(dims.clone(), data)?)? {
                counts[class] += 1;
            }
        }
    }
    Ok(votes)
}

/// Plurality vote of [`smoothed_votes`], ties to the lowest class index.
pub fn smoothed_predict<C: Classifier + ?Sized>(
    base: &C,
    images: &Tensor,
    cfg: &SmoothingConfig,
) -> Result<Vec<usize>> {
    Ok(smoothed_votes(base, images, cfg)?
        .iter()
        .map(|counts| {
            let mut best = 0;
            for (k, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// A base classifier wrapped in randomized smoothing.
pub struct SmoothedClassifier<'a, C: Classifier + ?Sized> {
    pub base: &'a C,
    pub config: SmoothingConfig,
}

impl<C: Classifier + ?Sized> Classifier for SmoothedClassifier<'_, C> {
    fn classes(&self) -> usize {
        self.base.classes()
    }

    fn classify(&self, batch: &Tensor) -> Result<Vec<usize>> {
        smoothed_predict(self.base, batch, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Threshold;

    impl Classifier for Threshold {
        fn classes(&self) -> usize {
            2
        }

        fn classify(&self, batch: &Tensor) -> Result<Vec<usize>> {
            Ok(batch.data().iter().map(|&v| usize::from(v > 0.5)).collect())
        }
    }

    #[test]
    fn votes_sum_to_sample_count_and_ignore_chunking() {
        let x = Tensor::new(vec![2, 1, 1, 1], vec![0.5, 0.9]).unwrap();
        let cfg = SmoothingConfig {
            sigma: 0.25,
            samples: 150,
            seed: 3,
        };
        let v = smoothed_votes(&Threshold, &x, &cfg).unwrap();
        assert!(v.iter().all(|c| c.iter().sum::<usize>() == 150));
        let alone = smoothed_votes(&Threshold, &x.slice_outer(0).unwrap(), &cfg).unwrap();
        assert_eq!(alone[0], v[0]);
        assert_eq!(smoothed_predict(&Threshold, &x, &cfg).unwrap()[1], 1);
    }

    #[test]
    fn zero_sigma_is_the_base_classifier() {
        let x = Tensor::new(vec![3, 1, 1, 1], vec![0.1, 0.5, 0.7]).unwrap();
        let cfg = SmoothingConfig {
            sigma: 0.0,
            samples: 5,
            seed: 0,
        };
        assert_eq!(smoothed_predict(&Threshold, &x, &cfg).unwrap(), vec![0, 0, 1]);
    }
}
