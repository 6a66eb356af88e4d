// Independent reference computations for the attack tests: plain-loop
// linear logits, cross-entropy, and brute-force rectangle enumeration.

use occludox::attacks::{
    eyeglass_attack, pgd, roa_attack, roa_exhaustive_position, roa_gradient_positions, sticker_attack, AttackBudget,
    EyeglassConfig, MaskSet, ModelLoss, Norm, RoaConfig, Search, StickerConfig, GREY,
};
use occludox::rng::{below, seeded, uniform, SplitMix64};
use occludox::{ConvNetSpec, Mask, ModelParams, Tensor};

/// A single dense layer from a `[c, h, w]` image to `classes` logits.
pub fn toy_linear(rng: &mut SplitMix64, c: usize, h: usize, w: usize, classes: usize) -> ModelParams {
    let spec = ConvNetSpec::linear([c, h, w], classes);
    let named = spec
        .param_shapes()
        .unwrap()
        .into_iter()
        .map(|(name, dims)| {
            let n = dims.iter().product();
            (
                name,
                Tensor::new(dims, (0..n).map(|_| uniform(rng, -1.0, 1.0)).collect()).unwrap(),
            )
        })
        .collect();
    ModelParams::from_named(spec, named).unwrap()
}

pub fn random_image(rng: &mut SplitMix64, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| uniform(rng, 0.0, 1.0)).collect()).unwrap()
}

/// Cross-entropy of one image under a linear model, computed with plain
/// loops.
pub fn linear_ce(params: &ModelParams, image: &[f64], label: usize) -> f64 {
    let w = params.tensors()[0].data();
    let b = params.tensors()[1].data();
    let d = image.len();
    let logits: Vec<f64> = (0..b.len())
        .map(|k| b[k] + (0..d).map(|j| w[k * d + j] * image[j]).sum::<f64>())
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Every stride-aligned placement grey-filled and scored, keeping the first
/// maximum in row-major order.
pub fn enumerate_roa(
    params: &ModelParams,
    image: &Tensor,
    label: usize,
    rh: usize,
    rw: usize,
    stride: usize,
) -> (usize, usize, f64) {
    let &[c, h, w] = image.dims() else {
        panic!("rank 3 image")
    };
    let mut best = (0, 0, f64::NEG_INFINITY);
    let mut r = 0;
    while r + rh <= h {
        let mut col = 0;
        while col + rw <= w {
            let mut x = image.data().to_vec();
            for ch in 0..c {
                for y in r..r + rh {
                    for xx in col..col + rw {
                        x[(ch * h + y) * w + xx] = GREY;
                    }
                }
            }
            let loss = linear_ce(params, &x, label);
            if loss > best.2 {
                best = (r, col, loss);
            }
            col += stride;
        }
        r += stride;
    }
    best
}

#[derive(Debug, Default)]
pub struct SearchReport {
    pub pairs: usize,
    pub gradient_mismatches: usize,
    pub oracle_mismatches: usize,
    pub worst_oracle_gap: f64,
}

/// Saturated gradient search against exhaustive search, and exhaustive
/// search against [`enumerate_roa`], on seeded toy problems.
pub fn search_equivalence(pairs: usize, seed: u64) -> SearchReport {
    let mut report = SearchReport::default();
    for p in 0..pairs {
        let mut rng = seeded(seed.wrapping_add(p as u64));
        let (c, h, w) = (1 + below(&mut rng, 3), 5 + below(&mut rng, 6), 5 + below(&mut rng, 6));
        let classes = 2 + below(&mut rng, 4);
        let params = toy_linear(&mut rng, c, h, w, classes);
        let image = random_image(&mut rng, &[c, h, w]);
        let label = below(&mut rng, classes);
        let mut cfg = RoaConfig::new(1 + below(&mut rng, 3), 1 + below(&mut rng, 3));
        cfg.stride = 1 + below(&mut rng, 2);
        let total = occludox::attacks::placements(h, w, &cfg).unwrap().len();
        cfg.candidates = total;
        let objective = ModelLoss::untargeted(&params);
        let exhaustive = roa_exhaustive_position(&objective, &image, label, &cfg).unwrap();
        let guided = roa_gradient_positions(&objective, &image, label, &cfg).unwrap();
        if guided.row != exhaustive.row
            || guided.col != exhaustive.col
            || guided.loss.to_bits() != exhaustive.loss.to_bits()
        {
            report.gradient_mismatches += 1;
        }
        let (row, col, loss) = enumerate_roa(&params, &image, label, cfg.height, cfg.width, cfg.stride);
        let gap = (loss - exhaustive.loss).abs() / loss.abs().max(1.0);
        report.worst_oracle_gap = report.worst_oracle_gap.max(gap);
        if row != exhaustive.row || col != exhaustive.col || gap > 1e-12 {
            report.oracle_mismatches += 1;
        }
        report.pairs += 1;
    }
    report
}

#[derive(Debug, Default)]
pub struct ConfinementReport {
    pub runs: usize,
    pub out_of_mask_changes: usize,
    pub budget_violations: usize,
    pub range_violations: usize,
}

fn random_mask(rng: &mut SplitMix64, h: usize, w: usize) -> Mask {
    // Never empty: the physical attacks refuse empty masks.
    let density = uniform(rng, 0.0, 1.0);
    let mut cells: Vec<bool> = (0..h * w).map(|_| uniform(rng, 0.0, 1.0) < density).collect();
    cells[below(rng, h * w)] = true;
    Mask::new(h, w, cells).unwrap()
}

/// Randomized masked attacks on toy models, counting any pixel changed
/// outside its mask, any budget overrun, and any value outside `[0, 1]`.
pub fn confinement(runs: usize, seed: u64) -> ConfinementReport {
    const TOL: f64 = 1e-12;
    let mut report = ConfinementReport::default();
    for run in 0..runs {
        let mut rng = seeded(seed.wrapping_add(run as u64));
        let (c, h, w) = (1 + below(&mut rng, 3), 4 + below(&mut rng, 5), 4 + below(&mut rng, 5));
        let n = 1 + below(&mut rng, 3);
        let classes = 2 + below(&mut rng, 3);
        let params = toy_linear(&mut rng, c, h, w, classes);
        let images = random_image(&mut rng, &[n, c, h, w]);
        let labels: Vec<usize> = (0..n).map(|_| below(&mut rng, classes)).collect();
        let masks: Vec<Mask> = (0..n).map(|_| random_mask(&mut rng, h, w)).collect();
        let objective = ModelLoss::untargeted(&params);
        let iterations = 1 + below(&mut rng, 6);
        let kind = run % 5;
        let (adv, linf, l2) = match kind {
            0 | 1 => {
                let eps = uniform(&mut rng, 0.0, 0.3);
                let step = uniform(&mut rng, 0.01, 0.2);
                let budget = if kind == 0 {
                    AttackBudget::linf(eps, step, iterations)
                } else {
                    AttackBudget::l2(eps, step, iterations)
                };
                let set = MaskSet::PerExample(masks.clone());
                let adv = pgd(&objective, &images, &labels, &budget, &set).unwrap().images;
                match budget.norm {
                    Norm::Inf => (adv, Some(eps), None),
                    Norm::Two => (adv, None, Some(eps)),
                }
            }
            2 => {
                let cfg = EyeglassConfig {
                    iterations,
                    colors: 2,
                    seed: run as u64,
                    ..EyeglassConfig::default()
                };
                let set = MaskSet::PerExample(masks.clone());
                let adv = eyeglass_attack(&objective, &images, &labels, &set, &cfg, &[iterations]).unwrap();
                (adv.into_iter().next().unwrap().images, None, None)
            }
            3 => {
                let cfg = StickerConfig {
                    iterations,
                    seed: run as u64,
                    ..StickerConfig::default()
                };
                let set = MaskSet::PerExample(masks.clone());
                let adv = sticker_attack(&objective, &images, &labels, &set, &cfg, &[iterations]).unwrap();
                (adv.into_iter().next().unwrap().images, None, None)
            }
            _ => {
                let mut cfg = RoaConfig::new(1 + below(&mut rng, h), 1 + below(&mut rng, w))
                    .with_iterations(iterations)
                    .with_search(if below(&mut rng, 2) == 0 {
                        Search::Exhaustive
                    } else {
                        Search::Gradient
                    });
                cfg.stride = 1;
                let out = roa_attack(&objective, &images, &labels, &cfg).unwrap();
                // The mask of each example is the rectangle it chose.
                let per = c * h * w;
                for (i, p) in out.placements.iter().enumerate() {
                    let m = Mask::rect(h, w, p.row, p.col, cfg.height, cfg.width).unwrap();
                    check_example(
                        &images.data()[i * per..(i + 1) * per],
                        &out.adversarial.images.data()[i * per..(i + 1) * per],
                        &m,
                        None,
                        None,
                        &mut report,
                    );
                }
                report.runs += 1;
                continue;
            }
        };
        let per = c * h * w;
        for (i, m) in masks.iter().enumerate() {
            check_example(
                &images.data()[i * per..(i + 1) * per],
                &adv.data()[i * per..(i + 1) * per],
                m,
                linf.map(|e| e + TOL),
                l2.map(|e| e * (1.0 + 1e-9) + TOL),
                &mut report,
            );
        }
        report.runs += 1;
    }
    report
}

fn check_example(
    before: &[f64],
    after: &[f64],
    mask: &Mask,
    linf: Option<f64>,
    l2: Option<f64>,
    report: &mut ConfinementReport,
) {
    let plane = mask.height() * mask.width();
    let mut sq = 0.0;
    let mut worst: f64 = 0.0;
    for (j, (&b, &a)) in before.iter().zip(after).enumerate() {
        if !mask.cells()[j % plane] {
            if a.to_bits() != b.to_bits() {
                report.out_of_mask_changes += 1;
            }
            continue;
        }
        if !(0.0..=1.0).contains(&a) {
            report.range_violations += 1;
        }
        sq += (a - b) * (a - b);
        worst = worst.max((a - b).abs());
    }
    if linf.is_some_and(|e| worst > e) || l2.is_some_and(|e| sq.sqrt() > e) {
        report.budget_violations += 1;
    }
}
