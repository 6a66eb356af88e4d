#[path = "support/oracles.rs"]
mod oracles;

use occludox::attacks::{
    eyeglass_attack, grey_fill, patch_apply, patch_train, pgd, placements, roa_attack, roa_exhaustive_position,
    roa_gradient_positions, sticker_attack, AttackBudget, EyeglassConfig, MaskSet, ModelLoss, Objective, PatchConfig,
    PatchPlacement, RoaConfig, Search, StickerConfig,
};
use occludox::rng::{below, seeded};
use occludox::{Mask, Result, Tensor};
use oracles::{enumerate_roa, linear_ce, random_image, toy_linear};

/// `loss = w · x` per example, so the input gradient is `w` everywhere.
struct Dot(Vec<f64>);

impl Objective for Dot {
    fn losses(&self, images: &Tensor, _: &[usize]) -> Result<Vec<f64>> {
        Ok(images
            .data()
            .chunks(self.0.len())
            .map(|x| x.iter().zip(&self.0).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn losses_and_grad(&self, images: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let n = images.len() / self.0.len();
        let grad: Vec<f64> = (0..n).flat_map(|_| self.0.iter().copied()).collect();
        Ok((self.losses(images, labels)?, Tensor::new(images.dims().to_vec(), grad)?))
    }
}

#[test]
fn linf_sign_steps_then_clip_to_the_ball() {
    // 0.5 → 0.55 → 0.60 → 0.65 clipped back to 0.5 + 0.1.
    let x = Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap();
    let adv = pgd(
        &Dot(vec![1.0]),
        &x,
        &[0],
        &AttackBudget::linf(0.1, 0.05, 3),
        &MaskSet::All,
    )
    .unwrap();
    assert!((adv.images.data()[0] - 0.60).abs() < 1e-12);
}

#[test]
fn l2_step_is_projected_onto_the_ball() {
    let x = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.5]).unwrap();
    let adv = pgd(
        &Dot(vec![0.6, 0.8]),
        &x,
        &[0],
        &AttackBudget::l2(0.05, 0.1, 1),
        &MaskSet::All,
    )
    .unwrap();
    assert!((adv.images.data()[0] - 0.53).abs() < 1e-12);
    assert!((adv.images.data()[1] - 0.54).abs() < 1e-12);
}

#[test]
fn full_mask_equals_no_mask() {
    let mut rng = seeded(3);
    let params = toy_linear(&mut rng, 3, 6, 6, 4);
    let x = random_image(&mut rng, &[2, 3, 6, 6]);
    let obj = ModelLoss::untargeted(&params);
    let budget = AttackBudget::linf(0.1, 0.02, 8);
    let a = pgd(&obj, &x, &[1, 2], &budget, &MaskSet::All).unwrap();
    let b = pgd(&obj, &x, &[1, 2], &budget, &MaskSet::Shared(Mask::full(6, 6))).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.losses, b.losses);
}

#[test]
fn exhaustive_search_matches_enumeration_on_six_by_six() {
    for seed in 0..10 {
        let mut rng = seeded(seed);
        let params = toy_linear(&mut rng, 1, 6, 6, 3);
        let image = random_image(&mut rng, &[1, 6, 6]);
        let label = below(&mut rng, 3);
        let mut cfg = RoaConfig::new(2, 2);
        cfg.stride = 1;
        assert_eq!(placements(6, 6, &cfg).unwrap().len(), 25);
        let found = roa_exhaustive_position(&ModelLoss::untargeted(&params), &image, label, &cfg).unwrap();
        let (row, col, loss) = enumerate_roa(&params, &image, label, 2, 2, 1);
        assert_eq!((found.row, found.col), (row, col));
        assert!((found.loss - loss).abs() < 1e-12);
    }
}

#[test]
fn gradient_candidates_follow_window_energy() {
    #[rustfmt::skip]
    let g: Vec<f64> = vec![
        0.0, 1.4, 0.0, 0.0,
        0.1, 0.3, 0.0, 0.0,
        0.0, 0.0, 0.6, 0.6,
        -2.0, 0.0, 0.6, 0.6,
    ];
    let image = Tensor::new(vec![1, 4, 4], vec![0.2; 16]).unwrap();
    let mut cfg = RoaConfig::new(2, 2);
    cfg.stride = 1;
    cfg.candidates = 2;
    // Independent sliding-window sum of squares.
    let mut windows = Vec::new();
    for r in 0..3 {
        for c in 0..3 {
            let e: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|(dy, dx)| g[(r + dy) * 4 + c + dx].powi(2))
                .sum();
            windows.push((e, r, c));
        }
    }
    windows.sort_by(|a, b| b.0.total_cmp(&a.0));
    // The -2 corner dominates the energy even though grey there lowers w·x,
    // and the best exhaustive window (2, 2) is not among the top two.
    assert_eq!((windows[0].1, windows[0].2), (2, 0));
    assert_eq!((windows[1].1, windows[1].2), (0, 0));
    let grey_loss = |r: usize, c: usize| {
        let filled = grey_fill(&image, r, c, 2, 2).unwrap();
        filled.data().iter().zip(&g).map(|(x, w)| x * w).sum::<f64>()
    };
    let top: Vec<(usize, usize)> = windows[..2].iter().map(|w| (w.1, w.2)).collect();
    let best = *top
        .iter()
        .reduce(|a, b| {
            if grey_loss(b.0, b.1) > grey_loss(a.0, a.1) {
                b
            } else {
                a
            }
        })
        .unwrap();
    let found = roa_gradient_positions(&Dot(g.clone()), &image, 0, &cfg).unwrap();
    assert_eq!((found.row, found.col), best);
    let exhaustive = roa_exhaustive_position(&Dot(g), &image, 0, &cfg).unwrap();
    assert_ne!((exhaustive.row, exhaustive.col), best);
}

#[test]
fn roa_loss_beats_every_grey_placement() {
    for seed in 0..5 {
        let mut rng = seeded(100 + seed);
        let params = toy_linear(&mut rng, 1, 6, 6, 3);
        let image = random_image(&mut rng, &[1, 6, 6]);
        let mut cfg = RoaConfig::new(2, 2).with_search(Search::Exhaustive).with_iterations(10);
        cfg.stride = 1;
        let out = roa_attack(&ModelLoss::untargeted(&params), &image, &[0], &cfg).unwrap();
        let (_, _, grey_best) = enumerate_roa(&params, &image, 0, 2, 2, 1);
        assert!(out.adversarial.losses[0] >= grey_best - 1e-12);
        let direct = linear_ce(&params, out.adversarial.images.data(), 0);
        assert!((direct - out.adversarial.losses[0]).abs() < 1e-12);
    }
}

#[test]
fn search_oracles_agree() {
    let r = oracles::search_equivalence(20, 7);
    assert_eq!((r.gradient_mismatches, r.oracle_mismatches), (0, 0), "{r:?}");
}

#[test]
fn masked_attacks_stay_confined() {
    let r = oracles::confinement(200, 11);
    assert_eq!(r.runs, 200);
    assert_eq!(
        (r.out_of_mask_changes, r.budget_violations, r.range_violations),
        (0, 0, 0),
        "{r:?}"
    );
}

#[test]
fn eyeglass_single_step_matches_hand_evaluation() {
    let w = vec![0.5, -2.0, 1.0, 0.25];
    let x = Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.9, 0.4, 0.7]).unwrap();
    let mask = MaskSet::Shared(Mask::new(2, 2, vec![true, true, false, false]).unwrap());
    let cfg = EyeglassConfig {
        lr: 20.0,
        momentum: 0.0,
        iterations: 1,
        colors: 3,
        seed: 4,
    };
    let runs = eyeglass_attack(&Dot(w.clone()), &x, &[0], &mask, &cfg, &[0, 1]).unwrap();
    let start = runs[0].images.data().to_vec();
    assert_eq!(&start[2..], &[0.4, 0.7]);
    // g / max|g| over the mask is (0.25, -1); one step of 20/255, clip, quantize.
    let expected: Vec<f64> = [0.25, -1.0]
        .iter()
        .zip(&start)
        .map(|(g, s)| ((s + 20.0 / 255.0 * g).clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    let stepped = runs[1].images.data();
    let loss = |v: &[f64]| v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    let mut hand = start.clone();
    hand[..2].copy_from_slice(&expected);
    if loss(&hand) > loss(&start) {
        assert_eq!(stepped, hand.as_slice());
    } else {
        assert_eq!(stepped, start.as_slice());
    }
}

#[test]
fn sticker_never_ends_below_its_start() {
    let mut rng = seeded(21);
    let params = toy_linear(&mut rng, 3, 8, 8, 4);
    let x = random_image(&mut rng, &[3, 3, 8, 8]);
    let obj = ModelLoss::untargeted(&params);
    let mask = MaskSet::Shared(Mask::sticker_bars(8, 8));
    let cfg = StickerConfig {
        iterations: 10,
        ..StickerConfig::default()
    };
    let runs = sticker_attack(&obj, &x, &[0, 1, 2], &mask, &cfg, &[0, 10]).unwrap();
    for (a, b) in runs[0].losses.iter().zip(&runs[1].losses) {
        assert!(b >= a);
    }
}

#[test]
fn sticker_on_flat_loss_keeps_its_initialization() {
    let x = Tensor::full(&[1, 1, 4, 4], 0.3);
    let mask = MaskSet::Shared(Mask::rect(4, 4, 1, 1, 2, 2).unwrap());
    let cfg = StickerConfig {
        iterations: 5,
        ..StickerConfig::default()
    };
    let runs = sticker_attack(&Dot(vec![0.0; 16]), &x, &[0], &mask, &cfg, &[0, 5]).unwrap();
    assert_eq!(runs[0].images, runs[1].images);
}

#[test]
fn patch_training_raises_target_probability() {
    let mut rng = seeded(5);
    let params = toy_linear(&mut rng, 3, 8, 8, 2);
    let design = random_image(&mut rng, &[12, 3, 8, 8]);
    let mut cfg = PatchConfig::new(0.25, 1);
    cfg.iterations = 3;
    cfg.epochs = 2;
    cfg.seed = 9;
    let before = patch_train(
        &ModelLoss::targeted(&params),
        &design,
        &PatchConfig { epochs: 0, ..cfg },
    )
    .unwrap();
    let after = patch_train(&ModelLoss::targeted(&params), &design, &cfg).unwrap();
    assert_eq!(
        after,
        patch_train(&ModelLoss::targeted(&params), &design, &cfg).unwrap()
    );
    let mean_log_prob = |patch: &Tensor| {
        let mut placement_rng = seeded(77);
        let mut total = 0.0;
        for i in 0..12 {
            let at = PatchPlacement::random(&mut placement_rng, 4, 8, 8);
            let x = patch_apply(&design.slice_outer(i).unwrap(), patch, at).unwrap();
            total -= linear_ce(&params, x.data(), 1);
        }
        total / 12.0
    };
    assert!(mean_log_prob(&after) >= mean_log_prob(&before));
}

#[test]
fn empty_patch_is_a_no_op() {
    let mut rng = seeded(6);
    let params = toy_linear(&mut rng, 1, 5, 5, 2);
    let design = random_image(&mut rng, &[2, 1, 5, 5]);
    let patch = patch_train(&ModelLoss::targeted(&params), &design, &PatchConfig::new(0.0, 0)).unwrap();
    assert_eq!(patch.len(), 0);
    let image = design.slice_outer(0).unwrap();
    let at = PatchPlacement {
        row: 0,
        col: 0,
        turns: 0,
    };
    assert_eq!(patch_apply(&image, &patch, at).unwrap(), image);
}
