//! Randomized invariants over data handling, metrics, attention and the
//! curriculum scheduler.

use ndarray::{Array2, Array3, Array4};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s3mamba::backbone::Encf;
use s3mamba::curriculum::{rank_losses, update_weights, CurriculumState, Phase, SchedulerConfig};
use s3mamba::data::{
    augment, flip_horizontal, flip_vertical, generate_sample, rotate90, stratify, AugPolicy, Dataset, SegSample,
    SynthConfig,
};
use s3mamba::metrics::{compute_metrics, confusion};
use s3mamba::nn::{randn, Module};
use s3mamba::tcma::base_tensor;

fn mask_strategy(side: usize, classes: u8) -> impl Strategy<Value = Array2<u8>> {
    prop::collection::vec(0..classes, side * side)
        .prop_map(move |v| Array2::from_shape_vec((side, side), v).expect("side²"))
}

fn sample_from_mask(id: String, mask: Array2<u8>) -> SegSample {
    let (h, w) = mask.dim();
    let image = Array3::from_shape_fn((h, w, 3), |(y, x, c)| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0);
    SegSample::new(id, image, mask).expect("matching shapes")
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        image_size: 16,
        ..SynthConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stratification_ignores_dataset_order(
        masks in prop::collection::vec(mask_strategy(4, 2), 1..30),
        shuffle_seed in any::<u64>(),
    ) {
        let samples: Vec<SegSample> = masks
            .into_iter()
            .enumerate()
            .map(|(i, m)| sample_from_mask(format!("s{i:03}"), m))
            .collect();
        let mut shuffled = samples.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let a = stratify(&Dataset::new(samples).unwrap()).unwrap();
        let b = stratify(&Dataset::new(shuffled).unwrap()).unwrap();
        prop_assert_eq!(a.assignment, b.assignment);
        prop_assert_eq!(a.q30.to_bits(), b.q30.to_bits());
        prop_assert_eq!(a.q60.to_bits(), b.q60.to_bits());
    }

    #[test]
    fn generated_fraction_matches_mask(seed in any::<u64>()) {
        let s = generate_sample(seed, &small_synth()).unwrap();
        let recount = s.mask.iter().filter(|&&v| v > 0).count() as f64 / s.mask.len() as f64;
        prop_assert_eq!(s.lesion_fraction, recount);
        prop_assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn geometric_augmentation_keeps_fraction(seed in any::<u64>(), aug_seed in any::<u64>()) {
        let s = generate_sample(seed, &small_synth()).unwrap();
        for t in [flip_horizontal(&s), flip_vertical(&s), rotate90(&s), augment(&s, &AugPolicy::standard(), aug_seed)] {
            prop_assert_eq!(t.lesion_fraction, s.lesion_fraction);
            prop_assert_eq!(&t.id, &s.id);
        }
        let back = rotate90(&rotate90(&rotate90(&rotate90(&s))));
        prop_assert_eq!(back.mask, s.mask.clone());
        prop_assert_eq!(flip_horizontal(&flip_horizontal(&s)).image, s.image.clone());
    }

    #[test]
    fn identity_policy_leaves_sample_unchanged(seed in any::<u64>(), aug_seed in any::<u64>()) {
        let s = generate_sample(seed, &small_synth()).unwrap();
        prop_assert_eq!(augment(&s, &AugPolicy::default(), aug_seed), s);
    }

    #[test]
    fn dice_never_below_iou(pred in mask_strategy(6, 3), gt in mask_strategy(6, 3)) {
        for cls in 1..3u8 {
            let m = compute_metrics(&confusion(pred.view(), gt.view(), cls).unwrap());
            if let (Some(d), Some(j)) = (m.dsc, m.miou) {
                prop_assert!(d >= j);
                prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn metrics_ignore_joint_pixel_permutation(
        pred in mask_strategy(6, 2),
        gt in mask_strategy(6, 2),
        seed in any::<u64>(),
    ) {
        let mut order: Vec<usize> = (0..36).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permute = |m: &Array2<u8>| {
            let flat: Vec<u8> = m.iter().copied().collect();
            Array2::from_shape_fn((6, 6), |(r, c)| flat[order[r * 6 + c]])
        };
        let a = confusion(pred.view(), gt.view(), 1).unwrap();
        let b = confusion(permute(&pred).view(), permute(&gt).view(), 1).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(compute_metrics(&a), compute_metrics(&b));
    }

    #[test]
    fn channel_scale_inside_unit_interval(seed in any::<u64>(), spread in 0.1f64..5.0) {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let mut e = Encf::new(8, 2, &mut g).unwrap();
        e.fc2.visit_mut("", &mut |_, _, mut a| {
            let noise = randn(a.raw_dim(), spread, &mut g);
            a.assign(&noise);
        });
        let x: Array4<f64> = randn((2, 3, 3, 8), 1.0, &mut g);
        let (_, cache) = e.forward(&x);
        prop_assert!(cache.scale().iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn base_tensor_is_linear_in_each_factor(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let po: Array4<f64> = randn((1, 4, 4, 3), 1.0, &mut g);
        let pi: Array3<f64> = randn((1, 4, 4), 1.0, &mut g);
        let pe: Array4<f64> = randn((1, 4, 4, 2), 1.0, &mut g);
        let base = base_tensor(po.view(), pi.view(), pe.view()).unwrap();
        let scaled = [
            base_tensor((&po * alpha).view(), pi.view(), pe.view()).unwrap(),
            base_tensor(po.view(), (&pi * alpha).view(), pe.view()).unwrap(),
            base_tensor(po.view(), pi.view(), (&pe * alpha).view()).unwrap(),
        ];
        for s in scaled {
            let worst = (&s - &(&base * alpha)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(worst <= 1e-12, "deviation {worst:e}");
        }
    }

    #[test]
    fn ranking_ignores_positive_scaling(
        losses in prop::collection::vec(0.0f64..10.0, 1..40),
        scale in 1e-3f64..1e3,
    ) {
        let scaled: Vec<f64> = losses.iter().map(|l| l * scale).collect();
        prop_assert_eq!(rank_losses(&losses).unwrap(), rank_losses(&scaled).unwrap());
        let fractions = vec![0.05; losses.len()];
        let state = CurriculumState::new(&fractions, 0.7, SchedulerConfig::default()).unwrap();
        prop_assert_eq!(update_weights(&state, &losses).unwrap(), update_weights(&state, &scaled).unwrap());
    }

    #[test]
    fn phase_never_returns_to_easy_first(
        epochs in prop::collection::vec(prop::collection::vec(0.01f64..2.0, 6), 1..40),
        flat_from in 0usize..20,
    ) {
        let cfg = SchedulerConfig { patience: 2, ..SchedulerConfig::default() };
        let mut s = CurriculumState::new(&[0.01, 0.02, 0.05, 0.1, 0.2, 0.3], 0.7, cfg).unwrap();
        let mut seen_hard = false;
        for (e, losses) in epochs.iter().enumerate() {
            // repeat one loss vector after `flat_from` so plateaus actually happen
            let l = if e >= flat_from { &epochs[flat_from.min(epochs.len() - 1)] } else { losses };
            s.end_epoch(e, l).unwrap();
            prop_assert!(s.v.iter().all(|&v| (s.config.v_min..=1.0).contains(&v)));
            if seen_hard {
                prop_assert_eq!(s.phase, Phase::HardFocus);
            }
            seen_hard |= s.phase == Phase::HardFocus;
        }
    }
}
