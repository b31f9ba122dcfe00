use std::collections::BTreeSet;

use dsal_core::data::Sample;
use dsal_core::metrics::{dsc, evaluate, spearman_rank, Mask};
use dsal_core::segnet::{build_model, Model, ModelConfig};
use dsal_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dice from explicit foreground coordinate sets.
fn set_dice(a: &Mask, b: &Mask) -> f64 {
    let pixels = |m: &Mask| -> BTreeSet<(usize, usize)> {
        (0..m.height())
            .flat_map(|y| (0..m.width()).map(move |x| (y, x)))
            .filter(|&(y, x)| m.data()[y * m.width() + x] == 1)
            .collect()
    };
    let (sa, sb) = (pixels(a), pixels(b));
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

fn random_mask(rng: &mut ChaCha8Rng, density: f64) -> Mask {
    Mask::from_fn(32, 32, |_| rng.random_bool(density))
}

#[test]
fn dsc_matches_set_oracle_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let empty = Mask::empty(32, 32);
    let mut pairs = vec![(empty.clone(), empty.clone())];
    for i in 0..120 {
        let density = [0.0, 0.002, 0.05, 0.3, 0.7, 1.0][i % 6];
        let a = random_mask(&mut rng, density);
        let db = rng.random_range(0.0..1.0);
        let b = random_mask(&mut rng, db);
        pairs.push((a, b));
    }
    pairs.push((empty.clone(), random_mask(&mut rng, 0.5)));
    for (a, b) in &pairs {
        assert_eq!(dsc(a, b).unwrap(), set_dice(a, b));
        assert_eq!(dsc(a, b).unwrap(), dsc(b, a).unwrap());
        assert_eq!(dsc(a, a).unwrap(), 1.0);
    }
}

proptest! {
    #[test]
    fn spearman_ignores_monotone_transforms(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40),
    ) {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let base = spearman_rank(&xs, &ys).unwrap();
        let tx: Vec<f64> = xs.iter().map(|v| (v / 50.0).exp()).collect();
        let ty: Vec<f64> = ys.iter().map(|v| v * 3.0 - 7.0).collect();
        let moved = spearman_rank(&tx, &ty).unwrap();
        match (base, moved) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
        if let Some(r) = base {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn dsc_is_symmetric_and_bounded(seed in any::<u64>(), da in 0.0f64..1.0, db in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_mask(&mut rng, da), random_mask(&mut rng, db));
        let d = dsc(&a, &b).unwrap();
        prop_assert_eq!(d, dsc(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
    }
}

/// A model whose final head outputs a constant class everywhere.
fn constant_model(foreground: bool) -> Model<f32> {
    let cfg = ModelConfig {
        depth: 2,
        base_channels: 2,
        input_size: (12, 12),
        ..ModelConfig::default()
    };
    let mut model = build_model::<f32>(&cfg).unwrap();
    for p in model.params_mut() {
        if p.name == "head_final.weight" {
            p.value.data_mut().fill(0.0);
        }
        if p.name == "head_final.bias" {
            let (bg, fg) = if foreground { (-5.0, 5.0) } else { (5.0, -5.0) };
            p.value.data_mut().copy_from_slice(&[bg, fg]);
        }
    }
    model
}

fn sample_with(fg_pixels: usize) -> Sample {
    let image = Tensor::from_fn(&[1, 12, 12], |i| (i % 7) as f32 / 7.0);
    Sample::new(format!("s{fg_pixels}"), image, Some(Mask::from_fn(12, 12, |i| i < fg_pixels))).unwrap()
}

#[test]
fn evaluate_examples() {
    // empty truth and an all-background model agree everywhere
    assert_eq!(evaluate(&constant_model(false), &[sample_with(0)]).unwrap(), 1.0);
    assert_eq!(evaluate(&constant_model(false), &[sample_with(40)]).unwrap(), 0.0);
    // all-foreground prediction: 2·36/(144+36) = 0.4 and 2·96/(144+96) = 0.8
    let mean = evaluate(&constant_model(true), &[sample_with(36), sample_with(96)]).unwrap();
    assert!((mean - 0.6).abs() < 1e-12, "{mean}");
    assert!(evaluate(&constant_model(true), &[]).is_err());
}
