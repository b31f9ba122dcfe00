use std::path::Path;

use dsal_core::data::{
    load_dataset, load_pair, make_dataset, normalize_intensity, quantize, save_dataset, save_pair, synth_sample,
    DataError, DatasetConfig, Sample, MANIFEST_FILE,
};
use dsal_core::metrics::Mask;
use dsal_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_sample(id: &str, h: usize, w: usize, pixels: &[u8], fg: &[bool]) -> Sample {
    let image = Tensor::new(vec![1, h, w], pixels.iter().map(|&p| p as f32 / 255.0).collect()).unwrap();
    let mask = Mask::from_fn(h, w, |i| fg[i]);
    Sample::new(id, image, Some(mask)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pgm_pair_roundtrip_is_bit_exact(
        (h, w, pixels, fg) in (1usize..24, 1usize..24).prop_flat_map(|(h, w)| (
            Just(h),
            Just(w),
            prop::collection::vec(any::<u8>(), h * w),
            prop::collection::vec(any::<bool>(), h * w),
        ))
    ) {
        let dir = tempfile::tempdir().unwrap();
        let s = grid_sample("s_0001", h, w, &pixels, &fg);
        let (ip, mp) = save_pair(&s, dir.path()).unwrap();
        let back = load_pair(&ip, &mp).unwrap();
        let a: Vec<u32> = s.image.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.image.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
        prop_assert_eq!(back, s);
    }

    #[test]
    fn normalization_is_bounded_idempotent_and_affine_invariant(
        values in prop::collection::vec(-5.0f32..5.0, 2..64),
        scale in 0.1f32..10.0,
        shift in -3.0f32..3.0,
    ) {
        let n = values.len();
        let t = Tensor::new(vec![1, 1, n], values.clone()).unwrap();
        let once = normalize_intensity(&t);
        prop_assert!(once.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        if !once.constant_input {
            prop_assert_eq!(&normalize_intensity(&once.image).image, &once.image);
            let moved = Tensor::new(vec![1, 1, n], values.iter().map(|v| v * scale + shift).collect()).unwrap();
            let again = normalize_intensity(&moved);
            for (a, b) in once.image.data().iter().zip(again.image.data()) {
                prop_assert!((a - b).abs() < 1e-4, "{} vs {}", a, b);
            }
        }
    }
}

fn write(path: &Path, bytes: &[u8]) {
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn non_binary_mask_is_rejected_with_offset() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, mp) = (dir.path().join("a.pgm"), dir.path().join("a_mask.pgm"));
    write(&ip, b"P5\n2 2\n255\n\x00\x10\x20\x30");
    write(&mp, b"P5\n2 2\n255\n\x00\xff\x80\x00");
    let err = load_pair(&ip, &mp).unwrap_err();
    match &err {
        DataError::Format { path, offset, .. } => {
            assert_eq!(path, &mp);
            assert_eq!(*offset, 13);
        }
        other => panic!("unexpected {other}"),
    }
    assert!(err.to_string().contains("128"));
}

#[test]
fn mismatched_pair_dimensions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, mp) = (dir.path().join("a.pgm"), dir.path().join("a_mask.pgm"));
    write(&ip, b"P5\n2 1\n255\n\x00\x10");
    write(&mp, b"P5\n1 2\n255\n\x00\xff");
    assert!(matches!(load_pair(&ip, &mp), Err(DataError::Format { .. })));
}

#[test]
fn full_size_file_loads_as_single_channel_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, mp) = (dir.path().join("big.pgm"), dir.path().join("big_mask.pgm"));
    let mut img = b"P5\n64 64\n255\n".to_vec();
    img.extend((0..4096).map(|i| (i % 256) as u8));
    let mut mask = b"P5\n64 64\n255\n".to_vec();
    mask.extend((0..4096).map(|i| if i % 3 == 0 { 255 } else { 0 }));
    write(&ip, &img);
    write(&mp, &mask);
    let s = load_pair(&ip, &mp).unwrap();
    assert_eq!(s.image.shape(), &[1, 64, 64]);
    assert_eq!(s.id, "big");
    assert_eq!(s.mask.unwrap().count(), 1366);
}

#[test]
fn foreground_fraction_stays_in_range_over_many_seeds() {
    let cfg = DatasetConfig::default();
    let (mut lo, mut hi) = (1.0f64, 0.0f64);
    for seed in 0..1000 {
        let s = synth_sample(&mut ChaCha8Rng::seed_from_u64(seed), &cfg, "x");
        let f = s.mask.as_ref().unwrap().foreground_fraction();
        lo = lo.min(f);
        hi = hi.max(f);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    println!("foreground fraction over 1000 seeds: [{lo:.4}, {hi:.4}]");
    assert!(lo > 0.01 && hi < 0.6, "observed [{lo}, {hi}]");
}

#[test]
fn dataset_is_deterministic_and_survives_disk() {
    let cfg = DatasetConfig {
        resolution: (16, 16),
        n_train: 6,
        n_val: 2,
        n_test: 3,
        seed: 17,
        ..DatasetConfig::default()
    };
    let d = make_dataset(&cfg).unwrap();
    assert_eq!(d, make_dataset(&cfg).unwrap());
    assert_ne!(d, make_dataset(&DatasetConfig { seed: 18, ..cfg.clone() }).unwrap());
    for (_, split) in d.splits() {
        for s in split {
            assert_eq!(quantize(&s.image), s.image);
            assert!(s.mask.as_ref().unwrap().count() > 0);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(&d, cfg.seed, dir.path()).unwrap();
    let (back_manifest, back) = load_dataset(dir.path()).unwrap();
    assert_eq!(back_manifest, manifest);
    assert_eq!(back, d);
}

#[test]
fn failed_write_leaves_no_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        resolution: (8, 8),
        n_train: 2,
        n_val: 1,
        n_test: 1,
        ..DatasetConfig::default()
    };
    let d = make_dataset(&cfg).unwrap();
    // a plain file where the test split directory should go
    write(&dir.path().join("test"), b"");
    let err = save_dataset(&d, 0, dir.path()).unwrap_err();
    assert!(err.to_string().contains("test"), "{err}");
    assert!(!dir.path().join(MANIFEST_FILE).exists());
}
