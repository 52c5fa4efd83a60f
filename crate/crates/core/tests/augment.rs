use imoc_core::augment::*;
use imoc_core::config::RunConfig;
use imoc_core::data::{make_one_class_task, Dataset};
use imoc_core::trainer::view_batch;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(shape: [usize; 3], seed: u64) -> Vec<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..shape.iter().product::<usize>())
        .map(|_| r.random_range(-1.0f32..=1.0))
        .collect()
}

#[test]
fn identity_policy_returns_input() {
    let p = AugmentPolicy::identity();
    for shape in [[3, 8, 8], [1, 28, 28], [1, 1, 16]] {
        let mut x = image(shape, 1);
        x[0] = 1e-9;
        x[1] = -1.0;
        x[2] = 1.0;
        let (a, b) = make_views(&x, shape, &p, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, x);
        assert_eq!(b, x);
    }
}

#[test]
fn replayed_stream_gives_identical_views() {
    let x = image([3, 16, 16], 3);
    let p = AugmentPolicy::default();
    let v1 = make_views(&x, [3, 16, 16], &p, &mut ChaCha8Rng::seed_from_u64(7));
    let v2 = make_views(&x, [3, 16, 16], &p, &mut ChaCha8Rng::seed_from_u64(7));
    assert_eq!(v1, v2);
    let v3 = make_views(&x, [3, 16, 16], &p, &mut ChaCha8Rng::seed_from_u64(8));
    assert_ne!(v1, v3);
}

fn differing_fraction(shape: [usize; 3]) -> f64 {
    let p = AugmentPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut differ = 0;
    for i in 0..1000 {
        let x = image(shape, 100 + i);
        let (a, b) = make_views(&x, shape, &p, &mut rng);
        let mad: f64 = a.iter().zip(&b).map(|(u, v)| (u - v).abs() as f64).sum::<f64>() / a.len() as f64;
        if mad > 0.0 {
            differ += 1;
        }
    }
    differ as f64 / 1000.0
}

#[test]
fn default_policy_views_differ() {
    assert!(differing_fraction([3, 16, 16]) >= 0.99);
    assert!(differing_fraction([1, 16, 16]) >= 0.99);
    assert!(differing_fraction([1, 1, 16]) >= 0.99);
}

#[test]
fn grayscale_images_keep_a_single_channel() {
    let x = image([1, 12, 12], 4);
    let (a, _) = make_views(&x, [1, 12, 12], &AugmentPolicy::default(), &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(a.len(), x.len());
}

#[test]
fn expand_grayscale_repeats_channel() {
    let x = image([1, 28, 28], 5);
    let y = expand_grayscale(&x, [1, 28, 28]).unwrap();
    assert_eq!(y.len(), 3 * 784);
    for c in 0..3 {
        assert_eq!(&y[c * 784..(c + 1) * 784], &x[..]);
    }
    assert_eq!(channel_mean(&y, [3, 28, 28]), x);
    assert!(expand_grayscale(&y, [3, 28, 28]).is_err());
}

#[test]
fn policy_validation() {
    assert!(AugmentPolicy::default().validate().is_ok());
    assert!(AugmentPolicy::identity().validate().is_ok());
    let bad = [
        AugmentPolicy { flip_p: 1.5, ..AugmentPolicy::default() },
        AugmentPolicy { crop_scale: (0.0, 1.0), ..AugmentPolicy::default() },
        AugmentPolicy { crop_scale: (0.8, 0.5), ..AugmentPolicy::default() },
        AugmentPolicy { hue: 0.7, ..AugmentPolicy::default() },
        AugmentPolicy { noise: -1.0, ..AugmentPolicy::default() },
    ];
    for p in bad {
        assert!(p.validate().is_err(), "{p:?}");
    }
}

#[test]
fn per_sample_views_ignore_batch_composition() {
    let shape = [3, 8, 8];
    let n = 12;
    let data: Vec<f32> = (0..n as u64).flat_map(|i| image(shape, 50 + i)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let ds = Dataset::new(shape, data, labels, 2).unwrap();
    let task = make_one_class_task(&ds, &ds, 0).unwrap();
    let cfg = RunConfig::parse("dataset = \"blobs-images\"\nseed = 3\n").unwrap();
    let per = 2 * 3 * 64;
    let whole = view_batch::<f32>(&cfg, &task, 4, &[0, 1, 2, 3, 4, 5]);
    let part = view_batch::<f32>(&cfg, &task, 4, &[5, 2]);
    assert_eq!(&part.data()[..per], &whole.data()[5 * per..6 * per]);
    assert_eq!(&part.data()[per..], &whole.data()[2 * per..3 * per]);
    let other_epoch = view_batch::<f32>(&cfg, &task, 5, &[5, 2]);
    assert_ne!(part.data(), other_epoch.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn views_stay_in_range(seed in any::<u64>(), c in prop::sample::select(vec![1usize, 3]), hw in 1usize..12, vector in any::<bool>()) {
        let shape = if vector { [1, 1, hw * 4] } else { [c, hw, hw] };
        // Inputs at the boundary plus strong noise push values outward.
        let x: Vec<f32> = image(shape, seed).iter().map(|v| v.signum()).collect();
        let p = AugmentPolicy { noise: 2.0, brightness: 0.9, contrast: 0.9, ..AugmentPolicy::default() };
        let (a, b) = make_views(&x, shape, &p, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(a.iter().chain(&b).all(|v| (-1.0..=1.0).contains(v)));
    }
}
