use std::path::Path;

use imoc_core::data::*;
use imoc_core::CoreError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn idx_images(n: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for d in [n, rows, cols] {
        b.extend(d.to_be_bytes());
    }
    b.extend(payload);
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend((labels.len() as u32).to_be_bytes());
    b.extend(labels);
    b
}

fn offset(e: CoreError) -> usize {
    match e {
        CoreError::Format { offset, .. } => offset,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn idx_endpoints_and_shape() {
    let px: Vec<u8> = (0..12).map(|i| [0u8, 255, 128][i % 3]).collect();
    match parse_idx(&idx_images(2, 2, 3, &px)).unwrap() {
        IdxData::Images { n, rows, cols, pixels } => {
            assert_eq!((n, rows, cols, pixels.len()), (2, 2, 3, 12));
            assert_eq!(pixels[0], -1.0);
            assert_eq!(pixels[1], 1.0);
            assert!((pixels[2] - (128.0 / 127.5 - 1.0)).abs() < 1e-7);
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(parse_idx(&idx_labels(&[3, 1, 4])).unwrap(), IdxData::Labels(vec![3, 1, 4]));
}

#[test]
fn idx_errors_are_located() {
    // Header promises 2*2*3 = 12 payload bytes; only 5 are present.
    let short = idx_images(2, 2, 3, &[0; 5]);
    assert_eq!(offset(parse_idx(&short).unwrap_err()), 16 + 5);
    let long = idx_images(1, 1, 2, &[0; 4]);
    assert_eq!(offset(parse_idx(&long).unwrap_err()), 16 + 2);
    let mut bad = idx_labels(&[1]);
    bad[3] = 9;
    assert_eq!(offset(parse_idx(&bad).unwrap_err()), 0);
    assert_eq!(offset(parse_idx(&[0, 0, 8]).unwrap_err()), 3);
    assert_eq!(offset(parse_idx(&[0, 0, 8, 3, 0, 0]).unwrap_err()), 6);
}

fn subset_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist-subset"))
}

#[test]
fn bundled_mnist_subset_loads() {
    let (train, test) = load_mnist_dir(subset_dir()).unwrap();
    assert_eq!(train.shape, [1, 28, 28]);
    assert_eq!((train.len(), test.len()), (8576, 1424));
    assert_eq!(train.classes, 10);
    assert!(train.data.iter().chain(&test.data).all(|v| (-1.0..=1.0).contains(v)));
    for c in 0..10 {
        let task = make_one_class_task(&train, &test, c).unwrap();
        let normal = task.test_normal.iter().filter(|&&b| b).count() as f64;
        let ratio = (task.test_normal.len() as f64 - normal) / normal;
        assert!((7.0..=11.5).contains(&ratio), "class {c}: 1:{ratio}");
    }
}

#[test]
fn missing_mnist_dir_names_the_path() {
    let err = load_mnist_dir(Path::new("/nonexistent/mnist")).unwrap_err().to_string();
    assert!(err.contains("/nonexistent/mnist"), "{err}");
}

fn cifar_bytes(labels: &[(u8, u8)], variant: CifarVariant, seed: u64) -> (Vec<u8>, Vec<Vec<u8>>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = Vec::new();
    let mut images = Vec::new();
    for &(coarse, fine) in labels {
        bytes.push(coarse);
        if variant == CifarVariant::C100Coarse {
            bytes.push(fine);
        }
        let img: Vec<u8> = (0..CIFAR_PIXELS).map(|_| r.random()).collect();
        bytes.extend(&img);
        images.push(img);
    }
    (bytes, images)
}

#[test]
fn cifar_round_trip_channel_major() {
    for variant in [CifarVariant::C10, CifarVariant::C100Coarse] {
        let labels = [(3, 77), (0, 5), (9, 99)];
        let (bytes, images) = cifar_bytes(&labels, variant, 1);
        let (px, got) = parse_cifar(&bytes, variant).unwrap();
        assert_eq!(got, vec![3, 0, 9]);
        for (k, img) in images.iter().enumerate() {
            let back: Vec<u8> = px[k * CIFAR_PIXELS..(k + 1) * CIFAR_PIXELS]
                .iter()
                .map(|&v| ((v + 1.0) * 127.5).round() as u8)
                .collect();
            assert_eq!(&back, img);
        }
    }
}

#[test]
fn cifar100_coarse_labels_stay_below_20() {
    let labels: Vec<(u8, u8)> = (0..40).map(|i| ((i % 20) as u8, (i * 2 + 1) as u8)).collect();
    let (bytes, _) = cifar_bytes(&labels, CifarVariant::C100Coarse, 2);
    let (_, got) = parse_cifar(&bytes, CifarVariant::C100Coarse).unwrap();
    assert!(got.iter().all(|&l| l < 20));
    let (bad, _) = cifar_bytes(&[(20, 0)], CifarVariant::C100Coarse, 3);
    assert!(parse_cifar(&bad, CifarVariant::C100Coarse).is_err());
}

#[test]
fn cifar_rejects_partial_records() {
    let (bytes, _) = cifar_bytes(&[(1, 0), (2, 0)], CifarVariant::C10, 4);
    let err = parse_cifar(&bytes[..bytes.len() - 1], CifarVariant::C10).unwrap_err();
    assert_eq!(offset(err), CIFAR_PIXELS + 1);
    // A c10 file is not a whole number of c100 records.
    assert!(parse_cifar(&bytes, CifarVariant::C100Coarse).is_err());
}

fn toy(labels: Vec<usize>, classes: usize) -> Dataset {
    let data = labels.iter().flat_map(|&l| vec![l as f32 / 10.0; 4]).collect();
    Dataset::new([1, 2, 2], data, labels, classes).unwrap()
}

#[test]
fn one_class_task_has_no_leakage() {
    let train = toy((0..30).map(|i| i % 3).collect(), 3);
    let test = toy((0..12).map(|i| i % 3).collect(), 3);
    let task = make_one_class_task(&train, &test, 1).unwrap();
    assert_eq!(task.train.len(), 10);
    assert!(task.train.labels.iter().all(|&l| l == 1));
    assert!(task.train.data.iter().all(|&v| v == 0.1));
    assert_eq!(task.test.len(), 12);
    assert_eq!(task.test_normal.iter().filter(|&&b| b).count(), 4);
    for (i, &n) in task.test_normal.iter().enumerate() {
        assert_eq!(n, test.labels[i] == 1);
    }
}

#[test]
fn one_class_task_rejects_bad_inputs() {
    let single = toy(vec![0; 4], 1);
    assert!(make_one_class_task(&single, &single, 0).is_err());
    let ds = toy(vec![0, 1, 0, 1], 2);
    assert!(make_one_class_task(&ds, &ds, 2).is_err());
}

#[test]
fn dataset_validates_and_pads() {
    assert!(Dataset::new([1, 2, 2], vec![0.0; 7], vec![0, 1], 2).is_err());
    assert!(Dataset::new([1, 2, 2], vec![0.0; 8], vec![0, 2], 2).is_err());
    let ds = toy(vec![0, 1], 2);
    let p = ds.pad_to(4).unwrap();
    assert_eq!(p.shape, [1, 4, 4]);
    // The 2x2 block sits centred in a -1 border.
    let s = p.sample(1);
    assert_eq!(s[5], 0.1);
    assert_eq!(s[0], -1.0);
    assert_eq!(p.expand_grayscale().unwrap().shape, [3, 4, 4]);
}

#[test]
fn synth_is_deterministic_and_in_range() {
    for spec in [SynthSpec::gauss_clusters(), SynthSpec::blobs_images()] {
        let (a_train, a_test) = synth_generate(&spec, 5).unwrap();
        let (b_train, b_test) = synth_generate(&spec, 5).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        let (c_train, _) = synth_generate(&spec, 6).unwrap();
        assert_ne!(a_train.data, c_train.data);
        assert!(a_train.data.iter().chain(&a_test.data).all(|v| (-1.0..=1.0).contains(v)));
        assert!(a_train.classes >= 2);
    }
    assert!(SynthSpec::by_name("swiss-roll").is_err());
}

#[test]
fn synth_counts_match_spec() {
    let (train, test) = synth_generate(&SynthSpec::gauss_clusters(), 1).unwrap();
    assert_eq!(train.class_counts(), vec![2000; 5]);
    assert_eq!(test.class_counts(), vec![500, 125, 125, 125, 125]);
    let (train, test) = synth_generate(&SynthSpec::blobs_images(), 1).unwrap();
    assert_eq!(train.shape, [1, 16, 16]);
    assert_eq!(train.class_counts(), vec![500; 4]);
    assert_eq!(test.class_counts(), vec![250; 4]);
}

fn with_separation(sep: f64) -> SynthSpec {
    match SynthSpec::gauss_clusters() {
        SynthSpec::GaussClusters {
            dim,
            clusters,
            sigma,
            radius,
            train_per_class,
            test_normal,
            test_per_anomaly,
            ..
        } => SynthSpec::GaussClusters {
            dim,
            clusters,
            sigma,
            separation: sep,
            radius,
            train_per_class,
            test_normal,
            test_per_anomaly,
        },
        _ => unreachable!(),
    }
}

#[test]
fn zero_separation_gives_identical_means() {
    let means = gauss_cluster_means(&with_separation(0.0), 3).unwrap();
    for m in &means[1..] {
        for (a, b) in m.iter().zip(&means[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn cluster_means_are_at_the_stated_distance() {
    let means = gauss_cluster_means(&SynthSpec::gauss_clusters(), 3).unwrap();
    for m in &means {
        let r: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((r - 0.6).abs() < 1e-12);
    }
    for m in &means[1..] {
        let d: f64 = m.iter().zip(&means[0]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((d - 0.6).abs() < 1e-12);
    }
}

#[test]
fn nearest_centroid_separates_clusters_at_six_sigma() {
    let (train, test) = synth_generate(&SynthSpec::gauss_clusters(), 8).unwrap();
    let d = train.sample_len();
    let mut centroids = vec![vec![0.0f64; d]; train.classes];
    let counts = train.class_counts();
    for i in 0..train.len() {
        for (c, &v) in centroids[train.labels[i]].iter_mut().zip(train.sample(i)) {
            *c += v as f64 / counts[train.labels[i]] as f64;
        }
    }
    let mut correct = 0;
    for i in 0..test.len() {
        let x = test.sample(i);
        let best = (0..train.classes)
            .min_by(|&a, &b| {
                let da: f64 = centroids[a].iter().zip(x).map(|(c, &v)| (c - v as f64).powi(2)).sum();
                let db: f64 = centroids[b].iter().zip(x).map(|(c, &v)| (c - v as f64).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        if best == test.labels[i] {
            correct += 1;
        }
    }
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.99, "{acc}");
}

proptest! {
    #[test]
    fn every_proper_idx_prefix_is_rejected(rows in 1u32..4, cols in 1u32..4, n in 1u32..4, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<u8> = (0..n * rows * cols).map(|_| r.random()).collect();
        let full = idx_images(n, rows, cols, &px);
        prop_assert!(parse_idx(&full).is_ok());
        for cut in 0..full.len() {
            let e = parse_idx(&full[..cut]);
            let located = matches!(e, Err(CoreError::Format { .. }));
            prop_assert!(located);
        }
        let labels = idx_labels(&px);
        for cut in 0..labels.len() {
            prop_assert!(parse_idx(&labels[..cut]).is_err());
        }
    }
}
