use imoc_core::checkpoint::*;
use imoc_core::config::{Precision, RunConfig};
use imoc_core::models::Encoder;
use imoc_core::trainer::*;
use imoc_core::CoreError;

const SMALL_GAUSS: &str = r#"
dataset = "gauss-clusters"
epochs = 4
eval_every = 2
batch_size = 16
seed = 7

[data]
train_per_class = 80
test_normal = 40
test_per_anomaly = 10
"#;

fn cfg(extra: &str) -> RunConfig {
    RunConfig::parse(&format!("{extra}\n{SMALL_GAUSS}")).unwrap()
}

#[test]
fn history_is_deterministic_and_scheduled() {
    let c = RunConfig {
        epochs: 5,
        ..cfg("")
    };
    let task = c.load_task().unwrap();
    let (enc_a, a) = train_base::<f32>(&c, &task, &TrainOptions::default()).unwrap();
    let (enc_b, b) = train_base::<f32>(&c, &task, &TrainOptions::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(enc_a.params(), enc_b.params());
    let epochs: Vec<usize> = a.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![0, 2, 4, 5]);
    for r in &a.records {
        assert!(r.loss.total.is_finite());
        assert!((0.0..=1.0).contains(&r.auroc));
        assert_eq!(r.wall_time_s, 0.0);
    }
    let other = RunConfig { seed: 8, ..c.clone() };
    let (_, h) = train_base::<f32>(&other, &task, &TrainOptions::default()).unwrap();
    assert_ne!(h, a);
}

#[test]
fn objective_must_match_config() {
    let c = cfg("");
    let task = c.load_task().unwrap();
    assert!(train_extension::<f32>(&c, &task, &TrainOptions::default()).is_err());
    let e = cfg("extension = true");
    assert!(train_base::<f32>(&e, &task, &TrainOptions::default()).is_err());
}

#[test]
fn epoch_batches_cover_each_sample_once() {
    let c = RunConfig {
        batch_size: 8,
        ..cfg("")
    };
    let batches = epoch_batches(&c, 33, 3);
    assert_eq!(batches.len(), 4);
    let mut seen: Vec<usize> = batches.concat();
    assert_eq!(seen.len(), 32);
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 32);
    assert_ne!(epoch_batches(&c, 33, 3), epoch_batches(&c, 33, 4));
    assert_eq!(epoch_batches(&c, 34, 1).concat().len(), 34);
}

#[test]
fn extension_on_tiny_tracks_base() {
    let base = cfg("");
    let ext = RunConfig {
        extension: true,
        ..base.clone()
    };
    let task = base.load_task().unwrap();
    let (_, hb) = train_base::<f64>(&base, &task, &TrainOptions::default()).unwrap();
    let (_, he) = train_extension::<f64>(&ext, &task, &TrainOptions::default()).unwrap();
    assert_eq!(hb.records.len(), he.records.len());
    let first = (&hb.records[0].loss, &he.records[0].loss);
    assert_eq!(first.1.gvg, first.0.nce);
    assert_eq!(first.1.gvl, first.1.gvg);
    assert!((first.1.entropy - 2.0 * first.0.entropy).abs() < 1e-12 * first.0.entropy);
    // Doubling the loss leaves Adam steps unchanged up to its epsilon.
    for (b, e) in hb.records.iter().zip(&he.records) {
        let rel = (e.loss.gvg - b.loss.nce).abs() / b.loss.nce;
        assert!(rel < 1e-5, "epoch {}: {rel}", b.epoch);
        assert!((e.loss.total - 2.0 * b.loss.total).abs() < 1e-5 * b.loss.total.abs());
        assert!((e.auroc - b.auroc).abs() < 1e-3);
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let c = cfg("");
    let task = c.load_task().unwrap();
    let (enc, _) = train_base::<f32>(&c, &task, &TrainOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.imoc");
    checkpoint_save(&enc, &c, &path).unwrap();
    let (back, back_cfg) = checkpoint_load::<f32>(&path).unwrap();
    assert_eq!(back_cfg, c);
    assert_eq!(back.param_names(), enc.param_names());
    for (a, b) in back.params().iter().zip(enc.params()) {
        let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
    assert!(!dir.path().join("m.imoc.tmp").exists());
}

#[test]
fn f64_checkpoint_loads_as_f32_within_one_ulp() {
    let c = RunConfig {
        precision: Precision::F64,
        ..cfg("")
    };
    let task = c.load_task().unwrap();
    let (enc, _) = train_base::<f64>(&c, &task, &TrainOptions::default()).unwrap();
    let (narrow, _) = decode_checkpoint::<f32>(&encode_checkpoint(&enc, &c)).unwrap();
    for (a, b) in narrow.params().iter().zip(enc.params()) {
        for (&x, &y) in a.data().iter().zip(b.data()) {
            assert_eq!(x, y as f32);
            let ulp = (f32::from_bits(x.to_bits() + 1) - x).abs();
            assert!((x as f64 - y).abs() <= ulp as f64);
        }
    }
}

fn format_offset(e: CoreError) -> usize {
    match e {
        CoreError::Format { offset, .. } => offset,
        other => panic!("expected format error, got {other}"),
    }
}

#[test]
fn corrupt_checkpoints_are_rejected_with_offsets() {
    let c = cfg("");
    let enc = Encoder::<f32>::build(c.encoder_config([1, 1, 16]), 1).unwrap();
    let bytes = encode_checkpoint(&enc, &c);
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);

    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert_eq!(format_offset(decode_checkpoint::<f32>(&bad).unwrap_err()), 0);
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(format_offset(decode_checkpoint::<f32>(&bad).unwrap_err()), 4);
    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(format_offset(decode_checkpoint::<f32>(&long).unwrap_err()), bytes.len());
    for cut in [0, 3, 7, 12, 100, bytes.len() / 2, bytes.len() - 1] {
        let e = decode_checkpoint::<f32>(&bytes[..cut]).unwrap_err();
        assert!(format_offset(e) <= cut);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.imoc");
    std::fs::write(&path, b"NOPE").unwrap();
    assert!(checkpoint_load::<f32>(&path).is_err());
    let missing = dir.path().join("missing.imoc");
    assert!(checkpoint_load::<f32>(&missing).unwrap_err().to_string().contains("missing.imoc"));
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_checkpoint() {
    let c = RunConfig { lr: 1e38, ..cfg("") };
    let task = c.load_task().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.imoc");
    let opts = TrainOptions {
        checkpoint: Some(path.clone()),
        record_wall_time: false,
    };
    let err = train_base::<f32>(&c, &task, &opts).unwrap_err();
    match err {
        CoreError::NonFinite { epoch, .. } => assert!(epoch >= 1),
        other => panic!("{other}"),
    }
    assert!(err.to_string().contains("batch"));
    let (saved, _) = checkpoint_load::<f32>(&path).unwrap();
    let init = Encoder::<f32>::build(c.encoder_config(task.train.shape), c.seed).unwrap();
    assert_eq!(saved.params(), init.params());
}

fn epoch0_auroc(text: &str) -> f64 {
    let c = RunConfig::parse(text).unwrap();
    let task = c.load_task().unwrap();
    let (_, h) = train_base::<f32>(&c, &task, &TrainOptions::default()).unwrap();
    assert_eq!(h.records.len(), 1);
    h.records[0].auroc
}

#[test]
fn epoch_zero_auroc_is_near_chance() {
    let g = epoch0_auroc("dataset = \"gauss-clusters\"\nepochs = 0\n");
    assert!((0.3..=0.7).contains(&g), "gauss {g}");
    let b = epoch0_auroc("dataset = \"blobs-images\"\nepochs = 0\n");
    assert!((0.3..=0.7).contains(&b), "blobs {b}");
}

#[test]
fn wall_time_is_opt_in() {
    let c = RunConfig { epochs: 1, ..cfg("") };
    let task = c.load_task().unwrap();
    let opts = TrainOptions {
        checkpoint: None,
        record_wall_time: true,
    };
    let (_, h) = train_base::<f32>(&c, &task, &opts).unwrap();
    assert!(h.last().unwrap().wall_time_s > 0.0);
}

#[test]
fn config_rejects_unknown_keys_and_round_trips() {
    let err = RunConfig::parse("betta = 3").unwrap_err();
    assert!(matches!(&err, CoreError::Config { key, .. } if key == "betta"), "{err}");
    let err = RunConfig::parse("[model]\nwidth = 3").unwrap_err();
    assert!(err.to_string().contains("model.width"));
    assert!(RunConfig::parse("batch_size = 1").is_err());
    assert!(RunConfig::parse("dataset = \"mnist\"").is_err());
    assert!(RunConfig::parse("dataset = \"nope\"").is_err());

    let text = r#"
dataset = "blobs-images"
beta = 0.5
p_norm = 2
estimator = "jsd"
extension = true
precision = 64
[data]
size = 12
[model]
variant = "small"
ndf = 4
[eval]
score = "mc"
mc_h = 7
[sweep]
betas = [0.0, 1.5]
[augment]
flip_p = 0.25
"#;
    let c = RunConfig::parse(text).unwrap();
    assert!(c.entropy_squared);
    assert_eq!(c.precision, Precision::F64);
    assert_eq!(c.betas, vec![0.0, 1.5]);
    assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
}
