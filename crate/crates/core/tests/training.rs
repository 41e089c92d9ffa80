use std::path::Path;

use rand::SeedableRng;
use upmnet::aware::AwareKind;
use upmnet::checkpoint::Checkpoint;
use upmnet::dataset::{load_dataset, CameraId, DatasetManifest, TrainingView};
use upmnet::features::PartFeatures;
use upmnet::synth::{generate_synthetic, SynthSpec};
use upmnet::tensor_file::Dims;
use upmnet::trainer::{sample_batch, sample_batch_indices, TrainConfig, Trainer};
use upmnet::Error;

fn dataset(dir: &Path, spec: &SynthSpec) -> DatasetManifest {
    generate_synthetic(spec, dir).unwrap();
    load_dataset(dir).unwrap()
}

fn easy(dir: &Path) -> (DatasetManifest, TrainingView) {
    let m = dataset(dir, &SynthSpec::new(12, 2, 4, Dims::new(8, 4, 16), 1));
    let v = m.training_view();
    (m, v)
}

fn small_config() -> TrainConfig {
    TrainConfig {
        k: 4,
        batch_size: 8,
        total_iterations: 60,
        reduced_channels: 8,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn infer_all(trainer: &Trainer) -> Vec<Vec<Vec<f64>>> {
    let refs: Vec<&PartFeatures> = trainer.training_set().features.iter().collect();
    trainer.model().infer(&refs).unwrap()
}

#[test]
fn same_seed_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let (_, view) = easy(dir.path());
    let mut a = Trainer::new(&view, small_config()).unwrap();
    let mut b = Trainer::new(&view, small_config()).unwrap();
    for _ in 0..30 {
        let (ra, rb) = (a.step().unwrap(), b.step().unwrap());
        assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
    }
    assert_eq!(a.checkpoint(), b.checkpoint());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (_, view) = easy(&dir.path().join("data"));
    let mut full = Trainer::new(&view, small_config()).unwrap();
    full.run(|_| {}).unwrap();

    let mut first = Trainer::new(&view, small_config()).unwrap();
    first.run_until(25, |_| {}).unwrap();
    first.checkpoint().save(&dir.path().join("mid")).unwrap();
    let mut resumed = Trainer::resume(&view, Checkpoint::load(&dir.path().join("mid")).unwrap()).unwrap();
    resumed.run(|_| {}).unwrap();

    assert_eq!(resumed.iteration(), 60);
    assert_eq!(resumed.checkpoint(), full.checkpoint());
    resumed.checkpoint().save(&dir.path().join("resumed")).unwrap();
    full.checkpoint().save(&dir.path().join("full")).unwrap();
    for entry in std::fs::read_dir(dir.path().join("full/tensors")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(dir.path().join("full/tensors").join(&name)).unwrap();
        let b = std::fs::read(dir.path().join("resumed/tensors").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?}");
    }
    assert_eq!(
        std::fs::read(dir.path().join("full/header.json")).unwrap(),
        std::fs::read(dir.path().join("resumed/header.json")).unwrap()
    );
}

#[test]
fn loss_trends_down_over_200_steps() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SynthSpec::new(40, 2, 8, Dims::new(8, 4, 32), 3);
    spec.noise = 1.0;
    spec.camera_shift = 1.0;
    spec.occlusion_probability = 0.3;
    let m = dataset(dir.path(), &spec);
    let cfg = TrainConfig {
        k: 4,
        batch_size: 16,
        total_iterations: 200,
        reduced_channels: 16,
        // the end of warmup switches the cross term on, a step in the loss
        warmup_epochs: 0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&m.training_view(), cfg).unwrap();
    let losses: Vec<f64> = (0..200).map(|_| t.step().unwrap().loss).collect();
    let ma: Vec<f64> = losses.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    let n = ma.len() as f64;
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = ma.iter().sum::<f64>() / n;
    let slope = ma.iter().enumerate().map(|(i, y)| (i as f64 - mean_x) * (y - mean_y)).sum::<f64>()
        / ma.iter().enumerate().map(|(i, _)| (i as f64 - mean_x).powi(2)).sum::<f64>();
    assert!(ma.last().unwrap() < ma.first().unwrap(), "{} -> {}", ma[0], ma.last().unwrap());
    assert!(slope < 0.0, "moving-average slope {slope}");
}

#[test]
fn warmup_pins_cross_anchors_then_releases_them() {
    let dir = tempfile::tempdir().unwrap();
    let (_, view) = easy(dir.path());
    let cfg = TrainConfig {
        warmup_epochs: 1,
        ..small_config()
    };
    let mut t = Trainer::new(&view, cfg).unwrap();
    // 12 ids x 2 cams x 4 frames = 96 images, M = 8
    assert_eq!(t.epoch_len(), 12);
    assert_eq!(t.warmup_iterations(), 12);
    for _ in 0..12 {
        assert!(t.warmup_active());
        let r = t.step().unwrap();
        assert!(r.warmup);
        assert_eq!(t.bank().cross_data(), t.bank().intra_data());
    }
    assert!(!t.warmup_active());
    let r = t.step().unwrap();
    assert!(!r.warmup);
    assert_ne!(t.bank().cross_data(), t.bank().intra_data());
}

#[test]
fn warmup_for_the_whole_run_keeps_banks_equal() {
    let dir = tempfile::tempdir().unwrap();
    let (_, view) = easy(dir.path());
    let cfg = TrainConfig {
        warmup_epochs: 5,
        ..small_config()
    };
    let mut t = Trainer::new(&view, cfg).unwrap();
    assert_eq!(t.warmup_iterations(), 60);
    t.run(|_| {}).unwrap();
    assert_eq!(t.iteration(), 60);
    assert_eq!(t.bank().cross_data(), t.bank().intra_data());
}

#[test]
fn local_kind_keeps_features_while_anchors_move() {
    let dir = tempfile::tempdir().unwrap();
    let (_, view) = easy(dir.path());
    let cfg = TrainConfig {
        aware_kind: AwareKind::Local,
        ..small_config()
    };
    let mut t = Trainer::new(&view, cfg).unwrap();
    let before = infer_all(&t);
    let anchors = t.bank().intra_data().to_vec();
    for _ in 0..10 {
        t.step().unwrap();
    }
    assert_eq!(infer_all(&t), before);
    assert_ne!(t.bank().intra_data(), anchors.as_slice());
}

#[test]
fn near_zero_loss_local_run_changes_nothing_but_anchor_time() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SynthSpec::new(6, 2, 3, Dims::new(4, 2, 6), 2);
    spec.noise = 0.0;
    let m = dataset(dir.path(), &spec);
    let cfg = TrainConfig {
        k: 2,
        batch_size: 6,
        total_iterations: 10,
        aware_kind: AwareKind::Local,
        margin: 0.0,
        lambda: 0.0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&m.training_view(), cfg).unwrap();
    let model = t.model().clone();
    let before = infer_all(&t);
    for _ in 0..10 {
        assert!(t.step().unwrap().loss < 1e-12);
    }
    assert_eq!(t.model(), &model);
    assert_eq!(infer_all(&t), before);
    assert_eq!(t.bank().t, 10);
}

#[test]
fn batches_always_span_two_cameras() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), &SynthSpec::new(20, 2, 8, Dims::new(8, 4, 8), 4));
    let view = m.training_view();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let batch = sample_batch(&view, 64, &mut rng).unwrap();
        let cams: std::collections::BTreeSet<_> = batch.iter().map(|r| r.tracklet.camera).collect();
        assert!(cams.len() >= 2);
        let ids: std::collections::BTreeSet<_> = batch.iter().map(|r| &r.image_id).collect();
        assert_eq!(ids.len(), 64);
    }
}

#[test]
fn two_single_image_cameras_give_the_only_valid_batch() {
    let cams = [CameraId(0), CameraId(1)];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let mut b = sample_batch_indices(&cams, 2, &mut rng).unwrap();
        b.sort_unstable();
        assert_eq!(b, vec![0, 1]);
    }
    assert!(matches!(
        sample_batch_indices(&[CameraId(0), CameraId(0)], 2, &mut rng),
        Err(Error::DatasetTooSmall(_))
    ));
    assert!(matches!(sample_batch_indices(&cams, 3, &mut rng), Err(Error::DatasetTooSmall(_))));
}

#[test]
fn defaults_fill_unset_fields() {
    let cfg = TrainConfig::from_json("{}").unwrap();
    assert_eq!((cfg.eta, cfg.margin, cfg.lambda, cfg.reduced_channels), (0.5, 0.5, 1.0, 256));
    assert_eq!((cfg.k, cfg.batch_size), (8, 64));
    assert!(matches!(TrainConfig::from_json(r#"{"batch_size": 1}"#), Err(Error::InvalidConfig(_))));
    assert!(matches!(TrainConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Parse { .. })));
}

#[test]
fn indivisible_partition_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, view) = easy(dir.path());
    let cfg = TrainConfig { k: 3, ..small_config() };
    assert!(matches!(Trainer::new(&view, cfg), Err(Error::IndivisibleHeight { height: 8, k: 3 })));
}
