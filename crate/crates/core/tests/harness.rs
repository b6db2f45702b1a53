use optikonv::harness::augment::{crop_offset, hflip, CROP_PAD};
use optikonv::harness::data::{encode_batch, load_batch_file, PIXELS, RECORD_BYTES};
use optikonv::harness::experiment::{read_report, summarize};
use optikonv::harness::*;
use optikonv::optics::{read_psf, read_psf_meta};
use optikonv::tensor::Tensor;
use optikonv::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_spec(variant: Variant) -> ModelSpec {
    let mut s = ModelSpec::new(Architecture::Vgg13, variant).with_width_div(16);
    s.optical.channels = 2;
    s.optical.branch_sizes = vec![13, 3];
    s
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs: 2,
        lr0: 0.05,
        eval_batch: 32,
        seed: 11,
        ..Default::default()
    }
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

#[test]
fn loads_written_batches() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_cifar10(dir.path(), 30, 12, 5).unwrap();
    let (train, test) = load_cifar10(dir.path()).unwrap();
    assert_eq!(train.images.shape(), &[30, 3, 32, 32]);
    assert_eq!(test.images.shape(), &[12, 3, 32, 32]);
    assert!(train.labels.iter().all(|&l| l < 10));
    assert!(train.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn hand_written_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = vec![3u8];
    bytes.extend(std::iter::repeat_n(255u8, PIXELS));
    bytes.push(7);
    bytes.extend((0..PIXELS).map(|i| (i % 256) as u8));
    let p = dir.path().join("b.bin");
    std::fs::write(&p, &bytes).unwrap();
    let set = load_batch_file(&p).unwrap();
    assert_eq!(set.labels, vec![3, 7]);
    assert_eq!(set.images.data()[0], 1.0);
    assert_eq!(set.images.data()[PIXELS + 1], 1.0 / 255.0);
    assert_eq!(encode_batch(&set), bytes);
}

#[test]
fn truncated_file_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.bin");
    std::fs::write(&p, vec![1u8; RECORD_BYTES * 2 + 17]).unwrap();
    match load_batch_file(&p) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 2 * RECORD_BYTES as u64),
        other => panic!("{other:?}"),
    }
}

#[test]
fn full_dataset_shapes_when_present() {
    let Some(dir) = std::env::var_os("OPTIKONV_DATA") else {
        eprintln!("OPTIKONV_DATA not set; skipping full-file shape check");
        return;
    };
    let (train, test) = load_cifar10(dir).unwrap();
    assert_eq!(train.images.shape(), &[50000, 3, 32, 32]);
    assert_eq!(test.images.shape(), &[10000, 3, 32, 32]);
}

#[test]
fn eval_mode_only_normalizes() {
    let set = synthetic_cifar10(3, 1).unwrap();
    let cfg = AugmentConfig::default();
    let a = augment_normalize(&set.images, &cfg, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = augment_normalize(&set.images, &cfg, false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);
    let idx = [1, 2, 5, 7];
    let (x, y) = (set.images.at(&idx), a.at(&idx));
    assert!((y - (x - cfg.mean[2]) / cfg.std[2]).abs() < 1e-6);
}

#[test]
fn flip_is_an_involution() {
    let set = synthetic_cifar10(1, 2).unwrap();
    let mut img = set.images.data().to_vec();
    hflip(&mut img, 3, 32, 32);
    assert_ne!(img, set.images.data());
    hflip(&mut img, 3, 32, 32);
    assert_eq!(img, set.images.data());
    let cfg = AugmentConfig {
        crop: false,
        flip_prob: 1.0,
        mean: [0.0; 3],
        std: [1.0; 3],
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let once = augment_normalize(&set.images, &cfg, true, &mut rng).unwrap();
    let twice = augment_normalize(&once, &cfg, true, &mut rng).unwrap();
    assert_eq!(twice, set.images);
}

#[test]
fn crop_offsets_are_uniform() {
    let side = 2 * CROP_PAD + 1;
    let mut counts = vec![0u32; side * side];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws = 10_000;
    for _ in 0..draws {
        let (y, x) = crop_offset(&mut rng);
        counts[y * side + x] += 1;
    }
    let expected = draws as f64 / counts.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // upper 1% point of chi-square with 80 degrees of freedom
    assert!(chi2 < 112.33, "chi2 = {chi2}");
}

#[test]
fn vgg13_mac_table() {
    let m = build_model(&ModelSpec::new(Architecture::Vgg13, Variant::Electronic), 0).unwrap();
    let r = count_macs(&m, [1, 3, 32, 32]).unwrap();
    assert_eq!(r.rows[0].macs, 1_769_472);
    assert_eq!(r.rows.last().unwrap().macs, 5_120);
    assert_eq!(r.electronic, r.rows.iter().map(|x| x.macs).sum::<u64>());
    assert!((r.mflops() - 229.0).abs() <= 0.05 * 229.0, "{}", r.mflops());
    assert_eq!(count_macs(&m, [4, 3, 32, 32]).unwrap().electronic, 4 * r.electronic);
    assert_eq!(r.reduction_vs(&r), 0.0);
}

#[test]
fn codesign_excludes_optical_work() {
    let base = build_model(&ModelSpec::new(Architecture::Vgg13, Variant::Electronic), 0).unwrap();
    let co = build_model(&ModelSpec::new(Architecture::Vgg13, Variant::Codesign), 0).unwrap();
    let rb = count_macs(&base, [1, 3, 32, 32]).unwrap();
    let rc = count_macs(&co, [1, 3, 32, 32]).unwrap();
    let optical: Vec<_> = rc.rows.iter().filter(|r| r.domain == Domain::Optical).collect();
    assert_eq!(optical.len(), 1);
    assert_eq!(rc.optical, 36 * 169 * 1024);
    let electronic: u64 = rc.rows.iter().filter(|r| r.domain == Domain::Electronic).map(|r| r.macs).sum();
    assert_eq!(rc.electronic, electronic);
    let stage1 = 1_769_472 + 64 * 64 * 9 * 1024;
    assert_eq!(rb.electronic - rc.electronic, stage1 - 36 * 64 * 1024);
}

#[test]
fn inconsistent_specs_are_config_errors() {
    let mut s = ModelSpec::new(Architecture::Vgg13, Variant::Codesign);
    s.optical.expand_to = 32;
    assert!(matches!(build_model(&s, 0), Err(Error::Config(_))));
    let mut s = ModelSpec::new(Architecture::Vgg13, Variant::Electronic);
    s.stages_removed = vec!["stage1_conv1".into()];
    assert!(matches!(build_model(&s, 0), Err(Error::Config(_))));
    assert!(matches!("vgg16".parse::<Architecture>(), Err(Error::Config(_))));
}

#[test]
fn training_is_deterministic() {
    let data = synthetic_cifar10(48, 6).unwrap();
    let run = |dir: &std::path::Path| {
        single_thread(|| {
            let mut m = build_model(&tiny_spec(Variant::Codesign), 3).unwrap();
            train(&mut m, &data, None, &tiny_config(), Some(dir)).unwrap()
        })
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ha = run(a.path());
    let hb = run(b.path());
    let losses = |h: &[EpochMetrics]| h.iter().map(|m| m.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&ha), losses(&hb));
    for e in 0..2 {
        let name = format!("epoch_{e}.tnsr");
        assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap());
    }
}

#[test]
fn optical_branches_receive_gradient_every_epoch() {
    let data = synthetic_cifar10(32, 7).unwrap();
    let mut m = build_model(&tiny_spec(Variant::Codesign), 1).unwrap();
    let before: Vec<Tensor> = m.optical_branch_ids().iter().map(|&id| m.store.tensor(id).clone()).collect();
    let h = train(&mut m, &data, None, &tiny_config(), None).unwrap();
    assert!(h.iter().all(|e| e.optical_grad_norm > 0.0));
    for (id, b) in m.optical_branch_ids().into_iter().zip(before) {
        assert!(m.store.tensor(id).max_abs_diff(&b).unwrap() > 0.0);
    }
    let e = build_model(&tiny_spec(Variant::Electronic), 1).unwrap();
    assert!(e.optical_branch_ids().is_empty());
}

#[test]
fn non_finite_loss_aborts_with_last_checkpoint() {
    let data = synthetic_cifar10(32, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut m = build_model(&tiny_spec(Variant::Electronic), 2).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..tiny_config()
    };
    let err = train_with(&mut m, &data, None, &cfg, Some(dir.path()), |e, model| {
        if e.epoch == 0 {
            let id = model.store.find("classifier.weight").unwrap();
            model.store.tensor_mut(id).data_mut()[0] = f32::NAN;
        }
        Ok(())
    })
    .unwrap_err();
    match err {
        Error::TrainingDiverged { epoch, checkpoint } => {
            assert_eq!(epoch, 1);
            let ckpt = checkpoint.unwrap();
            assert_eq!(ckpt, dir.path().join("epoch_0.tnsr"));
            let mut fresh = build_model(&tiny_spec(Variant::Electronic), 9).unwrap();
            fresh.load(&ckpt).unwrap();
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let data = synthetic_cifar10(20, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut m = build_model(&tiny_spec(Variant::Codesign), 4).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..tiny_config()
    };
    train(&mut m, &data, None, &cfg, Some(dir.path())).unwrap();
    let mut back = build_model(&tiny_spec(Variant::Codesign), 5).unwrap();
    back.load(dir.path().join("epoch_0.tnsr")).unwrap();
    assert_eq!(evaluate(&mut m, &data, &cfg).unwrap(), evaluate(&mut back, &data, &cfg).unwrap());
}

#[test]
fn experiment_without_training_reports_macs_and_psfs() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        out_dir: dir.path().to_path_buf(),
        train: TrainConfig {
            epochs: 0,
            ..Default::default()
        },
        ..Default::default()
    };
    let report = run_experiment(&config).unwrap();
    assert_eq!(report.steps[0].reduction, 0.0);
    assert!(report.steps[2].reduction >= 30.0);
    let lines = read_report(&report.report_path).unwrap();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0].reduction, 0.0);
    assert!((lines[0].macs - 229.0).abs() < 0.05 * 229.0);
    for step in &report.steps[1..] {
        let p = step.psf_image.as_ref().unwrap();
        let psf = read_psf(p).unwrap();
        assert!((psf.sum() - 1.0).abs() < 1e-6);
        assert!((read_psf_meta(p).unwrap().sum - 1.0).abs() < 1e-6);
    }
    assert!(summarize(&lines).contains("remove_stage2"));
}

#[test]
fn experiment_with_training_writes_epoch_lines() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig {
        out_dir: dir.path().to_path_buf(),
        width_div: 16,
        train: TrainConfig {
            epochs: 1,
            ..tiny_config()
        },
        ..Default::default()
    };
    config.optical.channels = 2;
    let train_set = synthetic_cifar10(32, 10).unwrap();
    let test_set = synthetic_cifar10(16, 11).unwrap();
    let report = run_experiment_on(&config, Some((&train_set, &test_set))).unwrap();
    let lines = read_report(&report.report_path).unwrap();
    assert_eq!(lines.len(), 3);
    for l in &lines {
        assert_eq!(l.epoch, Some(0));
        assert!(l.loss.unwrap().is_finite());
        assert!((0.0..=100.0).contains(&l.top1.unwrap()));
    }
    assert!(dir.path().join("baseline").join("epoch_0.tnsr").exists());
}

#[test]
fn predictions_equal_labels_is_full_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let labels: Vec<usize> = (0..100).map(|_| rng.random_range(0..10)).collect();
    assert_eq!(top1(&labels, &labels), 100.0);
}
