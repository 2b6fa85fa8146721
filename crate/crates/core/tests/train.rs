mod common;

use common::{composites, toy_train_config};
use egoseg::eval::evaluate;
use egoseg::imgproc::JitterParams;
use egoseg::thundernet::image_batch;
use egoseg::train::*;
use egoseg::Error;

#[test]
fn first_batch_loss_is_near_weighted_ln2() {
    let train = composites(8, 48, 1);
    let weights = ClassWeights::from_masks(train.iter().map(|s| &s.mask)).unwrap();
    let cfg = toy_train_config(1);
    let mut t = Trainer::new(cfg, weights, &train).unwrap();
    let (x, labels) = t.make_batch(1, &[0, 1, 2, 3], &train).unwrap();
    let baseline = labels
        .iter()
        .map(|&y| weights.as_array()[y as usize] * std::f64::consts::LN_2)
        .sum::<f64>()
        / labels.len() as f64;
    let loss = t.step(&x, &labels).unwrap();
    assert!((loss / baseline - 1.0).abs() < 0.2, "loss {loss} vs baseline {baseline}");
}

#[test]
fn toy_model_overfits_four_composites() {
    let train = composites(4, 48, 2);
    let weights = ClassWeights::from_masks(train.iter().map(|s| &s.mask)).unwrap();
    let mut cfg = toy_train_config(300);
    cfg.crop_scale = [1.0, 1.0];
    cfg.jitter = JitterParams::none();
    let mut t = Trainer::new(cfg, weights, &train).unwrap();
    let mut best = 0.0;
    let mut steps = 0;
    while steps < 300 {
        let rec = t.run_epoch(&train, &train).unwrap();
        steps += 1;
        best = rec.val_iou_human;
        if best > 0.95 {
            break;
        }
    }
    let (report, _) = evaluate(&t.model, &train, 4).unwrap();
    assert!(report.dataset.human > 0.95, "IoU {} after {steps} steps (last epoch {best})", report.dataset.human);
    let losses = &t.history.step_losses;
    let window = 10.min(losses.len());
    let smooth: Vec<f64> = losses.windows(window).take(41).map(|w| w.iter().sum::<f64>() / window as f64).collect();
    assert!(smooth.windows(2).all(|p| p[1] <= p[0]), "smoothed loss increased: {smooth:?}");
}

#[test]
fn epoch_checkpoints_are_deterministic_and_resumable() {
    let train = composites(6, 48, 3);
    let val = composites(2, 48, 4);
    let weights = ClassWeights::from_masks(train.iter().map(|s| &s.mask)).unwrap();
    let cfg = TrainConfig { batch_size: 3, ..toy_train_config(2) };
    let run = |dir: &std::path::Path, threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            let mut t = Trainer::new(cfg.clone(), weights, &train).unwrap();
            fit(&mut t, &train, &val, Some(dir)).unwrap()
        })
    };
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ha = run(a.path(), 1);
    let hb = run(b.path(), 4);
    assert_eq!(ha.epochs, hb.epochs);
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    for f in ["epoch_001.ckpt", "epoch_001.adam", "epoch_002.ckpt", "epoch_002.adam", "history.csv", "best.ckpt"] {
        assert_eq!(read(&a, f), read(&b, f), "{f} differs across thread counts");
    }
    let csv = String::from_utf8(read(&a, "history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    std::fs::copy(a.path().join("epoch_001.ckpt"), c.path().join("epoch_001.ckpt")).unwrap();
    std::fs::copy(a.path().join("epoch_001.adam"), c.path().join("epoch_001.adam")).unwrap();
    std::fs::copy(a.path().join("history.csv"), c.path().join("history.csv")).unwrap();
    let mut t = Trainer::resume(&c.path().join("epoch_001.ckpt"), cfg.clone(), weights).unwrap();
    assert_eq!(t.completed_epochs(), 1);
    let hc = fit(&mut t, &train, &val, Some(c.path())).unwrap();
    assert_eq!(read(&a, "epoch_002.ckpt"), read(&c, "epoch_002.ckpt"));
    assert_eq!(read(&a, "epoch_002.adam"), read(&c, "epoch_002.adam"));
    assert_eq!(hc.epochs, ha.epochs);
}

#[test]
fn empty_splits_and_divergence_are_reported() {
    let train = composites(2, 48, 5);
    let weights = ClassWeights::from_masks(train.iter().map(|s| &s.mask)).unwrap();
    let mut t = Trainer::new(toy_train_config(1), weights, &train).unwrap();
    assert!(matches!(t.run_epoch(&train, &[]), Err(Error::Data(_))));

    let images: Vec<_> = train.iter().map(|s| &s.image).collect();
    let mut x = image_batch::<f32>(&images).unwrap();
    x.data_mut()[0] = f32::NAN;
    let labels: Vec<u8> = train.iter().flat_map(|s| s.mask.as_slice().to_vec()).collect();
    match t.step(&x, &labels) {
        Err(e @ Error::NonFiniteLoss { epoch: 1, .. }) => assert!(e.is_numeric()),
        other => panic!("expected non-finite loss, got {other:?}"),
    }
}

#[test]
fn class_weights_from_manifest_masks() {
    use egoseg::imgproc::{io, BinaryMask};
    use egoseg::synth::{DatasetManifest, ManifestRecord, Pose, Source, Split};
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for (i, fg_rows) in [2usize, 2, 0, 4].into_iter().enumerate() {
        let r = ManifestRecord::new(format!("r{i}"), "u", Pose::StandFront, Split::Train, Source::Composite);
        io::write_mask(&dir.path().join(&r.mask_path), &BinaryMask::from_fn(10, 10, |y, _| y < fg_rows)).unwrap();
        records.push(r);
    }
    let mut val = ManifestRecord::new("v", "w", Pose::StandFront, Split::Val, Source::Composite);
    val.mask_path = "missing.png".into();
    records.push(val);
    let m = DatasetManifest { records };
    let w = compute_class_weights(&m, dir.path()).unwrap();
    assert_eq!(w.as_array(), [0.625, 2.5]);
    assert!(compute_class_weights(&DatasetManifest::default(), dir.path()).is_err());
}
