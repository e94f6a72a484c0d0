//! Trainer determinism, checkpoint persistence and failure modes.

mod common;

use std::fs;

use gzf::cli::run_training;
use gzf::data::DatasetManifest;
use gzf::model::{Forward, GazeClassifier, GazeEncoderKind};
use gzf::train::{Checkpoint, DataSplits, TrainConfig, Trainer};
use gzf::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splits(dir: &std::path::Path) -> DataSplits {
    common::tiny_dataset(dir);
    let m = DatasetManifest::load(dir.join("manifest.json")).unwrap();
    DataSplits::from_manifest(&m, &common::tiny_train(), common::tiny_model().dsge.seq_len).unwrap()
}

fn read(dir: &std::path::Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn same_config_and_seed_give_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = splits(&tmp.path().join("data"));
    let cfg = common::tiny_run();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_training(&cfg, &data, &a).unwrap();
    run_training(&cfg, &data, &b).unwrap();
    for f in ["metrics.jsonl", "metrics.csv", "summary.json", "checkpoint.gzf", "config.resolved.json"] {
        assert_eq!(read(&a, f), read(&b, f), "{f} differs");
    }

    let mut other = cfg.clone();
    other.train.seed += 1;
    let c = tmp.path().join("c");
    run_training(&other, &data, &c).unwrap();
    assert_ne!(read(&a, "checkpoint.gzf"), read(&c, "checkpoint.gzf"));
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = splits(tmp.path());
    let cfg = common::tiny_run();

    let mut full = Trainer::new(&cfg.model, &cfg.train, &data).unwrap();
    full.run().unwrap();

    let mut first = Trainer::new(&cfg.model, &cfg.train, &data).unwrap();
    first.run_epoch().unwrap();
    first.run_epoch().unwrap();
    let bytes = first.checkpoint().to_bytes();
    drop(first);
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::resume(ckpt, &data).unwrap();
    resumed.run().unwrap();

    assert_eq!(full.state().records, resumed.state().records);
    assert_eq!(full.state().params.tensors(), resumed.state().params.tensors());
    assert_eq!(full.summary().unwrap(), resumed.summary().unwrap());
    assert_eq!(full.checkpoint().to_bytes(), resumed.checkpoint().to_bytes());
}

#[test]
fn initial_loss_is_near_log_class_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = splits(tmp.path());
    for gaze in GazeEncoderKind::ALL {
        let mut model_cfg = common::tiny_model();
        model_cfg.gaze = gaze;
        let (model, store) = GazeClassifier::new(&model_cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut total = 0.0;
        for s in &data.train {
            let mut f = Forward::eval(&store);
            let z = model.logits(&mut f, &s.image, &s.gaze).unwrap();
            let l = f.graph.cross_entropy(z, &[s.label]).unwrap();
            total += f.graph.value(l).data()[0];
        }
        let mean = total / data.train.len() as f64;
        let ln_c = 2f64.ln();
        assert!((mean - ln_c).abs() < 0.1 * ln_c, "{gaze}: {mean}");
    }
}

#[test]
fn first_epoch_loss_starts_near_log_class_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = splits(tmp.path());
    let cfg = common::tiny_run();
    let mut t = Trainer::new(&cfg.model, &cfg.train, &data).unwrap();
    let r = t.run_epoch().unwrap();
    assert!((r.train_loss - 2f64.ln()).abs() < 0.1 * 2f64.ln(), "{}", r.train_loss);
    assert_eq!(r.lr_multiplier, 1.0);
}

#[test]
fn schedule_runs_t_plus_one_epochs_and_ends_at_eta_min() {
    let tmp = tempfile::tempdir().unwrap();
    let data = splits(tmp.path());
    let cfg = common::tiny_run();
    let mut t = Trainer::new(&cfg.model, &cfg.train, &data).unwrap();
    t.run().unwrap();
    let recs = &t.state().records;
    assert!(t.state().stopped_early || recs.len() == cfg.train.epochs + 1);
    if !t.state().stopped_early {
        assert!((recs.last().unwrap().lr_multiplier - cfg.train.eta_min).abs() < 1e-12);
    }
    assert!(t.run_epoch().is_err());
}

#[test]
fn frozen_image_encoder_stays_fixed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = splits(tmp.path());
    let cfg = common::tiny_run();
    let train = TrainConfig {
        freeze_image_encoder: true,
        weight_decay: 0.0,
        ..cfg.train.clone()
    };
    let mut t = Trainer::new(&cfg.model, &train, &data).unwrap();
    let before = t.state().params.clone();
    t.run_epoch().unwrap();
    let after = &t.state().params;
    for ((name, a), (_, b)) in before.iter().zip(after.iter()) {
        if name.starts_with("vit.") {
            assert_eq!(a, b, "{name} moved");
        }
    }
    assert!(before.iter().zip(after.iter()).any(|((_, a), (_, b))| a != b));
}

#[test]
fn divergence_is_a_numeric_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = splits(tmp.path());
    let cfg = common::tiny_run();
    let train = TrainConfig {
        base_lr: 1e12,
        grad_clip: None,
        ..cfg.train.clone()
    };
    let mut t = Trainer::new(&cfg.model, &train, &data).unwrap();
    let err = t.run().unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert!(err.to_string().contains("epoch"), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn class_count_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = splits(tmp.path());
    let mut model = common::tiny_model();
    model.num_classes = 3;
    let err = Trainer::new(&model, &common::tiny_train(), &data).err().unwrap();
    assert_eq!(err.exit_code(), 1);
}

mod checkpoint_format {
    use super::*;

    fn bytes() -> Vec<u8> {
        let tmp = tempfile::tempdir().unwrap();
        let data = splits(tmp.path());
        let cfg = common::tiny_run();
        let mut t = Trainer::new(&cfg.model, &cfg.train, &data).unwrap();
        t.run_epoch().unwrap();
        t.checkpoint().to_bytes()
    }

    fn format_error(b: &[u8]) -> String {
        match Checkpoint::from_bytes(b) {
            Err(e @ Error::Format(_)) => {
                assert_eq!(e.exit_code(), 2);
                e.to_string()
            }
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let b = bytes();
        let c = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(c.to_bytes(), b);
        assert_eq!(c.epoch, 1);
        assert_eq!(c.group("best").len(), c.group("param").len());
    }

    #[test]
    fn corruption_is_reported_with_an_offset() {
        let b = bytes();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(format_error(&bad).contains("byte 0"));

        let msg = format_error(&b[..b.len() - 3]);
        assert!(msg.contains("truncated"), "{msg}");

        let mut long = b.clone();
        long.extend_from_slice(&[0; 8]);
        assert!(format_error(&long).contains("trailing"));

        format_error(&b[..7]);

        let text = String::from_utf8_lossy(&b).into_owned();
        let at = text.find("\"version\":1").unwrap();
        let mut ver = b.clone();
        ver[at + 10] = b'7';
        assert!(format_error(&ver).contains("version 7"));

        let at = text.find("\"base_lr\":").unwrap() + 10;
        let mut hash = b.clone();
        hash[at] = if hash[at] == b'1' { b'2' } else { b'1' };
        assert!(format_error(&hash).contains("hash"));
    }
}
