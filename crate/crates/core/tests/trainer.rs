use std::fs;

use vislang::checkpoint::Checkpoint;
use vislang::config::TrainConfig;
use vislang::data::{generate, CaptionedImage};
use vislang::params::ParamGroup;
use vislang::trainer::{pretrain, sample_negatives, Pretrainer, CSV_HEADER};
use vislang::{Error, Tensor};

fn small_config(epochs: usize, freeze: usize) -> TrainConfig {
    let mut cfg = TrainConfig::toy();
    for (k, v) in [
        ("c", "16"),
        ("layers", "1"),
        ("heads", "2"),
        ("mlp_ratio", "2"),
        ("k", "16"),
        ("batch_images", "3"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.epochs = epochs;
    cfg.decay_epochs = if epochs > 2 { vec![2] } else { Vec::new() };
    cfg.freeze_epochs = freeze;
    cfg.seed = 21;
    cfg
}

fn small_data() -> Vec<CaptionedImage> {
    generate(21, 0, 9).unwrap()
}

fn snapshot(t: &Pretrainer, group: ParamGroup) -> Vec<Tensor> {
    let s = &t.model.store;
    s.ids().filter(|&id| s.group(id) == group).map(|id| s.get(id).clone()).collect()
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pretrain(small_config(2, 1), small_data(), a.path(), None).unwrap();
    pretrain(small_config(2, 1), small_data(), b.path(), None).unwrap();
    for f in ["metrics.csv", "latest.ckpt", "vocab.txt", "config.txt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 3);
    for row in &lines[1..] {
        assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
    }
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    let mut cfg = small_config(3, 1);
    cfg.keep_epoch_checkpoints = true;
    pretrain(cfg, small_data(), full.path(), None).unwrap();

    let resumed = tempfile::tempdir().unwrap();
    let csv = fs::read_to_string(full.path().join("metrics.csv")).unwrap();
    let first_two: String = csv.lines().take(3).map(|l| format!("{l}\n")).collect();
    fs::write(resumed.path().join("metrics.csv"), first_two).unwrap();
    let summary = pretrain(
        small_config(3, 1),
        small_data(),
        resumed.path(),
        Some(&full.path().join("epoch_1.ckpt")),
    )
    .unwrap();
    assert_eq!(summary.history.len(), 1);
    assert_eq!(summary.history[0].epoch, 2);
    assert_eq!(
        fs::read(full.path().join("latest.ckpt")).unwrap(),
        fs::read(resumed.path().join("latest.ckpt")).unwrap()
    );
    assert_eq!(fs::read_to_string(resumed.path().join("metrics.csv")).unwrap(), csv);
}

#[test]
fn frozen_epochs_leave_the_conv_blocks_untouched() {
    let mut t = Pretrainer::new(small_config(2, 1), small_data()).unwrap();
    let conv0 = snapshot(&t, ParamGroup::EncoderConv);
    let rest0 = snapshot(&t, ParamGroup::Adaptive);
    let book0 = t.model.codebook.clone();
    t.run_epoch().unwrap();
    assert_eq!(snapshot(&t, ParamGroup::EncoderConv), conv0);
    assert_ne!(snapshot(&t, ParamGroup::Adaptive), rest0);
    assert_ne!(t.model.codebook, book0);
    assert_eq!(t.state.sgd_step, 0);
    assert!(t.state.velocity.iter().all(Option::is_none));
    t.run_epoch().unwrap();
    let conv1 = snapshot(&t, ParamGroup::EncoderConv);
    assert!(conv1.iter().zip(&conv0).all(|(a, b)| a != b));
    assert_eq!(t.state.sgd_step, 3);
}

#[test]
fn conv_blocks_use_sgd_and_everything_else_adamw() {
    let mut t = Pretrainer::new(small_config(1, 0), small_data()).unwrap();
    let ids = t.batches(0)[0].clone();
    let mut hist = vec![0; t.cfg.k];
    t.step(0, 0, &ids, &mut hist).unwrap();
    let store = &t.model.store;
    for id in store.ids() {
        let i = id.index();
        let sgd = t.state.velocity[i].is_some();
        let adam = t.state.m[i].is_some() && t.state.v[i].is_some();
        match store.group(id) {
            ParamGroup::EncoderConv => assert!(sgd && !adam, "{}", store.name(id)),
            ParamGroup::Adaptive => assert!(adam && !sgd, "{}", store.name(id)),
        }
    }
    assert!(store.ids().any(|id| store.group(id) == ParamGroup::EncoderConv));
    let proj = store.id("encoder.proj.weight").unwrap();
    assert_eq!(store.group(proj), ParamGroup::Adaptive);
}

#[test]
fn batches_cover_every_image_once_per_epoch() {
    let t = Pretrainer::new(small_config(2, 0), small_data()).unwrap();
    for epoch in 0..2 {
        let mut all: Vec<usize> = t.batches(epoch).concat();
        assert!(t.batches(epoch).iter().all(|b| b.len() == 3));
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
    }
    assert_ne!(t.batches(0), t.batches(1));
}

#[test]
fn negatives_are_false_of_the_scene_and_distinct() {
    let data = generate(22, 0, 50).unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    for i in 0..data.len() {
        let neg = sample_negatives(&data, i, &mut rng).unwrap();
        assert_ne!(neg[0], neg[1]);
        for n in &neg {
            assert!(!data[i].captions.contains(n));
            assert!(!vislang::data::caption_holds(n, &data[i].scene).unwrap());
        }
    }
    assert!(matches!(sample_negatives(&data[..1], 0, &mut rng), Err(Error::Sampling(_))));
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Pretrainer::new(small_config(1, 0), small_data()).unwrap();
    let id = trainer.model.store.id("head.itm").unwrap();
    let mut w = trainer.model.store.get(id).clone();
    w.data_mut()[0] = f64::NAN;
    trainer.model.store.set("head.itm", w).unwrap();
    let ck = trainer.checkpoint();
    let path = dir.path().join("poisoned.ckpt");
    ck.save(&path).unwrap();
    let err = pretrain(small_config(1, 0), small_data(), dir.path(), Some(&path)).unwrap_err();
    assert!(matches!(err, Error::NonFinite { epoch: 0, batch: 0, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert!(dir.path().join("nonfinite.txt").exists());
    assert!(Checkpoint::load(&path).is_ok());
}
