use std::fs;

use vislang::config::TrainConfig;
use vislang::data::{color_questions, generate, read_ppm, CaptionedImage, Color};
use vislang::downstream::{
    eval_retrieval, finetune_classify, finetune_retrieval, inspect_vd, score_matrix, ClassifierHead, ClassifyExample,
    ClassifyMode,
};
use vislang::model::Model;
use vislang::params::ParamGroup;
use vislang::trainer::Pretrainer;
use vislang::{Error, Tensor};

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::toy();
    for (k, v) in [
        ("c", "16"),
        ("layers", "1"),
        ("heads", "2"),
        ("mlp_ratio", "2"),
        ("k", "16"),
        ("batch_images", "3"),
        ("epochs", "1"),
        ("freeze_epochs", "0"),
        ("decay_epochs", ""),
        ("ft_epochs", "2"),
        ("ft_decay_epochs", "1"),
        ("ft_batch", "3"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.seed = 31;
    cfg
}

fn setup(n: usize) -> (Model, TrainConfig, Vec<CaptionedImage>) {
    let cfg = small_config();
    let data = generate(31, 0, n).unwrap();
    let model = Pretrainer::new(cfg.clone(), data.clone()).unwrap().model;
    (model, cfg, data)
}

#[test]
fn retrieval_fine_tuning_trains_everything_but_the_codebook() {
    let (mut model, mut cfg, data) = setup(9);
    let book = model.codebook.clone();
    let before = model.store.clone();
    for t in [2, 3] {
        cfg.ft_batch = t;
        let losses = finetune_retrieval(&mut model, &cfg, &data).unwrap();
        assert_eq!(losses.len(), cfg.ft_epochs);
        assert!(losses.iter().all(|l| l.is_finite() && *l > 0.0));
    }
    assert_eq!(model.codebook, book);
    for group in [ParamGroup::EncoderConv, ParamGroup::Adaptive] {
        assert!(before
            .ids()
            .filter(|&id| before.group(id) == group)
            .all(|id| before.get(id) != model.store.get(id) || before.get(id).max_abs() == 0.0));
    }
    let itm = before.id("head.itm").unwrap();
    assert_ne!(before.get(itm), model.store.get(itm));
}

#[test]
fn retrieval_batch_size_is_validated() {
    let (mut model, mut cfg, data) = setup(4);
    cfg.ft_batch = 5;
    assert!(matches!(finetune_retrieval(&mut model, &cfg, &data), Err(Error::Config(_))));
    cfg.ft_batch = 1;
    assert!(matches!(finetune_retrieval(&mut model, &cfg, &data), Err(Error::Config(_))));
}

#[test]
fn score_matrix_covers_every_image_caption_pair() {
    let (model, _, data) = setup(5);
    for use_vd in [false, true] {
        let s = score_matrix(&model, &data, use_vd).unwrap();
        assert_eq!(s.shape(), &[5, 10]);
        assert!(s.data().iter().all(|&p| p > 0.0 && p < 1.0));
        let r = eval_retrieval(&model, &data, use_vd).unwrap();
        for v in [r.tr, r.ir] {
            assert!(v.windows(2).all(|w| w[0] <= w[1]));
        }
        assert!(r.to_tsv().starts_with("metric\tvalue\ntr_r@1\t"));
    }
    assert!(matches!(score_matrix(&model, &[], false), Err(Error::Data(_))));
}

#[test]
fn classifier_heads_take_one_or_two_cls_features() {
    let (mut model, _, _) = setup(3);
    let c = model.dims.c;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let single = ClassifierHead::new(&mut model, ClassifyMode::Single, 5, &mut rng).unwrap();
    assert_eq!(single.input_dim(&model), c);
    let (mut model, _, _) = setup(3);
    let paired = ClassifierHead::new(&mut model, ClassifyMode::Paired, 4, &mut rng).unwrap();
    assert_eq!(paired.input_dim(&model), 2 * c);
    assert!(ClassifierHead::new(&mut model, ClassifyMode::Single, 1, &mut rng).is_err());
}

#[test]
fn zeroed_classifier_output_gives_log_n_loss() {
    let (mut model, _, data) = setup(6);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let head = ClassifierHead::new(&mut model, ClassifyMode::Single, 5, &mut rng).unwrap();
    for name in ["cls.fc2", "cls.fc2.bias"] {
        let id = model.store.id(name).unwrap();
        let zero = Tensor::zeros(model.store.get(id).shape());
        model.store.set(name, zero).unwrap();
    }
    let examples: Vec<ClassifyExample> = color_questions(&data)
        .into_iter()
        .map(|q| ClassifyExample {
            images: vec![q.image],
            text: q.question,
            label: q.answer,
        })
        .collect();
    let loss = head.loss(&model, &data, &examples, false).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-12, "loss {loss}");
}

#[test]
fn out_of_range_class_is_a_data_error() {
    let (mut model, cfg, data) = setup(3);
    let bad = [ClassifyExample {
        images: vec![0],
        text: "what color is the circle".into(),
        label: Color::ALL.len(),
    }];
    let r = finetune_classify(&mut model, &cfg, &data, &bad, ClassifyMode::Single, Color::ALL.len(), 2);
    assert!(matches!(r, Err(Error::Data(_))));
    let wrong_arity = [ClassifyExample {
        images: vec![0],
        text: "a red circle".into(),
        label: 1,
    }];
    let r = finetune_classify(&mut model, &cfg, &data, &wrong_arity, ClassifyMode::Paired, 4, 2);
    assert!(matches!(r, Err(Error::Data(_))));
}

#[test]
fn paired_fine_tuning_runs_and_logs_each_epoch() {
    let (mut model, cfg, data) = setup(6);
    let examples: Vec<ClassifyExample> = (0..6)
        .map(|i| ClassifyExample {
            images: vec![i, (i + 1) % 6],
            text: data[i].captions[0].clone(),
            label: 1 + usize::from(vislang::data::caption_holds(&data[i].captions[0], &data[(i + 1) % 6].scene).unwrap()) * 2,
        })
        .collect();
    let (head, losses) = finetune_classify(&mut model, &cfg, &data, &examples, ClassifyMode::Paired, 4, 4).unwrap();
    assert_eq!(losses.len(), cfg.ft_epochs);
    let acc = head.accuracy(&model, &data, &examples, false).unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn inspection_validates_the_index_and_writes_tiles() {
    let (model, _, data) = setup(6);
    let dir = tempfile::tempdir().unwrap();
    let k = model.codebook.k();
    let r = inspect_vd(&model, &data, Some(k), 4, 8, dir.path());
    assert!(matches!(r, Err(Error::Usage(_))));
    assert_eq!(r.unwrap_err().exit_code(), 1);

    let summaries = inspect_vd(&model, &data, None, 3, 5, dir.path()).unwrap();
    assert!(!summaries.is_empty() && summaries.len() <= 3);
    assert!(summaries.windows(2).all(|w| w[0].count >= w[1].count));
    let s = model.dims.s;
    for sm in &summaries {
        assert_eq!(sm.patches, sm.count.min(5));
        assert!(sm.purity > 0.0 && sm.purity <= 1.0);
        let tile = read_ppm(&dir.path().join(format!("idx_{}", sm.index)).join("patch_0.ppm")).unwrap();
        assert_eq!((tile.height(), tile.width()), (s, s));
    }
    let map = fs::read_to_string(dir.path().join("index_map.tsv")).unwrap();
    assert_eq!(map.lines().count(), 1 + data.len() * model.dims.l());

    let used: std::collections::BTreeSet<usize> = map
        .lines()
        .skip(1)
        .map(|l| l.rsplit('\t').next().unwrap().parse().unwrap())
        .collect();
    let unused = (0..k).find(|j| !used.contains(j)).expect("a small set leaves some entry unused");
    let empty = tempfile::tempdir().unwrap();
    let out = inspect_vd(&model, &data, Some(unused), 3, 5, empty.path()).unwrap();
    assert_eq!((out[0].count, out[0].patches), (0, 0));
    assert_eq!(fs::read_dir(empty.path().join(format!("idx_{unused}"))).unwrap().count(), 0);
    let manifest = fs::read_to_string(empty.path().join("manifest.tsv")).unwrap();
    assert!(manifest.lines().nth(1).unwrap().ends_with("unused"));
}
