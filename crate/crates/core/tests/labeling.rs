mod common;

use genrobust::labeling::{
    filter_topk_per_class, make_degraded_labeler, pseudo_label, pseudo_label_with, train_nonrobust, NonRobustConfig,
    ScoreKind,
};
use genrobust::synthetic::{make_synthetic_dataset, SyntheticSpec};
use genrobust::{seed, Classifier, LabeledDataset, ModelConfig, PseudoLabeledSet, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[test]
fn constant_labeler_assigns_its_argmax() {
    let logits = [0.0, 2.0, 1.0];
    let model = common::constant_model([1, 1, 4], &logits);
    let x = common::uniform(&[5, 1, 1, 4], 0.0, 1.0, &mut seed::rng(0));
    let set = pseudo_label(&model, &x, "const").unwrap();
    assert_eq!(set.pseudo_labels(), &[1; 5]);
    let p = softmax(&logits)[1];
    assert!(set.scores.iter().all(|s| (s - p).abs() < 1e-12));
    assert_eq!(set.labeler_id, "const");
    assert_eq!(set.data.images, x);

    let by_logit = pseudo_label_with(&model, &x, "const", ScoreKind::MaxLogit).unwrap();
    assert!(by_logit.scores.iter().all(|s| (s - 2.0).abs() < 1e-12));
}

#[test]
fn linear_labeler_matches_the_decision_rule() {
    let w = [1.0, -1.0];
    let model = common::near_linear_binary(&w, 0.05);
    let x = Tensor::new(vec![4, 1, 1, 2], vec![0.9, 0.1, 0.1, 0.9, 0.5, 0.5, 0.4, 0.5]).unwrap();
    let set = pseudo_label(&model, &x, "lin").unwrap();
    assert_eq!(set.pseudo_labels(), &[0, 1, 0, 1]);
    for i in 0..4 {
        let r = x.row(i);
        let margin: f64 = (r[0] * w[0] + r[1] * w[1] + 0.05_f64).abs();
        let p = 1.0 / (1.0 + (-margin).exp());
        assert!((set.scores[i] - p).abs() < 1e-6);
    }
}

fn scored(labels: Vec<usize>, scores: Vec<f64>, c: usize) -> PseudoLabeledSet<f64> {
    let n = labels.len();
    let x = Tensor::from_fn(vec![n, 1, 1, 1], |i| i as f64 / n as f64).unwrap();
    PseudoLabeledSet {
        data: LabeledDataset::new(x, labels, c).unwrap(),
        scores,
        labeler_id: "s".into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn topk_matches_a_sort_per_class(seed_value in 0u64..10_000, k in 1usize..4) {
        let mut rng = seed::rng(seed_value);
        let n = 30;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
        let set = scored(labels.clone(), scores.clone(), 3);
        let counts = set.data.class_counts();
        let got = filter_topk_per_class(&set, k);
        if counts.iter().any(|&c| c < k) {
            prop_assert!(got.is_err());
        } else {
            let mut want = Vec::new();
            for c in 0..3 {
                let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
                idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
                want.extend_from_slice(&idx[..k]);
            }
            want.sort();
            let got = got.unwrap();
            prop_assert_eq!(got.scores, want.iter().map(|&i| scores[i]).collect::<Vec<_>>());
            prop_assert_eq!(got.data.labels, want.iter().map(|&i| labels[i]).collect::<Vec<_>>());
        }
    }
}

#[test]
fn pseudo_labeled_set_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.grtc");
    let set = scored(vec![0, 2, 1, 1], vec![0.5, 0.25, 1.0, 0.75], 3);
    set.save(&path).unwrap();
    assert_eq!(PseudoLabeledSet::<f64>::load(&path).unwrap(), set);
}

fn easy_data(train: usize) -> genrobust::synthetic::SyntheticData<f64> {
    make_synthetic_dataset(&SyntheticSpec {
        num_classes: 2,
        image_shape: [1, 4, 4],
        latent_dim: 4,
        separation: 6.0,
        noise: 0.5,
        pixel_scale: 1.0,
        train_size: train,
        test_size: 200,
        holdout_size: 100,
        seed: 3,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn quick(epochs: usize) -> NonRobustConfig {
    NonRobustConfig {
        epochs,
        batch_size: 32,
        seed: 5,
        ..NonRobustConfig::default()
    }
}

#[test]
fn nonrobust_training_is_deterministic_and_learns() {
    let data = easy_data(400);
    let cfg = ModelConfig::mlp([1, 4, 4], vec![32], 2, 1);
    let a = train_nonrobust(&data.train, &cfg, &quick(10)).unwrap();
    let b = train_nonrobust(&data.train, &cfg, &quick(10)).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.ema, b.ema);
    assert!(a.accuracy(&data.test, true).unwrap() > 0.95);
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let data = easy_data(100);
    let cfg = ModelConfig::mlp([1, 4, 4], vec![8], 2, 1);
    let m = train_nonrobust(&data.train, &cfg, &quick(0)).unwrap();
    let init = Classifier::<f64>::init(cfg.clone()).unwrap();
    assert_eq!(m.params, init.params);
    assert_eq!(m.steps, 0);
    let empty = LabeledDataset::<f64>::empty([1, 4, 4], 2);
    assert!(train_nonrobust(&empty, &cfg, &quick(1)).is_err());
}

#[test]
fn degraded_labeler_hits_its_target() {
    let data = easy_data(600);
    let cfg = ModelConfig::mlp([1, 4, 4], vec![32], 2, 1);
    let d = make_degraded_labeler(&data.train, 0.8, &cfg, &quick(40), 9).unwrap();
    assert!((d.heldout_accuracy - 0.8).abs() <= 0.02, "{}", d.heldout_accuracy);
    assert!(d.noise_rate > 0.0 && d.noise_rate < 0.5);
    assert!((1..=5).contains(&d.trials));
}

#[test]
fn degraded_labeler_rejects_chance_targets() {
    let data = easy_data(100);
    let cfg = ModelConfig::mlp([1, 4, 4], vec![8], 2, 1);
    assert!(make_degraded_labeler(&data.train, 0.5, &cfg, &quick(1), 0).is_err());
    assert!(make_degraded_labeler(&data.train, 1.01, &cfg, &quick(1), 0).is_err());
}
