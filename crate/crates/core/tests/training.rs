mod common;

use genrobust::attack::{AttackConfig, PerturbationSet};
use genrobust::optim::{cosine_lr, NesterovSgd};
use genrobust::synthetic::{make_synthetic_dataset, SyntheticData, SyntheticSpec};
use genrobust::training::{
    build_mixed_batch, mix_counts, standard_at_loss, trades_loss, train, EarlyStopConfig, LossKind,
};
use genrobust::{seed, Classifier, LabeledDataset, ModelConfig, ParamStore, PseudoLabeledSet, Tensor, TrainConfig};
use std::collections::BTreeMap;

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[test]
fn cosine_schedule_endpoints_and_midpoint() {
    for lr0 in [0.4, 0.1, 1.0] {
        assert_eq!(cosine_lr(0, 100, lr0).unwrap(), lr0);
        assert_eq!(cosine_lr(100, 100, lr0).unwrap(), 0.0);
        assert!((cosine_lr(50, 100, lr0).unwrap() - lr0 / 2.0).abs() < 1e-12);
    }
    let lrs: Vec<f64> = (0..=20).map(|t| cosine_lr(t, 20, 0.4).unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

fn toy(n: usize, classes: usize, shift: f64) -> LabeledDataset<f64> {
    let x = Tensor::from_fn(vec![n, 1, 1, 2], |i| (i / 2) as f64 / (2 * n) as f64 + shift).unwrap();
    LabeledDataset::new(x, (0..n).map(|i| i % classes).collect(), classes).unwrap()
}

fn gen_set(n: usize, classes: usize) -> PseudoLabeledSet<f64> {
    PseudoLabeledSet::from_labeled(toy(n, classes, 0.5), "toy")
}

#[test]
fn batch_composition_follows_alpha() {
    let orig = toy(40, 2, 0.0);
    let gen = gen_set(30, 2);
    let mut rng = seed::rng(0);
    for (alpha, b) in [(0.8, 10), (0.0, 7), (1.0, 7), (0.5, 3), (0.3, 16)] {
        let batch = build_mixed_batch(&orig, Some(&gen), alpha, b, &mut rng).unwrap();
        let want = ((alpha * b as f64).round()) as usize;
        assert_eq!((batch.n_orig, batch.n_gen), (want, b - want));
        assert_eq!(mix_counts(alpha, b), (want, b - want));
        assert_eq!(batch.images.rows(), b);
        assert_eq!(batch.labels.len(), b);
        // original rows come first, generated rows after (their pixels are >= 0.5)
        for i in 0..b {
            let from_gen = batch.images.row(i)[0] >= 0.5;
            assert_eq!(from_gen, i >= want, "alpha {alpha} row {i}");
        }
    }
    let batch = build_mixed_batch(&orig, Some(&gen), 0.8, 10, &mut rng).unwrap();
    let mut orig_rows: Vec<Vec<u64>> = (0..8)
        .map(|i| batch.images.row(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    orig_rows.sort();
    orig_rows.dedup();
    assert_eq!(orig_rows.len(), 8, "original part is drawn without replacement");
}

#[test]
fn batch_sources_are_checked() {
    let orig = toy(10, 2, 0.0);
    let empty = LabeledDataset::<f64>::empty([1, 1, 2], 2);
    let gen = gen_set(4, 2);
    let mut rng = seed::rng(0);
    assert!(build_mixed_batch(&orig, None, 0.5, 4, &mut rng).is_err());
    assert!(build_mixed_batch(&empty, Some(&gen), 0.5, 4, &mut rng).is_err());
    assert!(build_mixed_batch(&empty, Some(&gen), 0.0, 4, &mut rng).is_ok());
    assert!(build_mixed_batch(&orig, None, 1.0, 4, &mut rng).is_ok());
    assert!(build_mixed_batch(&orig, Some(&gen), 1.5, 4, &mut rng).is_err());
    let three = gen_set(4, 3);
    assert!(build_mixed_batch(&orig, Some(&three), 0.5, 4, &mut rng).is_err());
}

fn trained_mlp() -> (Classifier<f64>, Tensor<f64>, Vec<usize>) {
    let mut rng = seed::rng(3);
    let mut m = Classifier::<f64>::init(ModelConfig::mlp([1, 2, 3], vec![12], 3, 4)).unwrap();
    // spread the head so predictions are not uniform
    let head = common::uniform(&[12, 3], -2.0, 2.0, &mut rng);
    m.params.set("head.weight", head.clone()).unwrap();
    m.ema.set("head.weight", head).unwrap();
    let x = common::uniform(&[8, 1, 2, 3], 0.1, 0.9, &mut rng);
    (m, x, vec![0, 1, 2, 0, 1, 2, 0, 1])
}

fn clean_ce(m: &Classifier<f64>, x: &Tensor<f64>, y: &[usize]) -> f64 {
    let logits = m.forward_logits(x, false).unwrap();
    common::direct_ce(logits.data(), y, 3)
}

#[test]
fn trades_reduces_to_cross_entropy() {
    let (m, x, y) = trained_mlp();
    let ce = clean_ce(&m, &x, &y);
    let inner = AttackConfig::trades_kl(10, 0.1, 7);
    let set = PerturbationSet::linf(0.1);
    assert!((trades_loss(&m, &x, &y, 0.0, &inner, &set).unwrap() - ce).abs() < 1e-12);
    for beta in [0.0, 1.0, 6.0] {
        let l = trades_loss(&m, &x, &y, beta, &inner, &PerturbationSet::linf(0.0)).unwrap();
        assert!((l - ce).abs() < 1e-10, "beta {beta}");
    }
    for beta in [0.5, 6.0] {
        assert!(trades_loss(&m, &x, &y, beta, &inner, &set).unwrap() >= ce - 1e-12);
    }
    assert!(trades_loss(&m, &x, &y, -1.0, &inner, &set).is_err());
}

#[test]
fn standard_at_bounds_clean_loss() {
    let (m, x, y) = trained_mlp();
    let ce = clean_ce(&m, &x, &y);
    let mut inner = AttackConfig::pgd_ce(10, 0.02, 1, 2);
    assert!((standard_at_loss(&m, &x, &y, &inner, &PerturbationSet::linf(0.0)).unwrap() - ce).abs() < 1e-10);
    inner.random_start = false;
    assert!(standard_at_loss(&m, &x, &y, &inner, &PerturbationSet::linf(0.1)).unwrap() >= ce - 1e-12);
}

#[test]
fn standard_at_matches_the_linear_worst_case() {
    let w = [1.5, -2.0, 0.5, 0.0, 3.0, -1.0];
    let b = 0.2;
    let eps = 0.05;
    let m = common::near_linear_binary(&w, b);
    let mut rng = seed::rng(9);
    let x = common::uniform(&[6, 1, 1, 6], 0.2, 0.8, &mut rng);
    let y = vec![0, 1, 0, 1, 1, 0];
    let w1: f64 = w.iter().map(|v: &f64| v.abs()).sum();
    let want: f64 = (0..6)
        .map(|i| {
            let z: f64 = x.row(i).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            // class 0 wins by z; the attack moves z by eps·‖w‖₁ against the label
            if y[i] == 0 {
                softplus(-(z - eps * w1))
            } else {
                softplus(z + eps * w1)
            }
        })
        .sum::<f64>()
        / 6.0;
    let inner = AttackConfig::pgd_ce(20, eps / 4.0, 1, 0);
    let got = standard_at_loss(&m, &x, &y, &inner, &PerturbationSet::linf(eps)).unwrap();
    assert!((got - want).abs() < 1e-8, "{got} vs {want}");
}

fn quick_cfg(alpha: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        alpha,
        epochs,
        batch_size: 16,
        inner_attack: AttackConfig::trades_kl(3, 0.1, 0),
        perturbation: PerturbationSet::linf(0.05),
        early_stop: EarlyStopConfig {
            validation_size: 0,
            ..EarlyStopConfig::default()
        },
        seed: 11,
        ..TrainConfig::default()
    }
}

fn separable(seed_value: u64, train: usize) -> SyntheticData<f64> {
    make_synthetic_dataset(&SyntheticSpec {
        num_classes: 2,
        image_shape: [1, 4, 4],
        latent_dim: 4,
        separation: 6.0,
        noise: 0.5,
        train_size: train,
        test_size: 200,
        holdout_size: 50,
        seed: seed_value,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

#[test]
fn alpha_one_ignores_generated_data() {
    let data = separable(1, 96);
    let gen = PseudoLabeledSet::from_labeled(data.holdout.clone(), "g");
    let model = Classifier::init(ModelConfig::mlp([1, 4, 4], vec![16], 2, 0)).unwrap();
    let cfg = quick_cfg(1.0, 2);
    let (a, ra) = train(&cfg, &data.train, Some(&gen), model.clone()).unwrap();
    let (b, rb) = train(&cfg, &data.train, None, model).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.ema, b.ema);
    let bits = |r: &genrobust::TrainReport| r.step_losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ra), bits(&rb));
    assert_eq!(ra.total_steps, 2 * 96usize.div_ceil(16));
}

#[test]
fn zero_epochs_return_the_input_model() {
    let data = separable(2, 32);
    let model = Classifier::init(ModelConfig::mlp([1, 4, 4], vec![8], 2, 3)).unwrap();
    let (m, r) = train(&quick_cfg(1.0, 0), &data.train, None, model.clone()).unwrap();
    assert_eq!(m, model);
    assert!(r.step_losses.is_empty());
    assert!(train(&quick_cfg(0.5, 1), &data.train, None, model).is_err());
}

#[test]
fn weight_decay_shrinks_exactly() {
    let mut rng = seed::rng(4);
    let mut params = ParamStore::new();
    params
        .insert("a", common::uniform(&[3, 4], -1.0, 1.0, &mut rng))
        .unwrap();
    params.insert("b", common::uniform(&[5], -1.0, 1.0, &mut rng)).unwrap();
    let before = params.clone();
    let grads: BTreeMap<String, Tensor<f64>> = params
        .iter()
        .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape().to_vec())))
        .collect();
    let (lr, wd) = (0.3, 0.01);
    NesterovSgd::new(0.9, wd).step(&mut params, &grads, lr).unwrap();
    for ((_, p), (_, q)) in params.iter().zip(before.iter()) {
        for (&after, &orig) in p.data().iter().zip(q.data()) {
            assert_eq!(after, orig * (1.0 - lr * wd));
        }
    }
}

#[test]
fn nesterov_step_matches_hand_recurrence() {
    let mut params = ParamStore::new();
    params.insert("p", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    let g = |v: f64| BTreeMap::from([("p".to_string(), Tensor::new(vec![1], vec![v]).unwrap())]);
    let mut opt = NesterovSgd::new(0.5, 0.0);
    opt.step(&mut params, &g(2.0), 0.1).unwrap();
    // buf = 2, p = 1 − 0.1·(2 + 0.5·2)
    assert!((params.get("p").unwrap().data()[0] - 0.7).abs() < 1e-15);
    opt.step(&mut params, &g(1.0), 0.1).unwrap();
    // buf = 0.5·2 + 1 = 2, p = 0.7 − 0.1·(1 + 0.5·2)
    assert!((params.get("p").unwrap().data()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn early_stopping_returns_the_best_checkpoint() {
    let data = separable(5, 160);
    let model = Classifier::init(ModelConfig::mlp([1, 4, 4], vec![16], 2, 0)).unwrap();
    let mut cfg = quick_cfg(1.0, 4);
    cfg.early_stop = EarlyStopConfig {
        validation_size: 48,
        pgd_steps: 5,
        eval_every: 3,
    };
    let (m, r) = train(&cfg, &data.train, None, model).unwrap();
    let best = r.records.iter().map(|e| e.val_robust).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.best_val_robust, Some(best));
    let last_best = r.records.iter().rev().find(|e| e.val_robust == best).unwrap();
    assert_eq!(r.best_step, Some(last_best.step));
    assert_eq!(m.steps as usize, last_best.step);
    assert_eq!(r.records.last().unwrap().step, r.total_steps);

    let val = data.train.slice(160 - 48, 160);
    let attack = AttackConfig::pgd_ce(5, 2.5 * 0.05 / 5.0, 1, seed::derive(cfg.seed, &[0x7A1]));
    let again = genrobust::attack::pgd_accuracy(&m, true, &val, &cfg.perturbation, &attack).unwrap();
    assert_eq!(again, best);
}

#[test]
fn training_rejects_bad_settings() {
    let data = separable(6, 32);
    let model = Classifier::init(ModelConfig::mlp([1, 4, 4], vec![8], 2, 0)).unwrap();
    let mut cfg = quick_cfg(1.0, 1);
    cfg.early_stop.validation_size = 32;
    assert!(train(&cfg, &data.train, None, model.clone()).is_err());
    let wrong = Classifier::init(ModelConfig::mlp([1, 2, 2], vec![8], 2, 0)).unwrap();
    assert!(train(&quick_cfg(1.0, 1), &data.train, None, wrong).is_err());
    let mut huge = quick_cfg(1.0, 3);
    huge.lr0 = 1e200;
    huge.loss = LossKind::Clean;
    assert!(matches!(
        train(&huge, &data.train, None, model),
        Err(genrobust::Error::Diverged { .. })
    ));
}

#[test]
fn separable_toy_trains_robustly() {
    let mut robust: Vec<f64> = (0..5u64)
        .map(|s| {
            let data = separable(100 + s, 400);
            let model = Classifier::init(ModelConfig::mlp([1, 4, 4], vec![32], 2, s)).unwrap();
            let mut cfg = quick_cfg(1.0, 8);
            cfg.seed = s;
            cfg.early_stop = EarlyStopConfig {
                validation_size: 100,
                pgd_steps: 10,
                eval_every: 0,
            };
            let (_, r) = train(&cfg, &data.train, None, model).unwrap();
            r.best_val_robust.unwrap()
        })
        .collect();
    robust.sort_by(f64::total_cmp);
    assert!(robust[2] >= 0.9, "{robust:?}");
}
