mod common;

use common::uniform;
use genrobust::artifacts::{load_checkpoint, save_checkpoint};
use genrobust::labeling::{train_nonrobust, NonRobustConfig};
use genrobust::seed;
use genrobust::synthetic::{make_synthetic_dataset, SyntheticSpec};
use genrobust::{Classifier, LabeledDataset, ModelConfig, Tensor};

fn mlp(seed: u64) -> Classifier<f64> {
    Classifier::init(ModelConfig::mlp([1, 4, 4], vec![12, 8], 3, seed)).unwrap()
}

#[test]
fn init_is_seeded_and_validated() {
    assert_eq!(mlp(1).params, mlp(1).params);
    assert!(Classifier::<f64>::init(ModelConfig::mlp([1, 4, 4], vec![0], 3, 0)).is_err());
    assert!(Classifier::<f64>::init(ModelConfig::mlp([1, 4, 4], vec![], 3, 0)).is_err());
    assert!(Classifier::<f64>::init(ModelConfig::mlp([1, 4, 4], vec![4], 1, 0)).is_err());
    let logits = mlp(2).forward_logits(&Tensor::zeros(vec![3, 1, 4, 4]), false).unwrap();
    assert!(logits.data().iter().all(|v| v.is_finite()));
}

#[test]
fn batch_rows_are_independent() {
    for cfg in [
        ModelConfig::mlp([1, 4, 4], vec![10], 3, 3),
        ModelConfig::small_cnn([1, 4, 4], vec![2, 3], 3, 3),
    ] {
        let model = Classifier::<f64>::init(cfg).unwrap();
        let x = uniform(&[8, 1, 4, 4], 0.0, 1.0, &mut seed::rng(0));
        let all = model.forward_logits(&x, false).unwrap();
        for i in 0..8 {
            let one = model.forward_logits(&x.slice_rows(i, i + 1), false).unwrap();
            for (a, b) in one.data().iter().zip(all.row(i)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn ema_starts_equal_to_params() {
    let model = mlp(4);
    let x = uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut seed::rng(1));
    assert_eq!(
        model.forward_logits(&x, true).unwrap(),
        model.forward_logits(&x, false).unwrap()
    );
}

fn shifted(model: &Classifier<f64>, by: f64) -> Classifier<f64> {
    let mut m = model.clone();
    let names: Vec<String> = m.params.names().map(str::to_string).collect();
    for n in names {
        let t = m.params.get(&n).unwrap().map(|v| v + by).unwrap();
        m.params.set(&n, t).unwrap();
    }
    m
}

#[test]
fn ema_identities() {
    let m = shifted(&mlp(5), 0.3);
    let mut a = m.clone();
    a.ema_update(0.0).unwrap();
    assert_eq!(a.ema, a.params);
    let mut b = m.clone();
    b.ema_update(1.0).unwrap();
    assert_eq!(b.ema, m.ema);
    assert!(b.ema_update(1.5).is_err());
    assert!(b.ema_update(-0.1).is_err());
}

#[test]
fn ema_recurrence_closed_form_and_contraction() {
    let m0 = shifted(&mlp(6), 0.25);
    let tau: f64 = 0.9;
    let mut m = m0.clone();
    let mut last = f64::INFINITY;
    for k in 1..=20 {
        m.ema_update(tau).unwrap();
        let dist = m.ema.distance(&m.params).unwrap();
        assert!(dist <= last);
        last = dist;
        for (name, e) in m.ema.iter() {
            let p = m.params.get(name).unwrap();
            let e0 = m0.ema.get(name).unwrap();
            for ((ev, pv), e0v) in e.data().iter().zip(p.data()).zip(e0.data()) {
                let want = pv + tau.powi(k) * (e0v - pv);
                assert!((ev - want).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn accuracy_cases() {
    let model = mlp(7);
    let x = uniform(&[20, 1, 4, 4], 0.0, 1.0, &mut seed::rng(2));
    let pred = model.predict(&x, false).unwrap();
    let data = LabeledDataset::new(x.clone(), pred.clone(), 3).unwrap();
    assert_eq!(model.accuracy(&data, false).unwrap(), 1.0);
    assert!(model.accuracy(&LabeledDataset::empty([1, 4, 4], 3), false).is_err());

    // binary: inverted labels give the complement
    let bin = Classifier::<f64>::init(ModelConfig::mlp([1, 4, 4], vec![6], 2, 1)).unwrap();
    let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
    let inverted: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
    let a = bin
        .accuracy(&LabeledDataset::new(x.clone(), labels, 2).unwrap(), false)
        .unwrap();
    let b = bin
        .accuracy(&LabeledDataset::new(x, inverted, 2).unwrap(), false)
        .unwrap();
    assert!((a + b - 1.0).abs() < 1e-12);
}

#[test]
fn ties_go_to_the_lowest_class() {
    let model = Classifier::<f64>::init(ModelConfig::mlp([1, 2, 2], vec![3], 4, 0)).unwrap();
    let mut zeroed = model.clone();
    for name in ["head.weight", "head.bias"] {
        let t = zeroed.params.get(name).unwrap().map(|_| 0.0).unwrap();
        zeroed.params.set(name, t).unwrap();
    }
    let x = uniform(&[5, 1, 2, 2], 0.0, 1.0, &mut seed::rng(3));
    assert_eq!(zeroed.predict(&x, false).unwrap(), vec![0; 5]);
}

#[test]
fn untrained_model_is_near_chance_on_random_data() {
    let model = Classifier::<f64>::init(ModelConfig::mlp([1, 4, 4], vec![32], 10, 11)).unwrap();
    let mut rng = seed::rng(4);
    let x = uniform(&[1000, 1, 4, 4], 0.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
    let acc = model
        .accuracy(&LabeledDataset::new(x, labels, 10).unwrap(), false)
        .unwrap();
    assert!((acc - 0.1).abs() <= 0.03, "{acc}");
}

#[test]
fn trained_model_is_sensitive_to_pixels() {
    let spec = SyntheticSpec {
        train_size: 200,
        test_size: 10,
        holdout_size: 0,
        ..SyntheticSpec::default()
    };
    let data = make_synthetic_dataset::<f64>(&spec).unwrap();
    let cfg = NonRobustConfig {
        epochs: 5,
        ..NonRobustConfig::default()
    };
    let model = train_nonrobust(&data.train, &ModelConfig::mlp([1, 8, 8], vec![32], 4, 0), &cfg).unwrap();
    let x = data.test.images.slice_rows(0, 1);
    let mut bumped = x.data().to_vec();
    bumped[10] = 1.0 - bumped[10];
    let y = Tensor::new(x.shape().to_vec(), bumped).unwrap();
    assert_ne!(
        model.forward_logits(&x, true).unwrap(),
        model.forward_logits(&y, true).unwrap()
    );
}

#[test]
fn forward_does_not_mutate() {
    let model = mlp(8);
    let before = model.clone();
    let _ = model
        .forward_logits(&uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut seed::rng(5)), true)
        .unwrap();
    assert_eq!(model, before);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    for cfg in [
        ModelConfig::mlp([1, 4, 4], vec![5, 4], 3, 9),
        ModelConfig::small_cnn([1, 4, 4], vec![2], 3, 9),
    ] {
        let mut model = Classifier::<f32>::init(cfg).unwrap();
        model.steps = 17;
        let path = dir.path().join("m.grtc");
        save_checkpoint(&model, &path, "abc").unwrap();
        let back: Classifier<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        let x = uniform(&[3, 1, 4, 4], 0.0, 1.0, &mut seed::rng(6)).cast::<f32>();
        assert_eq!(
            back.forward_logits(&x, true).unwrap(),
            model.forward_logits(&x, true).unwrap()
        );
    }
}
