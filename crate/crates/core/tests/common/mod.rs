//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use genrobust::autodiff::Tape;
use genrobust::seed;
use genrobust::{Classifier, Tensor};
use rand::Rng;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut seed::Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Cross-entropy of the model on `(x, labels)`, evaluated from scratch.
pub fn ce_loss(model: &Classifier<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let w = tape.constants_from(&model.params);
    let xv = tape.constant(x.clone());
    let (logits, _) = model.forward_on(&mut tape, xv, &w).unwrap();
    let l = tape.softmax_cross_entropy(logits, labels).unwrap();
    tape.value(l).item().unwrap()
}

/// `(reverse-mode, central difference)` pairs for `probes` random parameter entries.
pub fn gradient_probes(
    model: &Classifier<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    probes: usize,
    h: f64,
    rng: &mut seed::Rng,
) -> Vec<(f64, f64)> {
    let mut tape = Tape::new();
    let w = tape.params_from(&model.params);
    let xv = tape.constant(x.clone());
    let (logits, _) = model.forward_on(&mut tape, xv, &w).unwrap();
    let l = tape.softmax_cross_entropy(logits, labels).unwrap();
    let grads = tape.backward(l).unwrap().params();

    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    (0..probes)
        .map(|_| {
            let name = &names[rng.random_range(0..names.len())];
            let base = model.params.get(name).unwrap().clone();
            let j = rng.random_range(0..base.numel());
            let eval = |delta: f64| {
                let mut data = base.data().to_vec();
                data[j] += delta;
                let mut m = model.clone();
                m.params
                    .set(name, Tensor::new(base.shape().to_vec(), data).unwrap())
                    .unwrap();
                ce_loss(&m, x, labels)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            (grads[name].data()[j], fd)
        })
        .collect()
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    out
}

pub fn direct_ce(logits: &[f64], labels: &[usize], c: usize) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for i in 0..b {
        let row = &logits[i * c..(i + 1) * c];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total -= (row[labels[i]].exp() / z).ln();
    }
    total / b as f64
}

pub fn direct_kl(p: &[f64], q: &[f64], c: usize) -> f64 {
    let b = p.len() / c;
    let probs = |r: &[f64]| {
        let z: f64 = r.iter().map(|v| v.exp()).sum();
        r.iter().map(|v| v.exp() / z).collect::<Vec<_>>()
    };
    let mut total = 0.0;
    for i in 0..b {
        let pp = probs(&p[i * c..(i + 1) * c]);
        let qq = probs(&q[i * c..(i + 1) * c]);
        total += pp.iter().zip(&qq).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
    }
    total / b as f64
}

/// O(N²) nearest-neighbor attribution: five outputs in the order
/// `(c_train, c_test, c_self, v_train, v_test)`.
pub fn brute_force_complementarity(train: &[Vec<f64>], test: &[Vec<f64>], gen: &[Vec<f64>]) -> [f64; 5] {
    let n = gen.len();
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut candidates: Vec<(usize, usize, &Vec<f64>)> = Vec::new();
    for (i, p) in train.iter().enumerate() {
        candidates.push((0, i, p));
    }
    for (i, p) in test.iter().enumerate() {
        candidates.push((1, i, p));
    }
    let mut counts = [0usize; 3];
    let mut seen = [vec![false; n], vec![false; n]];
    for (g, q) in gen.iter().enumerate() {
        let mut all = candidates.clone();
        for (i, p) in gen.iter().enumerate() {
            if i != g {
                all.push((2, i, p));
            }
        }
        // the minimum under (distance, set, index) ordering
        let (_, set, idx) = all
            .iter()
            .map(|&(s, i, p)| (d2(q, p), s, i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
            .unwrap();
        counts[set] += 1;
        if set < 2 {
            seen[set][idx] = true;
        }
    }
    let nf = n as f64;
    let v = |s: &[bool]| s.iter().filter(|&&b| b).count() as f64 / nf;
    [
        counts[0] as f64 / nf,
        counts[1] as f64 / nf,
        counts[2] as f64 / nf,
        v(&seen[0]),
        v(&seen[1]),
    ]
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Binary classifier whose logit difference is `w·x + b` to rounding: a single
/// SiLU unit pushed far into its linear regime.
pub fn near_linear_binary(w: &[f64], b: f64) -> Classifier<f64> {
    use genrobust::ModelConfig;
    const SHIFT: f64 = 40.0;
    let d = w.len();
    let mut m = Classifier::<f64>::init(ModelConfig::mlp([1, 1, d], vec![1], 2, 0)).unwrap();
    let set = |m: &mut Classifier<f64>, name: &str, shape: Vec<usize>, data: Vec<f64>| {
        let t = Tensor::new(shape, data).unwrap();
        m.params.set(name, t.clone()).unwrap();
        m.ema.set(name, t).unwrap();
    };
    set(&mut m, "dense0.weight", vec![d, 1], w.to_vec());
    set(&mut m, "dense0.bias", vec![1], vec![SHIFT]);
    set(&mut m, "head.weight", vec![1, 2], vec![1.0, 0.0]);
    set(&mut m, "head.bias", vec![2], vec![b - SHIFT, 0.0]);
    m
}

/// Classifier that returns the same logits for every input.
pub fn constant_model(shape: [usize; 3], logits: &[f64]) -> Classifier<f64> {
    use genrobust::ModelConfig;
    let c = logits.len();
    let mut m = Classifier::<f64>::init(ModelConfig::mlp(shape, vec![3], c, 0)).unwrap();
    for (name, t) in [
        ("head.weight", Tensor::zeros(vec![3, c])),
        ("head.bias", Tensor::new(vec![c], logits.to_vec()).unwrap()),
    ] {
        m.params.set(name, t.clone()).unwrap();
        m.ema.set(name, t).unwrap();
    }
    m
}
