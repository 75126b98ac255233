//! Distribution diagnostics for generated data.

use serde::Serialize;

use crate::attack::{self, AttackConfig, PerturbationSet};
use crate::error::{Error, Result};
use crate::generation::{fit_pca, PcaModel};
use crate::linalg;
use crate::model::Classifier;
use crate::parallel;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::{softmax_row, Tensor};

/// Penultimate features of a trained classifier, reduced by PCA.
#[derive(Clone, Debug)]
pub struct FeatureEmbedder<T> {
    pub backbone: Classifier<T>,
    pub pca: PcaModel<T>,
    pub use_ema: bool,
}

impl<T: Scalar> FeatureEmbedder<T> {
    /// Fits the PCA on features of `images`. `k` defaults to
    /// `min(100, feature_dim)` and is lowered below the image count if needed.
    pub fn fit(backbone: Classifier<T>, images: &Tensor<T>, k: Option<usize>) -> Result<Self> {
        let feats = backbone.features(images, true)?;
        let dim = feats.row_len();
        let k = k.unwrap_or(100.min(dim)).min(dim).min(feats.rows().saturating_sub(1));
        let pca = fit_pca(&feats, k)?;
        Ok(FeatureEmbedder {
            backbone,
            pca,
            use_ema: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.pca.k()
    }

    /// `[N, k]` embedding of `[N, C, H, W]` images.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut parts = Vec::new();
        let n = images.rows();
        let mut start = 0;
        while start < n {
            let end = (start + 512).min(n);
            let f = self.backbone.features(&images.slice_rows(start, end), self.use_ema)?;
            parts.push(self.pca.project(&f)?);
            start = end;
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(vec![0, self.dim()]));
        }
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }
}

/// Nearest-neighbor attribution of generated points and the coverage they achieve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Complementarity {
    pub c_train: f64,
    pub c_test: f64,
    pub c_self: f64,
    pub v_train: f64,
    pub v_test: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Owner {
    Train,
    Test,
    Gen,
}

/// For every generated point, finds its nearest neighbor over train ∪ test ∪
/// (gen without itself). Equal distances resolve to train, then test, then
/// gen, then the lowest index.
pub fn complementarity_coverage<T: Scalar>(
    train: &Tensor<T>,
    test: &Tensor<T>,
    gen: &Tensor<T>,
) -> Result<Complementarity> {
    let n = gen.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need N >= 2 generated points, got {n}")));
    }
    if train.rows() != n || test.rows() != n {
        return Err(Error::shape(
            "complementarity_coverage",
            format!("set sizes {} / {} / {n} differ", train.rows(), test.rows()),
        ));
    }
    let d = gen.row_len();
    if train.row_len() != d || test.row_len() != d {
        return Err(Error::shape("complementarity_coverage", "feature dimensions differ"));
    }
    let to64 = |t: &Tensor<T>| -> Vec<f64> { t.data().iter().map(|v| v.to_f64c()).collect() };
    let (tr, te, ge) = (to64(train), to64(test), to64(gen));

    let nearest = parallel::map_indexed(n, |g| {
        let q = &ge[g * d..(g + 1) * d];
        let mut best = (f64::INFINITY, Owner::Train, usize::MAX);
        for (owner, buf) in [(Owner::Train, &tr), (Owner::Test, &te), (Owner::Gen, &ge)] {
            for i in 0..n {
                if owner == Owner::Gen && i == g {
                    continue;
                }
                let dist = sq_dist(q, &buf[i * d..(i + 1) * d]);
                if dist < best.0 {
                    best = (dist, owner, i);
                }
            }
        }
        (best.1, best.2)
    });

    let mut counts = [0usize; 3];
    let mut hit_train = vec![false; n];
    let mut hit_test = vec![false; n];
    for &(owner, i) in &nearest {
        match owner {
            Owner::Train => {
                counts[0] += 1;
                hit_train[i] = true;
            }
            Owner::Test => {
                counts[1] += 1;
                hit_test[i] = true;
            }
            Owner::Gen => counts[2] += 1,
        }
    }
    let nf = n as f64;
    let unique = |h: &[bool]| h.iter().filter(|&&b| b).count() as f64 / nf;
    Ok(Complementarity {
        c_train: counts[0] as f64 / nf,
        c_test: counts[1] as f64 / nf,
        c_self: counts[2] as f64 / nf,
        v_train: unique(&hit_train),
        v_test: unique(&hit_test),
    })
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let k = a.row_len();
    if b.row_len() != k {
        return Err(Error::shape("fid", format!("feature dims {k} vs {}", b.row_len())));
    }
    if a.rows() <= k || b.rows() <= k {
        return Err(Error::InvalidArgument(format!(
            "fid needs more than {k} samples per set (got {} and {})",
            a.rows(),
            b.rows()
        )));
    }
    let ra: Vec<f64> = a.data().iter().map(|v| v.to_f64c()).collect();
    let rb: Vec<f64> = b.data().iter().map(|v| v.to_f64c()).collect();
    let (ma, ca) = linalg::mean_cov(&ra, a.rows(), k);
    let (mb, cb) = linalg::mean_cov(&rb, b.rows(), k);
    if ca.iter().chain(&cb).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fid covariance"));
    }
    let tr_a: f64 = (0..k).map(|i| ca[i * k + i]).sum();
    let tr_b: f64 = (0..k).map(|i| cb[i * k + i]).sum();
    let tol = 1e-8 * tr_a.max(tr_b).max(1.0);
    let cross = linalg::trace_sqrt_product(&ca, &cb, k, tol)?;
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((mean_term + tr_a + tr_b - 2.0 * cross).max(0.0))
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))` over `splits` contiguous splits; returns `(mean, std)`.
pub fn is_score<T: Scalar>(
    classifier: &Classifier<T>,
    images: &Tensor<T>,
    splits: usize,
    use_ema: bool,
) -> Result<(f64, f64)> {
    let n = images.rows();
    if splits == 0 || n < 2 * splits {
        return Err(Error::InvalidArgument(format!(
            "{n} images cannot fill {splits} splits of at least 2"
        )));
    }
    let logits = classifier.logits_chunked(images, use_ema)?;
    let c = logits.row_len();
    let mut probs = vec![vec![0.0f64; c]; n];
    let mut row = vec![T::zero(); c];
    for (i, p) in probs.iter_mut().enumerate() {
        softmax_row(logits.row(i), &mut row);
        for (dst, &v) in p.iter_mut().zip(&row) {
            *dst = v.to_f64c();
        }
    }
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let part = &probs[s * n / splits..(s + 1) * n / splits];
            let m = part.len() as f64;
            let mut marginal = vec![0.0; c];
            for p in part {
                for (acc, &v) in marginal.iter_mut().zip(p) {
                    *acc += v / m;
                }
            }
            let kl: f64 = part
                .iter()
                .map(|p| {
                    p.iter()
                        .zip(&marginal)
                        .filter(|(&pv, _)| pv > 0.0)
                        .map(|(&pv, &mv)| pv * (pv.ln() - mv.ln()))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / m;
            kl.max(0.0).exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// Fraction of distinct nearest neighbors in `B` hit by the points of `A`,
/// for two independent sets of `n` points drawn from `Uniform[0, 1]`.
pub fn uniform_unique_nn_baseline(n: usize, seed_value: u64) -> Result<f64> {
    use rand::Rng as _;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("baseline needs N >= 2, got {n}")));
    }
    let mut rng = seed::rng(seed_value);
    let a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let mut b: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    b.sort_by(f64::total_cmp);
    let mut hit = vec![false; n];
    for &x in &a {
        let j = b.partition_point(|&v| v < x);
        let nn = match (j.checked_sub(1), (j < n).then_some(j)) {
            (Some(l), Some(r)) => {
                if x - b[l] <= b[r] - x {
                    l
                } else {
                    r
                }
            }
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => unreachable!(),
        };
        hit[nn] = true;
    }
    Ok(hit.iter().filter(|&&h| h).count() as f64 / n as f64)
}

/// Margin-loss values on the plane spanned by an attack direction and a random sign direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Landscape {
    /// Grid coordinates shared by both axes.
    pub coords: Vec<f64>,
    /// `grid[i][j]` is the margin at `clip(x + coords[i]·u + coords[j]·v)`.
    pub grid: Vec<Vec<f64>>,
    pub clean_margin: f64,
    /// Margin at the attack's own adversarial input.
    pub attack_margin: f64,
}

impl Landscape {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["a\\b".to_string()];
        header.extend(self.coords.iter().map(|c| c.to_string()));
        w.write_record(&header)?;
        for (a, row) in self.coords.iter().zip(&self.grid) {
            let mut rec = vec![a.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))?;
        crate::container::atomic_write(path, &bytes)
    }
}

/// Scans `margin(f(clip(x + a·u + b·v)))` where `u` is the PGD-40
/// perturbation and `v` a Rademacher direction scaled to the ball.
#[allow(clippy::too_many_arguments)]
pub fn loss_landscape<T: Scalar>(
    model: &Classifier<T>,
    use_ema: bool,
    x: &Tensor<T>,
    label: usize,
    set: &PerturbationSet,
    half_extent: f64,
    resolution: usize,
    seed_value: u64,
) -> Result<Landscape> {
    use rand::Rng as _;
    if x.rows() != 1 {
        return Err(Error::shape(
            "loss_landscape",
            format!("expected one example, got {:?}", x.shape()),
        ));
    }
    if resolution < 2 {
        return Err(Error::InvalidArgument("landscape resolution must be >= 2".into()));
    }
    let labels = [label];
    let cfg = AttackConfig::pgd_ce(40, (2.5 * set.epsilon / 40.0).max(1e-12), 1, seed_value);
    let res = attack::pgd(model, use_ema, x, Some(&labels), None, set, &cfg)?;
    let u = res.delta.data().to_vec();
    let d = u.len();
    let scale = match set.norm {
        attack::Norm::Linf => set.epsilon,
        attack::Norm::L2 => set.epsilon / (d as f64).sqrt(),
    };
    let mut rng = seed::stream(seed_value, &[0x2AD]);
    let v: Vec<T> = (0..d)
        .map(|_| T::of(if rng.random::<bool>() { scale } else { -scale }))
        .collect();
    let steps = (resolution - 1) as f64;
    let coords: Vec<f64> = (0..resolution)
        .map(|i| half_extent * (2.0 * i as f64 - steps) / steps)
        .collect();

    let margin_at = |inputs: &Tensor<T>| -> Result<Vec<f64>> {
        let logits = model.logits_chunked(inputs, use_ema)?;
        let lab = vec![label; inputs.rows()];
        Ok(attack::margin_loss(&logits, &lab)?
            .into_iter()
            .map(|m| m.to_f64c())
            .collect())
    };
    let mut points = Vec::with_capacity(resolution * resolution * d);
    for &a in &coords {
        for &b in &coords {
            let (a, b) = (T::of(a), T::of(b));
            for j in 0..d {
                let p = x.data()[j] + a * u[j] + b * v[j];
                points.push(p.max(T::zero()).min(T::one()));
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = resolution * resolution;
    let values = margin_at(&Tensor::checked("loss_landscape", shape, points)?)?;
    let grid = values.chunks(resolution).map(<[f64]>::to_vec).collect();
    Ok(Landscape {
        coords,
        grid,
        clean_margin: margin_at(x)?[0],
        attack_margin: margin_at(&res.adversarial)?[0],
    })
}

/// One row of the `diagnose` output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub c_train: f64,
    pub c_test: f64,
    pub c_self: f64,
    pub v_train: f64,
    pub v_test: f64,
    pub fid: f64,
    pub is_mean: f64,
    pub is_std: f64,
}

impl DiagnosticsReport {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        crate::container::write_csv(path, std::slice::from_ref(self))
    }
}

/// Complementarity, coverage, FID (generated vs test) and IS for a generated set.
///
/// The three sets are truncated to their common size.
pub fn diagnose<T: Scalar>(
    embedder: &FeatureEmbedder<T>,
    classifier: &Classifier<T>,
    train: &Tensor<T>,
    test: &Tensor<T>,
    gen: &Tensor<T>,
    is_splits: usize,
) -> Result<DiagnosticsReport> {
    let n = train.rows().min(test.rows()).min(gen.rows());
    let (etr, ete, ege) = (
        embedder.embed(&train.slice_rows(0, n))?,
        embedder.embed(&test.slice_rows(0, n))?,
        embedder.embed(&gen.slice_rows(0, n))?,
    );
    let c = complementarity_coverage(&etr, &ete, &ege)?;
    let f = fid(&ege, &ete)?;
    let (is_mean, is_std) = is_score(classifier, &gen.slice_rows(0, n), is_splits, true)?;
    Ok(DiagnosticsReport {
        c_train: c.c_train,
        c_test: c.c_test,
        c_self: c.c_self,
        v_train: c.v_train,
        v_test: c.v_test,
        fid: f,
        is_mean,
        is_std,
    })
}
