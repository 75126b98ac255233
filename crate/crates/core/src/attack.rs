//! Inner maximization over a norm ball and robust evaluation.
//!
//! [`ascend`] is the projected ascent loop; it is driven by any
//! [`AttackObjective`]. [`pgd`] plugs a classifier into it, and
//! [`attack_cascade`] chains untargeted and targeted runs into a worst-case
//! robust accuracy.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::parallel;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::{argmax, log_softmax_row, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    Linf,
    L2,
}

/// `{δ : ‖δ‖_p ≤ ε}` in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSet {
    pub norm: Norm,
    pub epsilon: f64,
}

impl PerturbationSet {
    pub fn linf(epsilon: f64) -> Self {
        PerturbationSet {
            norm: Norm::Linf,
            epsilon,
        }
    }

    pub fn l2(epsilon: f64) -> Self {
        PerturbationSet {
            norm: Norm::L2,
            epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Norm of one example's perturbation.
    pub fn norm_of<T: Scalar>(&self, delta: &[T]) -> T {
        match self.norm {
            Norm::Linf => delta.iter().fold(T::zero(), |m, &v| m.max(v.abs())),
            Norm::L2 => delta.iter().map(|&v| v * v).sum::<T>().sqrt(),
        }
    }

    fn project_row<T: Scalar>(&self, row: &mut [T]) {
        let eps = T::of(self.epsilon);
        match self.norm {
            Norm::Linf => {
                for v in row.iter_mut() {
                    *v = v.max(-eps).min(eps);
                }
            }
            Norm::L2 => {
                let n = self.norm_of(row);
                // a rescaled row may sit a few ulps above ε; leave it so projection is idempotent
                if n > eps * (T::one() + T::of(4.0) * T::epsilon()) {
                    let s = eps / n;
                    for v in row.iter_mut() {
                        *v *= s;
                    }
                }
            }
        }
    }
}

/// Projects each row (example) of `delta` onto the ball.
pub fn project<T: Scalar>(delta: &Tensor<T>, set: &PerturbationSet) -> Tensor<T> {
    let w = delta.row_len();
    let mut data = delta.data().to_vec();
    if w > 0 {
        for row in data.chunks_mut(w) {
            set.project_row(row);
        }
    }
    Tensor::from_parts(delta.shape().to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerOptimizer {
    SignSgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Class(usize),
    /// The `n`-th highest scoring incorrect class on the clean input.
    TopIncorrect(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    CrossEntropy,
    KlVsClean,
    /// `max_{i≠y} z_i − z_y`
    Margin,
    /// `z_t − z_y`
    TargetedMargin(Target),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub steps: usize,
    pub step_size: f64,
    pub optimizer: InnerOptimizer,
    pub restarts: usize,
    pub objective: Objective,
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    /// Sign-gradient PGD on cross-entropy.
    pub fn pgd_ce(steps: usize, step_size: f64, restarts: usize, seed: u64) -> Self {
        AttackConfig {
            steps,
            step_size,
            optimizer: InnerOptimizer::SignSgd,
            restarts,
            objective: Objective::CrossEntropy,
            random_start: true,
            seed,
        }
    }

    /// Adam on the KL divergence from clean predictions (TRADES inner loop).
    pub fn trades_kl(steps: usize, step_size: f64, seed: u64) -> Self {
        AttackConfig {
            steps,
            step_size,
            optimizer: InnerOptimizer::Adam,
            restarts: 1,
            objective: Objective::KlVsClean,
            random_start: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.restarts < 1 {
            return Err(Error::Config("attack restarts must be >= 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config(format!(
                "attack step size must be positive, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// Outcome of a projected ascent.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult<T> {
    pub delta: Tensor<T>,
    /// `x + δ`, inside `[0, 1]`.
    pub adversarial: Tensor<T>,
    /// Per-example objective at the selected perturbation.
    pub objective: Vec<T>,
    /// Per-example misclassification flag at the selected perturbation.
    pub success: Vec<bool>,
    /// Summed objective after each iterate, restarts concatenated.
    pub trace: Vec<f64>,
}

/// Per-example values, success flags and input gradient for a candidate.
pub struct Evaluation<T> {
    pub values: Vec<T>,
    pub success: Vec<bool>,
    /// Gradient of `Σ values` w.r.t. the adversarial input; `None` when not requested.
    pub grad: Option<Tensor<T>>,
}

/// Something an attack can climb. Examples must be independent.
pub trait AttackObjective<T: Scalar> {
    fn evaluate(&mut self, x_adv: &Tensor<T>, need_grad: bool) -> Result<Evaluation<T>>;
}

/// Draws a starting perturbation for one example.
fn random_start_row<T: Scalar>(set: &PerturbationSet, row: &mut [T], rng: &mut seed::Rng) {
    let eps = set.epsilon;
    match set.norm {
        Norm::Linf => {
            for v in row.iter_mut() {
                *v = T::of(rng.random_range(-1.0..=1.0) * eps);
            }
        }
        Norm::L2 => {
            let mut norm = 0.0;
            let dir: Vec<f64> = (0..row.len())
                .map(|_| {
                    let z: f64 = seed::normal(rng);
                    norm += z * z;
                    z
                })
                .collect();
            let norm = norm.sqrt();
            let u: f64 = rng.random();
            let radius = eps * u.powf(1.0 / row.len().max(1) as f64);
            for (v, d) in row.iter_mut().zip(dir) {
                *v = if norm > 0.0 {
                    T::of(d / norm * radius)
                } else {
                    T::zero()
                };
            }
        }
    }
}

/// `δ ← clip(x + project(δ), 0, 1) − x`; returns `(δ, x + δ)`.
fn feasible<T: Scalar>(x: &Tensor<T>, delta: Vec<T>, set: &PerturbationSet) -> (Vec<T>, Vec<T>) {
    let w = x.row_len();
    let mut delta = delta;
    let mut adv = vec![T::zero(); delta.len()];
    for (i, (drow, arow)) in delta.chunks_mut(w.max(1)).zip(adv.chunks_mut(w.max(1))).enumerate() {
        set.project_row(drow);
        let xrow = x.row(i);
        for j in 0..w {
            let a = (xrow[j] + drow[j]).max(T::zero()).min(T::one());
            arow[j] = a;
            drow[j] = a - xrow[j];
        }
    }
    (delta, adv)
}

/// Prefers a successful candidate, then a larger objective.
fn improves<T: Scalar>(succ: bool, val: T, best_succ: bool, best_val: T) -> bool {
    (succ && !best_succ) || (succ == best_succ && val > best_val)
}

/// Projected ascent with restarts.
///
/// `ids` give each example a stable identity for random starts, so an
/// example's result does not depend on which other examples share its batch.
pub fn ascend<T: Scalar, O: AttackObjective<T>>(
    objective: &mut O,
    x: &Tensor<T>,
    ids: &[u64],
    set: &PerturbationSet,
    cfg: &AttackConfig,
) -> Result<AttackResult<T>> {
    set.validate()?;
    cfg.validate()?;
    let n = x.rows();
    let w = x.row_len();
    if ids.len() != n {
        return Err(Error::shape("ascend", format!("{} ids for {} examples", ids.len(), n)));
    }
    let shape = x.shape().to_vec();
    let mut best_delta = vec![T::zero(); n * w];
    let mut best_adv = x.data().to_vec();
    let mut best_val = vec![T::neg_infinity(); n];
    let mut best_succ = vec![false; n];
    let mut trace = Vec::new();
    let step = T::of(cfg.step_size);
    let (beta1, beta2, adam_eps) = (T::of(0.9), T::of(0.999), T::of(1e-8));

    for restart in 0..cfg.restarts {
        let mut delta = vec![T::zero(); n * w];
        if cfg.random_start && set.epsilon > 0.0 {
            for (i, row) in delta.chunks_mut(w.max(1)).enumerate().take(n) {
                let mut rng = seed::stream(cfg.seed, &[restart as u64, ids[i]]);
                random_start_row(set, row, &mut rng);
            }
        }
        let (mut delta, mut adv) = feasible(x, delta, set);
        let mut m = vec![T::zero(); n * w];
        let mut v = vec![T::zero(); n * w];

        for it in 0..=cfg.steps {
            let adv_t = Tensor::from_parts(shape.clone(), adv.clone());
            let need_grad = it < cfg.steps;
            let eval = objective.evaluate(&adv_t, need_grad)?;
            trace.push(eval.values.iter().map(|v| v.to_f64c()).sum());
            for i in 0..n {
                if improves(eval.success[i], eval.values[i], best_succ[i], best_val[i]) {
                    best_val[i] = eval.values[i];
                    best_succ[i] = eval.success[i];
                    best_delta[i * w..(i + 1) * w].copy_from_slice(&delta[i * w..(i + 1) * w]);
                    best_adv[i * w..(i + 1) * w].copy_from_slice(&adv[i * w..(i + 1) * w]);
                }
            }
            if !need_grad {
                break;
            }
            let grad = eval
                .grad
                .ok_or_else(|| Error::InvalidArgument("objective returned no gradient".into()))?;
            let g = grad.data();
            match cfg.optimizer {
                InnerOptimizer::SignSgd => {
                    for j in 0..n * w {
                        let s = if g[j] > T::zero() {
                            T::one()
                        } else if g[j] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        delta[j] += step * s;
                    }
                }
                InnerOptimizer::Adam => {
                    let t = (it + 1) as i32;
                    let c1 = T::one() - beta1.powi(t);
                    let c2 = T::one() - beta2.powi(t);
                    for j in 0..n * w {
                        m[j] = beta1 * m[j] + (T::one() - beta1) * g[j];
                        v[j] = beta2 * v[j] + (T::one() - beta2) * g[j] * g[j];
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        delta[j] += step * mhat / (vhat.sqrt() + adam_eps);
                    }
                }
            }
            (delta, adv) = feasible(x, delta, set);
        }
    }

    Ok(AttackResult {
        delta: Tensor::checked("pgd", shape.clone(), best_delta)?,
        adversarial: Tensor::checked("pgd", shape, best_adv)?,
        objective: best_val,
        success: best_succ,
        trace,
    })
}

/// `z_y − max_{i≠y} z_i` per row.
pub fn margin_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
    if logits.rank() != 2 || logits.rows() != labels.len() {
        return Err(Error::shape(
            "margin_loss",
            format!("logits {:?} with {} labels", logits.shape(), labels.len()),
        ));
    }
    let c = logits.row_len();
    if c < 2 {
        return Err(Error::InvalidArgument("margin loss needs at least 2 classes".into()));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
            let row = logits.row(i);
            Ok(row[y] - row[best_other(row, y)])
        })
        .collect()
}

/// Highest scoring class other than `y` (lowest index on ties).
fn best_other<T: Scalar>(row: &[T], y: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in row.iter().enumerate() {
        if i != y && (best == usize::MAX || v > row[best]) {
            best = i;
        }
    }
    best
}

/// Incorrect classes ordered by descending clean logit (stable by index).
fn ranked_incorrect<T: Scalar>(row: &[T], y: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&i| i != y).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// A classifier seen as an attack objective.
pub struct ModelObjective<'a, T: Scalar> {
    model: &'a Classifier<T>,
    use_ema: bool,
    objective: Objective,
    labels: Option<&'a [usize]>,
    clean_logits: Option<Tensor<T>>,
    clean_pred: Vec<usize>,
    targets: Vec<usize>,
}

impl<'a, T: Scalar> ModelObjective<'a, T> {
    /// `labels` are required for every objective except [`Objective::KlVsClean`],
    /// which instead anchors on `clean_logits` (computed here when absent).
    pub fn new(
        model: &'a Classifier<T>,
        use_ema: bool,
        x: &Tensor<T>,
        objective: Objective,
        labels: Option<&'a [usize]>,
        clean_logits: Option<&Tensor<T>>,
    ) -> Result<Self> {
        let n = x.rows();
        let c = model.config.num_classes;
        if let Some(l) = labels {
            if l.len() != n {
                return Err(Error::shape("pgd", format!("{} labels for {} inputs", l.len(), n)));
            }
            if let Some(&label) = l.iter().find(|&&y| y >= c) {
                return Err(Error::LabelOutOfRange { label, classes: c });
            }
        }
        let needs_labels = !matches!(objective, Objective::KlVsClean);
        if needs_labels && labels.is_none() {
            return Err(Error::InvalidArgument(format!("{objective:?} requires labels")));
        }
        let clean = match clean_logits {
            Some(l) => l.clone(),
            None => model.forward_logits(x, use_ema)?,
        };
        let clean_pred = (0..n).map(|i| argmax(clean.row(i))).collect();
        let targets = match objective {
            Objective::TargetedMargin(Target::Class(t)) => {
                if t >= c {
                    return Err(Error::LabelOutOfRange { label: t, classes: c });
                }
                vec![t; n]
            }
            Objective::TargetedMargin(Target::TopIncorrect(rank)) => {
                let l = labels.unwrap();
                (0..n)
                    .map(|i| {
                        let ranked = ranked_incorrect(clean.row(i), l[i]);
                        ranked[rank.min(ranked.len() - 1)]
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        Ok(ModelObjective {
            model,
            use_ema,
            objective,
            labels,
            clean_logits: matches!(objective, Objective::KlVsClean).then_some(clean),
            clean_pred,
            targets,
        })
    }
}

impl<T: Scalar> AttackObjective<T> for ModelObjective<'_, T> {
    fn evaluate(&mut self, x_adv: &Tensor<T>, need_grad: bool) -> Result<Evaluation<T>> {
        let n = x_adv.rows();
        let mut tape = Tape::new();
        let w = tape.constants_from(self.model.weights(self.use_ema));
        let xv = if need_grad {
            tape.input(x_adv.clone())
        } else {
            tape.constant(x_adv.clone())
        };
        let (logits, _) = self.model.forward_on(&mut tape, xv, &w)?;
        let lt = tape.value(logits).clone();
        let c = lt.row_len();
        let mut ls = vec![T::zero(); c];
        let mut values = Vec::with_capacity(n);
        let pred: Vec<usize> = (0..n).map(|i| argmax(lt.row(i))).collect();
        let success = match self.labels {
            Some(l) => (0..n).map(|i| pred[i] != l[i]).collect(),
            None => (0..n).map(|i| pred[i] != self.clean_pred[i]).collect(),
        };

        let total = match self.objective {
            Objective::CrossEntropy => {
                let l = self.labels.unwrap();
                for i in 0..n {
                    log_softmax_row(lt.row(i), &mut ls);
                    values.push(-ls[l[i]]);
                }
                let mean = tape.softmax_cross_entropy(logits, l)?;
                tape.scale(mean, T::of(n as f64))?
            }
            Objective::KlVsClean => {
                let clean = self.clean_logits.as_ref().unwrap();
                let mut lp = vec![T::zero(); c];
                for i in 0..n {
                    log_softmax_row(clean.row(i), &mut lp);
                    log_softmax_row(lt.row(i), &mut ls);
                    values.push(lp.iter().zip(&ls).map(|(&a, &b)| a.exp() * (a - b)).sum());
                }
                let anchor = tape.constant(clean.clone());
                let mean = tape.kl_divergence(anchor, logits)?;
                tape.scale(mean, T::of(n as f64))?
            }
            Objective::Margin | Objective::TargetedMargin(_) => {
                let l = self.labels.unwrap();
                let other: Vec<usize> = match self.objective {
                    Objective::Margin => (0..n).map(|i| best_other(lt.row(i), l[i])).collect(),
                    _ => self.targets.clone(),
                };
                for i in 0..n {
                    values.push(lt.row(i)[other[i]] - lt.row(i)[l[i]]);
                }
                let zo = tape.pick(logits, &other)?;
                let zy = tape.pick(logits, l)?;
                let d = tape.sub(zo, zy)?;
                tape.sum(d)?
            }
        };
        let grad = if need_grad {
            let g = tape.backward(total)?;
            Some(g.wrt(xv))
        } else {
            None
        };
        Ok(Evaluation { values, success, grad })
    }
}

/// Projected gradient ascent against a classifier.
pub fn pgd<T: Scalar>(
    model: &Classifier<T>,
    use_ema: bool,
    x: &Tensor<T>,
    labels: Option<&[usize]>,
    clean_logits: Option<&Tensor<T>>,
    set: &PerturbationSet,
    cfg: &AttackConfig,
) -> Result<AttackResult<T>> {
    let ids: Vec<u64> = (0..x.rows() as u64).collect();
    pgd_with_ids(model, use_ema, x, labels, clean_logits, &ids, set, cfg)
}

#[allow(clippy::too_many_arguments)]
pub fn pgd_with_ids<T: Scalar>(
    model: &Classifier<T>,
    use_ema: bool,
    x: &Tensor<T>,
    labels: Option<&[usize]>,
    clean_logits: Option<&Tensor<T>>,
    ids: &[u64],
    set: &PerturbationSet,
    cfg: &AttackConfig,
) -> Result<AttackResult<T>> {
    let mut obj = ModelObjective::new(model, use_ema, x, cfg.objective, labels, clean_logits)?;
    ascend(&mut obj, x, ids, set, cfg)
}

/// Single signed step of size ε on cross-entropy.
pub fn fgsm<T: Scalar>(
    model: &Classifier<T>,
    use_ema: bool,
    x: &Tensor<T>,
    labels: &[usize],
    set: &PerturbationSet,
) -> Result<AttackResult<T>> {
    if set.norm != Norm::Linf {
        return Err(Error::InvalidArgument("fgsm is defined for the Linf ball".into()));
    }
    let cfg = AttackConfig {
        steps: 1,
        step_size: set.epsilon.max(f64::MIN_POSITIVE),
        optimizer: InnerOptimizer::SignSgd,
        restarts: 1,
        objective: Objective::CrossEntropy,
        random_start: false,
        seed: 0,
    };
    pgd(model, use_ema, x, Some(labels), None, set, &cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    /// Untargeted cross-entropy stage.
    pub stage1: AttackConfig,
    /// Targeted-margin stage; its objective is replaced per target rank.
    pub stage2: AttackConfig,
    /// Number of top incorrect classes attacked in stage 2.
    pub top_k: usize,
    #[serde(default = "default_true")]
    pub use_ema: bool,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_true() -> bool {
    true
}

fn default_batch() -> usize {
    256
}

impl CascadeConfig {
    /// Stage 1: 5 restarts × 100 steps; stage 2: top-3 targets, 10 restarts × 200 steps.
    pub fn standard(set: &PerturbationSet, seed: u64) -> Self {
        Self::scaled(set, 5, 100, 3, 10, 200, seed)
    }

    pub fn scaled(
        set: &PerturbationSet,
        restarts1: usize,
        steps1: usize,
        top_k: usize,
        restarts2: usize,
        steps2: usize,
        seed: u64,
    ) -> Self {
        let step = |steps: usize| (2.5 * set.epsilon / steps.max(1) as f64).max(1e-12);
        CascadeConfig {
            stage1: AttackConfig::pgd_ce(steps1, step(steps1), restarts1, seed),
            stage2: AttackConfig {
                steps: steps2,
                step_size: step(steps2),
                optimizer: InnerOptimizer::SignSgd,
                restarts: restarts2,
                objective: Objective::TargetedMargin(Target::TopIncorrect(0)),
                random_start: true,
                seed: seed.wrapping_add(1),
            },
            top_k,
            use_ema: true,
            batch_size: 256,
        }
    }
}

/// Per-example outcome of the cascade.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CascadeRecord {
    pub example_id: usize,
    pub clean_correct: bool,
    pub stage1_survived: bool,
    pub stage2_survived: bool,
    pub worst_margin: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeReport {
    pub clean_accuracy: f64,
    pub stage1_accuracy: f64,
    pub robust_accuracy: f64,
    pub records: Vec<CascadeRecord>,
}

impl CascadeReport {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        crate::container::write_csv(path, &self.records)
    }
}

/// Runs `run` on `idx` in chunks of `batch`; results are keyed by position in `idx`.
/// Chunks may run on the worker pool; the merge order is fixed.
fn chunked<T: Scalar>(
    data: &LabeledDataset<T>,
    idx: &[usize],
    batch: usize,
    run: impl Fn(&Tensor<T>, &[usize], &[u64]) -> Result<AttackResult<T>> + Sync + Send,
) -> Result<Vec<(usize, AttackResult<T>)>> {
    let batch = batch.max(1);
    let chunks: Vec<&[usize]> = idx.chunks(batch).collect();
    parallel::map_indexed(chunks.len(), |c| {
        let chunk = chunks[c];
        let x = data.images.select_rows(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
        run(&x, &labels, &ids).map(|r| (c * batch, r))
    })
    .into_iter()
    .collect()
}

/// Worst case over an untargeted stage and `top_k` targeted stages.
///
/// Only examples that survive earlier stages are attacked further; an example
/// counts as robust when it is clean-correct and survives everything.
pub fn attack_cascade<T: Scalar>(
    model: &Classifier<T>,
    data: &LabeledDataset<T>,
    set: &PerturbationSet,
    cfg: &CascadeConfig,
) -> Result<CascadeReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cascade on an empty dataset".into()));
    }
    let n = data.len();
    let clean = model.logits_chunked(&data.images, cfg.use_ema)?;
    let margins = margin_loss(&clean, &data.labels)?;
    let mut records: Vec<CascadeRecord> = (0..n)
        .map(|i| {
            let correct = argmax(clean.row(i)) == data.labels[i];
            CascadeRecord {
                example_id: i,
                clean_correct: correct,
                stage1_survived: correct,
                stage2_survived: correct,
                worst_margin: margins[i].to_f64c(),
            }
        })
        .collect();

    let note = |records: &mut [CascadeRecord],
                idx: &[usize],
                results: Vec<(usize, AttackResult<T>)>,
                stage: u8|
     -> Result<()> {
        for (offset, res) in results {
            let labels: Vec<usize> = (0..res.success.len()).map(|j| data.labels[idx[offset + j]]).collect();
            let adv_logits = model.logits_chunked(&res.adversarial, cfg.use_ema)?;
            let m = margin_loss(&adv_logits, &labels)?;
            for (j, &s) in res.success.iter().enumerate() {
                let r = &mut records[idx[offset + j]];
                r.worst_margin = r.worst_margin.min(m[j].to_f64c());
                if s {
                    if stage == 1 {
                        r.stage1_survived = false;
                    }
                    r.stage2_survived = false;
                }
            }
        }
        Ok(())
    };

    let survivors: Vec<usize> = (0..n).filter(|&i| records[i].clean_correct).collect();
    if set.epsilon > 0.0 && !survivors.is_empty() {
        let res = chunked(data, &survivors, cfg.batch_size, |x, l, ids| {
            pgd_with_ids(model, cfg.use_ema, x, Some(l), None, ids, set, &cfg.stage1)
        })?;
        note(&mut records, &survivors, res, 1)?;

        let k = cfg.top_k.min(data.num_classes - 1);
        for rank in 0..k {
            let alive: Vec<usize> = (0..n).filter(|&i| records[i].stage2_survived).collect();
            if alive.is_empty() {
                break;
            }
            let mut stage = cfg.stage2;
            stage.objective = Objective::TargetedMargin(Target::TopIncorrect(rank));
            stage.seed = seed::derive(cfg.stage2.seed, &[rank as u64]);
            let res = chunked(data, &alive, cfg.batch_size, |x, l, ids| {
                pgd_with_ids(model, cfg.use_ema, x, Some(l), None, ids, set, &stage)
            })?;
            note(&mut records, &alive, res, 2)?;
        }
    }

    let frac = |f: &dyn Fn(&CascadeRecord) -> bool| records.iter().filter(|r| f(r)).count() as f64 / n as f64;
    Ok(CascadeReport {
        clean_accuracy: frac(&|r| r.clean_correct),
        stage1_accuracy: frac(&|r| r.clean_correct && r.stage1_survived),
        robust_accuracy: frac(&|r| r.clean_correct && r.stage1_survived && r.stage2_survived),
        records,
    })
}

/// Robust accuracy under a single PGD configuration (validation-style check).
pub fn pgd_accuracy<T: Scalar>(
    model: &Classifier<T>,
    use_ema: bool,
    data: &LabeledDataset<T>,
    set: &PerturbationSet,
    cfg: &AttackConfig,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("robust accuracy of an empty dataset".into()));
    }
    let pred = model.predict(&data.images, use_ema)?;
    let correct: Vec<usize> = (0..data.len()).filter(|&i| pred[i] == data.labels[i]).collect();
    if set.epsilon == 0.0 || correct.is_empty() {
        return Ok(correct.len() as f64 / data.len() as f64);
    }
    let res = chunked(data, &correct, 256, |x, l, ids| {
        pgd_with_ids(model, use_ema, x, Some(l), None, ids, set, cfg)
    })?;
    let broken: usize = res.iter().map(|(_, r)| r.success.iter().filter(|&&s| s).count()).sum();
    Ok((correct.len() - broken) as f64 / data.len() as f64)
}
