//! Mixed-batch robust training.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, PerturbationSet};
use crate::autodiff::Tape;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::labeling::PseudoLabeledSet;
use crate::model::Classifier;
use crate::optim::{cosine_lr, NesterovSgd};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Clean cross-entropy plus `β·KL(f(x) ‖ f(x+δ))`.
    Trades,
    /// Cross-entropy at the inner maximizer.
    StandardAt,
    /// Plain cross-entropy, no attack.
    Clean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStopConfig {
    /// Taken from the end of the original training set; 0 disables early stopping.
    pub validation_size: usize,
    pub pgd_steps: usize,
    /// Steps between evaluations; 0 evaluates once per epoch.
    pub eval_every: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig {
            validation_size: 128,
            pgd_steps: 40,
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Fraction of each batch drawn from the original data.
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_tau: f64,
    /// Use `min(τ, (1+t)/(10+t))` so short runs are not dominated by the initial weights.
    pub ema_warmup: bool,
    pub loss: LossKind,
    pub inner_attack: AttackConfig,
    pub perturbation: PerturbationSet,
    pub early_stop: EarlyStopConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 6.0,
            epochs: 10,
            batch_size: 64,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            ema_tau: 0.995,
            ema_warmup: true,
            loss: LossKind::Trades,
            inner_attack: AttackConfig::trades_kl(10, 0.1, 0),
            perturbation: PerturbationSet::linf(0.1),
            early_stop: EarlyStopConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_tau) {
            return Err(Error::Config(format!("ema_tau {} outside [0, 1]", self.ema_tau)));
        }
        if !(self.lr0 >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr0, momentum and weight_decay must be >= 0".into()));
        }
        self.perturbation.validate()?;
        if self.loss != LossKind::Clean {
            self.inner_attack.validate()?;
        }
        Ok(())
    }
}

/// `(round(α·B), B − round(α·B))`
pub fn mix_counts(alpha: f64, batch_size: usize) -> (usize, usize) {
    let n_orig = ((alpha * batch_size as f64).round() as usize).min(batch_size);
    (n_orig, batch_size - n_orig)
}

/// One training batch: original examples first, then generated ones.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub n_orig: usize,
    pub n_gen: usize,
}

fn assemble<T: Scalar>(
    orig: &LabeledDataset<T>,
    orig_idx: &[usize],
    gen: Option<&LabeledDataset<T>>,
    gen_idx: &[usize],
) -> Result<MixedBatch<T>> {
    let a = orig.images.select_rows(orig_idx);
    let mut labels: Vec<usize> = orig_idx.iter().map(|&i| orig.labels[i]).collect();
    let images = match gen {
        Some(g) if !gen_idx.is_empty() => {
            labels.extend(gen_idx.iter().map(|&i| g.labels[i]));
            Tensor::concat_rows(&[&a, &g.images.select_rows(gen_idx)])?
        }
        _ => a,
    };
    Ok(MixedBatch {
        images,
        labels,
        n_orig: orig_idx.len(),
        n_gen: gen_idx.len(),
    })
}

fn check_sources<T: Scalar>(
    orig: &LabeledDataset<T>,
    gen: Option<&LabeledDataset<T>>,
    n_orig: usize,
    n_gen: usize,
) -> Result<()> {
    if n_orig > 0 && orig.is_empty() {
        return Err(Error::InvalidArgument("original data is empty but alpha > 0".into()));
    }
    if n_gen > 0 && gen.is_none_or(|g| g.is_empty()) {
        return Err(Error::InvalidArgument("generated data is empty but alpha < 1".into()));
    }
    if let Some(g) = gen {
        if g.num_classes != orig.num_classes {
            return Err(Error::InvalidArgument(format!(
                "generated set has {} classes, original {}",
                g.num_classes, orig.num_classes
            )));
        }
    }
    Ok(())
}

/// Draws one batch: the original part without replacement, the generated part with replacement.
pub fn build_mixed_batch<T: Scalar>(
    orig: &LabeledDataset<T>,
    gen: Option<&PseudoLabeledSet<T>>,
    alpha: f64,
    batch_size: usize,
    rng: &mut seed::Rng,
) -> Result<MixedBatch<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let gen = gen.map(|g| &g.data);
    let (n_orig, n_gen) = mix_counts(alpha, batch_size);
    check_sources(orig, gen, n_orig, n_gen)?;
    if n_orig > orig.len() {
        return Err(Error::InvalidArgument(format!(
            "{n_orig} original examples requested from {}",
            orig.len()
        )));
    }
    let orig_idx = rand::seq::index::sample(rng, orig.len(), n_orig).into_vec();
    let gen_idx: Vec<usize> = match gen {
        Some(g) if n_gen > 0 => (0..n_gen).map(|_| rng.random_range(0..g.len())).collect(),
        _ => Vec::new(),
    };
    assemble(orig, &orig_idx, gen, &gen_idx)
}

/// Endless stream of indices, reshuffled on every pass.
struct Cycler {
    perm: Vec<usize>,
    pos: usize,
    rng: seed::Rng,
}

impl Cycler {
    fn new(n: usize, rng: seed::Rng) -> Self {
        Cycler {
            perm: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.perm.len() {
                self.perm.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.perm[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Loss value and parameter gradients for one batch.
pub struct LossOutput<T> {
    pub loss: T,
    pub grads: BTreeMap<String, Tensor<T>>,
}

/// Evaluates the chosen robust loss on the current (non-averaged) weights.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad<T: Scalar>(
    model: &Classifier<T>,
    kind: LossKind,
    x: &Tensor<T>,
    labels: &[usize],
    beta: f64,
    inner: &AttackConfig,
    set: &PerturbationSet,
    want_grad: bool,
) -> Result<LossOutput<T>> {
    let mut tape = Tape::new();
    let w = tape.params_from(&model.params);
    let xv = tape.constant(x.clone());
    let loss = match kind {
        LossKind::Clean => {
            let (logits, _) = model.forward_on(&mut tape, xv, &w)?;
            tape.softmax_cross_entropy(logits, labels)?
        }
        LossKind::StandardAt => {
            let adv = attack::pgd(
                model,
                false,
                x,
                Some(labels),
                None,
                set,
                &with_objective(inner, attack::Objective::CrossEntropy),
            )?;
            let av = tape.constant(adv.adversarial);
            let (logits, _) = model.forward_on(&mut tape, av, &w)?;
            tape.softmax_cross_entropy(logits, labels)?
        }
        LossKind::Trades => {
            let (clean, _) = model.forward_on(&mut tape, xv, &w)?;
            let ce = tape.softmax_cross_entropy(clean, labels)?;
            if beta == 0.0 {
                ce
            } else {
                let anchor = tape.value(clean).clone();
                let cfg = with_objective(inner, attack::Objective::KlVsClean);
                let adv = attack::pgd(model, false, x, Some(labels), Some(&anchor), set, &cfg)?;
                let av = tape.constant(adv.adversarial);
                let (logits_adv, _) = model.forward_on(&mut tape, av, &w)?;
                let p = tape.constant(anchor);
                let kl = tape.kl_divergence(p, logits_adv)?;
                let kl = tape.scale(kl, T::of(beta))?;
                tape.add(ce, kl)?
            }
        }
    };
    let value = tape.value(loss).item()?;
    let grads = if want_grad {
        tape.backward(loss)?.params()
    } else {
        BTreeMap::new()
    };
    Ok(LossOutput { loss: value, grads })
}

fn with_objective(cfg: &AttackConfig, objective: attack::Objective) -> AttackConfig {
    AttackConfig { objective, ..*cfg }
}

/// `CE(f(x), y) + β·KL(f(x) ‖ f(x+δ*))`, with `δ*` from a KL-ascent inner attack.
pub fn trades_loss<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    beta: f64,
    inner: &AttackConfig,
    set: &PerturbationSet,
) -> Result<T> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta {beta} must be >= 0")));
    }
    Ok(loss_and_grad(model, LossKind::Trades, x, labels, beta, inner, set, false)?.loss)
}

/// Cross-entropy at the inner cross-entropy maximizer.
pub fn standard_at_loss<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    inner: &AttackConfig,
    set: &PerturbationSet,
) -> Result<T> {
    Ok(loss_and_grad(model, LossKind::StandardAt, x, labels, 0.0, inner, set, false)?.loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub lr: f64,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
    pub val_clean: f64,
    pub val_robust: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EvalRecord>,
    /// Step whose weights were returned (latest among equal validation scores).
    pub best_step: Option<usize>,
    pub best_val_robust: Option<f64>,
    pub total_steps: usize,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::container::write_csv(path, &self.records)
    }
}

const TAG_ORIG: u64 = 0x0419;
const TAG_GEN: u64 = 0x0643;
const TAG_ATTACK: u64 = 0xA77C;
const TAG_VAL: u64 = 0x7A1;

/// Trains `model` on `orig` (true labels) mixed with `gen` (pseudo labels).
///
/// Epoch length is `ceil(n_train / B)` steps regardless of `alpha`. With
/// validation enabled, the returned model holds the weights of the best
/// validation step.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    orig: &LabeledDataset<T>,
    gen: Option<&PseudoLabeledSet<T>>,
    model: Classifier<T>,
) -> Result<(Classifier<T>, TrainReport)> {
    cfg.validate()?;
    let gen = gen.map(|g| &g.data);
    if orig.image_shape() != model.config.input_shape {
        return Err(Error::shape("train", "original data does not match the model input"));
    }
    if let Some(g) = gen {
        if g.image_shape() != model.config.input_shape {
            return Err(Error::shape("train", "generated data does not match the model input"));
        }
    }
    let v = cfg.early_stop.validation_size;
    if v > 0 && v >= orig.len() {
        return Err(Error::Config(format!(
            "validation_size {v} leaves no training data out of {}",
            orig.len()
        )));
    }
    let train_set = orig.slice(0, orig.len() - v);
    let val_set = (v > 0).then(|| orig.slice(orig.len() - v, orig.len()));
    let (n_orig, n_gen) = mix_counts(cfg.alpha, cfg.batch_size);
    check_sources(&train_set, gen, n_orig, n_gen)?;

    let mut report = TrainReport::default();
    if cfg.epochs == 0 || train_set.is_empty() {
        return Ok((model, report));
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let eval_every = if cfg.early_stop.eval_every == 0 {
        steps_per_epoch
    } else {
        cfg.early_stop.eval_every
    };
    let val_attack = AttackConfig::pgd_ce(
        cfg.early_stop.pgd_steps,
        (2.5 * cfg.perturbation.epsilon / cfg.early_stop.pgd_steps.max(1) as f64).max(1e-12),
        1,
        seed::derive(cfg.seed, &[TAG_VAL]),
    );

    let mut model = model;
    let mut opt = NesterovSgd::new(cfg.momentum, cfg.weight_decay);
    let mut orig_cycle = Cycler::new(train_set.len(), seed::stream(cfg.seed, &[TAG_ORIG]));
    let mut gen_cycle = gen.map(|g| Cycler::new(g.len(), seed::stream(cfg.seed, &[TAG_GEN])));
    let mut best: Option<(f64, usize, Classifier<T>)> = None;
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;

    for step in 0..total {
        let oi = orig_cycle.take(n_orig);
        let gi = match (&mut gen_cycle, n_gen) {
            (Some(c), n) if n > 0 => c.take(n),
            _ => Vec::new(),
        };
        let batch = assemble(&train_set, &oi, gen, &gi)?;
        let lr = cosine_lr(step, total, cfg.lr0)?;
        let inner = AttackConfig {
            seed: seed::derive(cfg.seed, &[TAG_ATTACK, step as u64]),
            ..cfg.inner_attack
        };
        let out = loss_and_grad(
            &model,
            cfg.loss,
            &batch.images,
            &batch.labels,
            cfg.beta,
            &inner,
            &cfg.perturbation,
            true,
        )
        .map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged {
                step,
                detail: format!("non-finite value in {what}"),
            },
            other => other,
        })?;
        let loss = out.loss.to_f64c();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {loss}"),
            });
        }
        opt.step(&mut model.params, &out.grads, lr)
            .map_err(|e| Error::Diverged {
                step,
                detail: e.to_string(),
            })?;
        let tau = if cfg.ema_warmup {
            cfg.ema_tau.min((1.0 + step as f64) / (10.0 + step as f64))
        } else {
            cfg.ema_tau
        };
        model.ema_update(tau)?;
        model.steps += 1;
        report.step_losses.push(loss);
        loss_acc += loss;
        loss_n += 1;

        let done = step + 1;
        if let Some(val) = &val_set {
            if done % eval_every == 0 || done == total {
                let val_clean = model.accuracy(val, true)?;
                let val_robust = attack::pgd_accuracy(&model, true, val, &cfg.perturbation, &val_attack)?;
                report.records.push(EvalRecord {
                    step: done,
                    lr,
                    train_loss: loss_acc / loss_n as f64,
                    val_clean,
                    val_robust,
                });
                loss_acc = 0.0;
                loss_n = 0;
                if best.as_ref().is_none_or(|(b, _, _)| val_robust >= *b) {
                    best = Some((val_robust, done, model.clone()));
                }
            }
        }
    }
    report.total_steps = total;
    let model = match best {
        Some((score, step, snapshot)) => {
            report.best_step = Some(step);
            report.best_val_robust = Some(score);
            snapshot
        }
        None => model,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_counts_round() {
        assert_eq!(mix_counts(0.8, 10), (8, 2));
        assert_eq!(mix_counts(1.0, 7), (7, 0));
        assert_eq!(mix_counts(0.0, 7), (0, 7));
        assert_eq!(mix_counts(0.5, 3), (2, 1));
    }

    #[test]
    fn cycler_visits_everything_each_pass() {
        let mut c = Cycler::new(5, seed::rng(1));
        let mut a = c.take(5);
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.take(12).len(), 12);
    }
}
