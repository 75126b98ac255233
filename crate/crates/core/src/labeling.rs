//! Non-robust labelers, pseudo-labels and score filtering.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Classifier, ModelConfig};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::{argmax, softmax_row, Tensor};
use crate::training::{self, EarlyStopConfig, LossKind, TrainConfig};

/// Generated images with labels assigned by a classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabeledSet<T> {
    /// Images with their pseudo-labels.
    pub data: LabeledDataset<T>,
    /// Labeler confidence per image.
    pub scores: Vec<f64>,
    pub labeler_id: String,
}

impl<T: Scalar> PseudoLabeledSet<T> {
    /// Wraps already-labelled data (e.g. labels known from the generator), with unit scores.
    pub fn from_labeled(data: LabeledDataset<T>, labeler_id: impl Into<String>) -> Self {
        let scores = vec![1.0; data.len()];
        PseudoLabeledSet {
            data,
            scores,
            labeler_id: labeler_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pseudo_labels(&self) -> &[usize] {
        &self.data.labels
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        PseudoLabeledSet {
            data: self.data.subset(idx),
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
            labeler_id: self.labeler_id.clone(),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.push_tensor("images", &self.data.images)?;
        c.push_labels("pseudo_labels", &self.data.labels)?;
        c.push_tensor("scores", &Tensor::new(vec![self.scores.len()], self.scores.clone())?)?;
        c.push_meta("labeler_id", &self.labeler_id)?;
        c.push_meta("num_classes", &self.data.num_classes.to_string())?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let num_classes = c
            .meta("num_classes")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("missing num_classes".into()))?;
        let data = LabeledDataset::new(c.tensor("images")?, c.labels("pseudo_labels")?, num_classes)?;
        let scores = c.tensor::<f64>("scores")?.into_data();
        if scores.len() != data.len() {
            return Err(Error::Format("score count differs from image count".into()));
        }
        Ok(PseudoLabeledSet {
            data,
            scores,
            labeler_id: c.meta("labeler_id").unwrap_or_default(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    #[default]
    MaxProbability,
    MaxLogit,
}

/// Labels `images` with the labeler's weight-averaged argmax.
pub fn pseudo_label<T: Scalar>(
    labeler: &Classifier<T>,
    images: &Tensor<T>,
    labeler_id: &str,
) -> Result<PseudoLabeledSet<T>> {
    pseudo_label_with(labeler, images, labeler_id, ScoreKind::MaxProbability)
}

pub fn pseudo_label_with<T: Scalar>(
    labeler: &Classifier<T>,
    images: &Tensor<T>,
    labeler_id: &str,
    score: ScoreKind,
) -> Result<PseudoLabeledSet<T>> {
    let logits = labeler.logits_chunked(images, true)?;
    let c = logits.row_len();
    let mut probs = vec![T::zero(); c];
    let mut labels = Vec::with_capacity(logits.rows());
    let mut scores = Vec::with_capacity(logits.rows());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let y = argmax(row);
        labels.push(y);
        scores.push(match score {
            ScoreKind::MaxProbability => {
                softmax_row(row, &mut probs);
                probs[y].to_f64c()
            }
            ScoreKind::MaxLogit => row[y].to_f64c(),
        });
    }
    Ok(PseudoLabeledSet {
        data: LabeledDataset::new(images.clone(), labels, c)?,
        scores,
        labeler_id: labeler_id.to_string(),
    })
}

/// Keeps the `k` best-scoring items of every class, preserving original order.
pub fn filter_topk_per_class<T: Scalar>(set: &PseudoLabeledSet<T>, k: usize) -> Result<PseudoLabeledSet<T>> {
    let classes = set.data.num_classes;
    let mut keep = Vec::with_capacity(k * classes);
    let mut deficits = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..set.len()).filter(|&i| set.data.labels[i] == c).collect();
        if idx.len() < k {
            deficits.push(format!("class {c}: {} of {k}", idx.len()));
            continue;
        }
        idx.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]).then(a.cmp(&b)));
        keep.extend_from_slice(&idx[..k]);
    }
    if !deficits.is_empty() {
        return Err(Error::InsufficientSamples(deficits.join(", ")));
    }
    keep.sort_unstable();
    Ok(set.subset(&keep))
}

/// Settings for standard (non-adversarial) training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonRobustConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_tau: f64,
    pub seed: u64,
}

impl Default for NonRobustConfig {
    fn default() -> Self {
        NonRobustConfig {
            epochs: 30,
            batch_size: 64,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            ema_tau: 0.995,
            seed: 0,
        }
    }
}

impl NonRobustConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: 1.0,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            ema_tau: self.ema_tau,
            loss: LossKind::Clean,
            early_stop: EarlyStopConfig {
                validation_size: 0,
                ..EarlyStopConfig::default()
            },
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// Cross-entropy training; evaluate the result with its averaged weights.
pub fn train_nonrobust<T: Scalar>(
    data: &LabeledDataset<T>,
    config: &ModelConfig,
    cfg: &NonRobustConfig,
) -> Result<Classifier<T>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let model = Classifier::init(config.clone())?;
    Ok(training::train(&cfg.train_config(), data, None, model)?.0)
}

#[derive(Clone, Debug)]
pub struct DegradedLabeler<T> {
    pub model: Classifier<T>,
    /// Fraction of each class whose labels were shifted.
    pub noise_rate: f64,
    pub heldout_accuracy: f64,
    pub trials: usize,
}

/// Shifts `y → (y+1) mod C` for the fraction `rate` of each class lying
/// furthest along `direction`. The corrupted region is a half-space, so a
/// network can fit it and reproduce the corruption on unseen inputs.
pub fn shift_labels<T: Scalar>(data: &LabeledDataset<T>, rate: f64, direction: &[f64]) -> Vec<usize> {
    let c = data.num_classes;
    let mut labels = data.labels.clone();
    for class in 0..c {
        let mut idx: Vec<(f64, usize)> = (0..data.len())
            .filter(|&i| data.labels[i] == class)
            .map(|i| {
                let row = data.images.row(i);
                let s: f64 = row.iter().zip(direction).map(|(&x, &d)| x.to_f64c() * d).sum();
                (s, i)
            })
            .collect();
        idx.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let n = (rate.clamp(0.0, 1.0) * idx.len() as f64).round() as usize;
        for &(_, i) in &idx[..n] {
            labels[i] = (class + 1) % c;
        }
    }
    labels
}

const MAX_TRIALS: usize = 5;
const TOLERANCE: f64 = 0.02;

/// Trains a labeler whose held-out accuracy lands within ±2% of `target`.
///
/// A seeded 20% split of `data` measures accuracy; the noise rate starts at
/// `1 − target`; later rates follow the secant through the last two trials.
pub fn make_degraded_labeler<T: Scalar>(
    data: &LabeledDataset<T>,
    target: f64,
    config: &ModelConfig,
    cfg: &NonRobustConfig,
    seed_value: u64,
) -> Result<DegradedLabeler<T>> {
    let chance = 1.0 / data.num_classes as f64;
    if !(target > chance && target <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target accuracy {target} must lie in (1/C, 1] = ({chance}, 1]"
        )));
    }
    if data.len() < 10 {
        return Err(Error::InsufficientSamples(format!("{} examples", data.len())));
    }
    let mut perm: Vec<usize> = (0..data.len()).collect();
    {
        use rand::seq::SliceRandom;
        perm.shuffle(&mut seed::stream(seed_value, &[0x5EED]));
    }
    let n_hold = data.len() / 5;
    let holdout = data.subset(&perm[..n_hold]);
    let fit = data.subset(&perm[n_hold..]);
    let direction: Vec<f64> = {
        let mut rng = seed::stream(seed_value, &[0xD12]);
        let v: Vec<f64> = (0..data.images.row_len()).map(|_| seed::normal(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.into_iter().map(|x| x / n).collect()
    };

    let mut rate = 1.0 - target;
    let mut best: Option<DegradedLabeler<T>> = None;
    let mut prev: Option<(f64, f64)> = None;
    for trial in 1..=MAX_TRIALS {
        let labels = shift_labels(&fit, rate, &direction);
        let noisy = LabeledDataset::new(fit.images.clone(), labels, fit.num_classes)?;
        let model = train_nonrobust(&noisy, config, cfg)?;
        let acc = model.accuracy(&holdout, true)?;
        let err = acc - target;
        let candidate = DegradedLabeler {
            model,
            noise_rate: rate,
            heldout_accuracy: acc,
            trials: trial,
        };
        if err.abs() <= TOLERANCE {
            return Ok(candidate);
        }
        if best
            .as_ref()
            .is_none_or(|b| (b.heldout_accuracy - target).abs() > err.abs())
        {
            best = Some(candidate);
        }
        // secant step once two trials exist, unit gain otherwise
        let next = match prev {
            Some((r0, a0)) if (rate - r0).abs() > 1e-9 && (acc - a0) / (rate - r0) < -0.05 => {
                rate - err * (rate - r0) / (acc - a0)
            }
            _ => rate + err,
        };
        prev = Some((rate, acc));
        rate = next.clamp(0.0, 1.0);
    }
    Err(Error::Unreachable {
        target,
        best: best.map_or(f64::NAN, |b| b.heldout_accuracy),
        trials: MAX_TRIALS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(labels: Vec<usize>, scores: Vec<f64>, c: usize) -> PseudoLabeledSet<f64> {
        let n = labels.len();
        PseudoLabeledSet {
            data: LabeledDataset::new(Tensor::zeros(vec![n, 1, 1, 1]), labels, c).unwrap(),
            scores,
            labeler_id: "t".into(),
        }
    }

    #[test]
    fn topk_hand_case() {
        let s = set(vec![0, 0, 1], vec![0.9, 0.8, 0.7], 2);
        let f = filter_topk_per_class(&s, 1).unwrap();
        assert_eq!(f.scores, vec![0.9, 0.7]);
        assert_eq!(f.pseudo_labels(), &[0, 1]);
    }

    #[test]
    fn topk_reports_deficits() {
        let s = set(vec![0, 0, 1], vec![0.9, 0.8, 0.7], 3);
        let err = filter_topk_per_class(&s, 2).unwrap_err().to_string();
        assert!(
            err.contains("class 1: 1 of 2") && err.contains("class 2: 0 of 2"),
            "{err}"
        );
    }

    #[test]
    fn shift_rate_extremes() {
        let data = LabeledDataset::new(
            Tensor::from_fn(vec![4, 1, 1, 2], |i| i as f64 / 8.0).unwrap(),
            vec![0, 0, 1, 1],
            2,
        )
        .unwrap();
        assert_eq!(shift_labels(&data, 0.0, &[1.0, 0.0]), vec![0, 0, 1, 1]);
        assert_eq!(shift_labels(&data, 1.0, &[1.0, 0.0]), vec![1, 1, 0, 0]);
        // the example further along the direction flips first
        assert_eq!(shift_labels(&data, 0.5, &[1.0, 0.0]), vec![0, 1, 1, 0]);
    }
}
