//! Experiment configuration documents.
//!
//! A config is a JSON object; every section is optional and falls back to
//! its default, but unknown keys anywhere are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{CascadeConfig, PerturbationSet};
use crate::error::{Error, Result};
use crate::labeling::{NonRobustConfig, ScoreKind};
use crate::model::ModelConfig;
use crate::synthetic::SyntheticSpec;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    /// PCA components; defaults to `min(64, d/4)`.
    pub pca_k: Option<usize>,
    /// Generated pool size (split evenly over classes).
    pub pool_size: usize,
    /// Keep the top-K scoring samples per class after pseudo-labeling.
    pub filter_top_k: Option<usize>,
    pub score: ScoreKind,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            pca_k: None,
            pool_size: 4000,
            filter_top_k: None,
            score: ScoreKind::MaxProbability,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum SweepAxis {
    /// Mixing factor grid.
    Mixing { alphas: Vec<f64> },
    /// Labeler accuracy levels, ascending. Trains at `train.alpha`.
    Condition1 { levels: Vec<f64> },
    /// Fraction of the pool drawn from the mismatched Gaussian fit, at `alpha = 0`.
    Condition2 { gauss_fractions: Vec<f64> },
    /// Classes covered by true-generator samples, per model width, at `alpha = 0`.
    Coverage {
        covered_classes: Vec<usize>,
        widths: Vec<usize>,
        gauss_fraction: f64,
    },
    /// Generated pool sizes at `alpha = 0`.
    Scaling {
        pool_sizes: Vec<usize>,
        /// Pool examples re-attacked to measure the generated-split accuracy.
        gen_eval_size: usize,
    },
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Mixing { .. } => "mixing",
            SweepAxis::Condition1 { .. } => "condition1",
            SweepAxis::Condition2 { .. } => "condition2",
            SweepAxis::Coverage { .. } => "coverage",
            SweepAxis::Scaling { .. } => "scaling",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            axis: SweepAxis::Mixing {
                alphas: vec![0.5, 0.8, 1.0],
            },
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub is_splits: usize,
    pub embed_k: Option<usize>,
    /// Points per set for complementarity/coverage.
    pub sample_size: usize,
    pub landscape_resolution: usize,
    pub landscape_half_extent: f64,
    /// Test example scanned by the landscape.
    pub landscape_example: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            is_splits: 10,
            embed_k: None,
            sample_size: 500,
            landscape_resolution: 21,
            landscape_half_extent: 1.0,
            landscape_example: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub precision: Precision,
    pub dataset: SyntheticSpec,
    pub model: ModelConfig,
    pub labeler_model: ModelConfig,
    pub labeler: NonRobustConfig,
    pub generation: GenerationConfig,
    pub train: TrainConfig,
    pub cascade: CascadeConfig,
    pub sweep: SweepConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dataset = SyntheticSpec::default();
        let train = TrainConfig::default();
        ExperimentConfig {
            name: "experiment".into(),
            output_dir: PathBuf::from("runs"),
            precision: Precision::F32,
            model: ModelConfig::mlp(dataset.image_shape, vec![256, 256], dataset.num_classes, 0),
            labeler_model: ModelConfig::mlp(dataset.image_shape, vec![256], dataset.num_classes, 0),
            labeler: NonRobustConfig::default(),
            generation: GenerationConfig::default(),
            cascade: CascadeConfig::scaled(&train.perturbation, 2, 20, 3, 2, 40, 0),
            train,
            sweep: SweepConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            dataset,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks cross-section consistency before any compute starts.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.labeler_model.validate()?;
        self.train.validate()?;
        for (what, m) in [("model", &self.model), ("labeler_model", &self.labeler_model)] {
            if m.input_shape != self.dataset.image_shape || m.num_classes != self.dataset.num_classes {
                return Err(Error::Config(format!(
                    "{what} expects {:?} with {} classes, dataset has {:?} with {}",
                    m.input_shape, m.num_classes, self.dataset.image_shape, self.dataset.num_classes
                )));
            }
        }
        if self.sweep.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        match &self.sweep.axis {
            SweepAxis::Mixing { alphas } if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) => {
                return Err(Error::Config("mixing factors must lie in [0, 1]".into()))
            }
            SweepAxis::Condition1 { levels } if levels.windows(2).any(|w| w[0] > w[1]) => {
                return Err(Error::Config("labeler accuracy levels must be ascending".into()))
            }
            SweepAxis::Coverage { covered_classes, .. }
                if covered_classes.iter().any(|&c| c > self.dataset.num_classes) =>
            {
                return Err(Error::Config("covered class count exceeds the class count".into()))
            }
            _ => {}
        }
        Ok(())
    }

    /// Applies the perturbation set to both training and evaluation.
    pub fn set_perturbation(&mut self, set: PerturbationSet) {
        self.train.perturbation = set;
    }

    /// Hex SHA-256 of the canonical JSON form (first 16 bytes). The output
    /// directory is left out, so a moved run directory still resumes.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}
