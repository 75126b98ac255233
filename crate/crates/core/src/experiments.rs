//! Resumable sweeps over the experiment axes.
//!
//! Each `(axis value, variant, seed)` cell trains one model and evaluates it
//! with the attack cascade. Finished cells are stored as JSON markers under
//! `<dir>/cells/`, keyed by the config hash, so an interrupted sweep resumes
//! where it stopped and a finished one is not recomputed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::attack_cascade;
use crate::config::{ExperimentConfig, Precision, SweepAxis};
use crate::container::{atomic_write, write_csv};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::generation::{default_pca_k, fit_class_gaussians, fit_pca, GaussianGenerativeModel};
use crate::labeling::{
    filter_topk_per_class, make_degraded_labeler, pseudo_label_with, train_nonrobust, PseudoLabeledSet,
};
use crate::model::{Classifier, ModelConfig};
use crate::scalar::Scalar;
use crate::seed;
use crate::stats;
use crate::synthetic::{make_synthetic_dataset, SyntheticData};
use crate::training::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub sweep: String,
    pub axis_value: f64,
    pub variant: String,
    pub seed: u64,
    pub clean_accuracy: Option<f64>,
    pub robust_accuracy: Option<f64>,
    /// Robust accuracy on generated examples the model trained on.
    pub gen_split_robust: Option<f64>,
    /// Robust accuracy on fresh generated examples.
    pub heldout_gen_robust: Option<f64>,
    pub labeler_accuracy: Option<f64>,
    pub status: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct CellOutcome {
    clean: f64,
    robust: f64,
    gen_split: Option<f64>,
    heldout_gen: Option<f64>,
    labeler: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub sweep: String,
    pub axis_value: f64,
    pub variant: String,
    pub cells: usize,
    pub ok_cells: usize,
    pub robust_mean: f64,
    pub robust_std: f64,
    pub clean_mean: f64,
    pub gen_split_robust_mean: Option<f64>,
    pub heldout_gen_robust_mean: Option<f64>,
    pub labeler_accuracy_mean: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub records: Vec<CellRecord>,
    /// Cells trained during this call.
    pub computed: usize,
    /// Cells loaded from markers.
    pub resumed: usize,
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| stats::mean(&v))
}

impl SweepResult {
    fn ok(&self) -> impl Iterator<Item = &CellRecord> {
        self.records.iter().filter(|r| r.status == "ok")
    }

    /// Axis values in first-seen order.
    pub fn axis_values(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.axis_value) {
                out.push(r.axis_value);
            }
        }
        out
    }

    /// Robust accuracy per seed for one cell column.
    pub fn robust_by_seed(&self, value: f64, variant: &str) -> BTreeMap<u64, f64> {
        self.ok()
            .filter(|r| r.axis_value == value && r.variant == variant)
            .filter_map(|r| r.robust_accuracy.map(|a| (r.seed, a)))
            .collect()
    }

    pub fn robust_mean(&self, value: f64, variant: &str) -> f64 {
        stats::mean(&self.robust_by_seed(value, variant).into_values().collect::<Vec<_>>())
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(f64, String)> = Vec::new();
        for r in &self.records {
            let k = (r.axis_value, r.variant.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(value, variant)| {
                let all: Vec<&CellRecord> = self
                    .records
                    .iter()
                    .filter(|r| r.axis_value == value && r.variant == variant)
                    .collect();
                let ok: Vec<&CellRecord> = all.iter().copied().filter(|r| r.status == "ok").collect();
                let robust: Vec<f64> = ok.iter().filter_map(|r| r.robust_accuracy).collect();
                let clean: Vec<f64> = ok.iter().filter_map(|r| r.clean_accuracy).collect();
                SummaryRow {
                    sweep: all[0].sweep.clone(),
                    axis_value: value,
                    variant,
                    cells: all.len(),
                    ok_cells: ok.len(),
                    robust_mean: stats::mean(&robust),
                    robust_std: stats::std_dev(&robust),
                    clean_mean: stats::mean(&clean),
                    gen_split_robust_mean: mean_of(ok.iter().map(|r| r.gen_split_robust)),
                    heldout_gen_robust_mean: mean_of(ok.iter().map(|r| r.heldout_gen_robust)),
                    labeler_accuracy_mean: mean_of(ok.iter().map(|r| r.labeler_accuracy)),
                }
            })
            .collect()
    }

    /// Writes `cells.csv` and `summary.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_csv(&dir.join("cells.csv"), &self.records)?;
        write_csv(&dir.join("summary.csv"), &self.summary())
    }
}

struct CellStore {
    dir: Option<PathBuf>,
    hash: String,
    sweep: String,
}

impl CellStore {
    fn marker(&self, value: f64, variant: &str, seed_idx: u64) -> Option<PathBuf> {
        let name = format!("{}_{value}_{variant}_{seed_idx}.json", self.sweep);
        self.dir.as_ref().map(|d| d.join("cells").join(name))
    }

    fn run(
        &self,
        result: &mut SweepResult,
        value: f64,
        variant: &str,
        seed_idx: u64,
        compute: impl FnOnce() -> Result<CellOutcome>,
    ) -> Result<()> {
        let marker = self.marker(value, variant, seed_idx);
        if let Some(path) = marker.as_ref().filter(|p| p.exists()) {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            if let Ok(rec) = serde_json::from_str::<CellRecord>(&text) {
                if rec.config_hash == self.hash {
                    result.records.push(rec);
                    result.resumed += 1;
                    return Ok(());
                }
            }
        }
        let mut rec = CellRecord {
            sweep: self.sweep.clone(),
            axis_value: value,
            variant: variant.to_string(),
            seed: seed_idx,
            clean_accuracy: None,
            robust_accuracy: None,
            gen_split_robust: None,
            heldout_gen_robust: None,
            labeler_accuracy: None,
            status: "ok".into(),
            config_hash: self.hash.clone(),
        };
        match compute() {
            Ok(o) => {
                rec.clean_accuracy = Some(o.clean);
                rec.robust_accuracy = Some(o.robust);
                rec.gen_split_robust = o.gen_split;
                rec.heldout_gen_robust = o.heldout_gen;
                rec.labeler_accuracy = o.labeler;
            }
            Err(e) => rec.status = format!("error: {e}"),
        }
        if let Some(path) = marker {
            atomic_write(&path, serde_json::to_string_pretty(&rec)?.as_bytes())?;
        }
        result.records.push(rec);
        result.computed += 1;
        Ok(())
    }
}

const TAG_DATA: u64 = 0xDA7A;
const TAG_MODEL: u64 = 0x30DE;
const TAG_TRAIN: u64 = 0x7EA1;
const TAG_LABELER: u64 = 0x1AB;
const TAG_POOL: u64 = 0x9001;
const TAG_TRUE_POOL: u64 = 0x7E0E;
const TAG_FRESH: u64 = 0xF8E5;

/// Per-seed shared state, built on first use.
struct SeedContext<T> {
    data: SyntheticData<T>,
    labeler: Option<(Classifier<T>, f64)>,
    generator: Option<GaussianGenerativeModel<T>>,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
}

impl Runner<'_> {
    fn data<T: Scalar>(&self, s: u64) -> Result<SyntheticData<T>> {
        let mut spec = self.cfg.dataset.clone();
        spec.seed = seed::derive(self.cfg.dataset.seed, &[TAG_DATA, s]);
        make_synthetic_dataset(&spec)
    }

    fn context<T: Scalar>(&self, s: u64) -> Result<SeedContext<T>> {
        Ok(SeedContext {
            data: self.data(s)?,
            labeler: None,
            generator: None,
        })
    }

    fn labeler<'c, T: Scalar>(&self, ctx: &'c mut SeedContext<T>, s: u64) -> Result<&'c (Classifier<T>, f64)> {
        if ctx.labeler.is_none() {
            let mut mc = self.cfg.labeler_model.clone();
            mc.seed = seed::derive(mc.seed, &[TAG_LABELER, s]);
            let mut lc = self.cfg.labeler;
            lc.seed = seed::derive(lc.seed, &[TAG_LABELER, s]);
            let model = train_nonrobust(&ctx.data.train, &mc, &lc)?;
            let acc = model.accuracy(&ctx.data.test, true)?;
            ctx.labeler = Some((model, acc));
        }
        Ok(ctx.labeler.as_ref().unwrap())
    }

    fn generator<'c, T: Scalar>(&self, ctx: &'c mut SeedContext<T>) -> Result<&'c GaussianGenerativeModel<T>> {
        if ctx.generator.is_none() {
            let train = &ctx.data.train;
            let flat = train.flat_images();
            let k = self
                .cfg
                .generation
                .pca_k
                .unwrap_or_else(|| default_pca_k(flat.row_len()))
                .min(train.len().saturating_sub(1));
            let pca = fit_pca(&flat, k)?;
            ctx.generator = Some(fit_class_gaussians(&pca, train)?);
        }
        Ok(ctx.generator.as_ref().unwrap())
    }

    /// `n` generator samples in class-interleaved order, labelled by generator class.
    fn gaussian_pool<T: Scalar>(
        &self,
        g: &GaussianGenerativeModel<T>,
        n: usize,
        s: u64,
        tag: u64,
    ) -> Result<LabeledDataset<T>> {
        let c = g.num_classes();
        let per = n.div_ceil(c);
        let blocked = g.sample_balanced(per, seed::derive(self.cfg.generation.seed, &[tag, s]))?;
        let order: Vec<usize> = (0..per)
            .flat_map(|i| (0..c).map(move |k| k * per + i))
            .take(n)
            .collect();
        Ok(blocked.subset(&order))
    }

    fn pseudo_labeled<T: Scalar>(
        &self,
        labeler: &Classifier<T>,
        pool: &LabeledDataset<T>,
        id: &str,
    ) -> Result<PseudoLabeledSet<T>> {
        let set = pseudo_label_with(labeler, &pool.images, id, self.cfg.generation.score)?;
        match self.cfg.generation.filter_top_k {
            Some(k) => filter_topk_per_class(&set, k),
            None => Ok(set),
        }
    }

    fn train_cfg(&self, s: u64, alpha: f64) -> TrainConfig {
        let mut t = self.cfg.train.clone();
        t.alpha = alpha;
        t.seed = seed::derive(t.seed, &[TAG_TRAIN, s]);
        t
    }

    fn model_cfg(&self, base: &ModelConfig, s: u64) -> ModelConfig {
        let mut m = base.clone();
        m.seed = seed::derive(m.seed, &[TAG_MODEL, s]);
        m
    }

    fn cascade_accuracy<T: Scalar>(
        &self,
        model: &Classifier<T>,
        data: &LabeledDataset<T>,
        s: u64,
    ) -> Result<(f64, f64)> {
        let mut c = self.cfg.cascade.clone();
        c.stage1.seed = seed::derive(c.stage1.seed, &[s]);
        c.stage2.seed = seed::derive(c.stage2.seed, &[s]);
        let r = attack_cascade(model, data, &self.cfg.train.perturbation, &c)?;
        Ok((r.clean_accuracy, r.robust_accuracy))
    }

    fn fit_and_score<T: Scalar>(
        &self,
        model_cfg: &ModelConfig,
        s: u64,
        alpha: f64,
        orig: &LabeledDataset<T>,
        gen: Option<&PseudoLabeledSet<T>>,
        test: &LabeledDataset<T>,
    ) -> Result<(Classifier<T>, CellOutcome)> {
        let model = Classifier::init(self.model_cfg(model_cfg, s))?;
        let (model, _) = train(&self.train_cfg(s, alpha), orig, gen, model)?;
        let (clean, robust) = self.cascade_accuracy(&model, test, s)?;
        Ok((
            model,
            CellOutcome {
                clean,
                robust,
                ..CellOutcome::default()
            },
        ))
    }
}

/// Runs the sweep described by `cfg.sweep`. With `dir`, cells are
/// checkpointed there and `cells.csv`, `summary.csv` and `config.json` are written.
pub fn run_sweep<T: Scalar>(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<SweepResult> {
    cfg.validate()?;
    let store = CellStore {
        dir: dir.map(Path::to_path_buf),
        hash: cfg.hash(),
        sweep: cfg.sweep.axis.name().to_string(),
    };
    if let Some(d) = dir {
        atomic_write(&d.join("config.json"), cfg.to_json().as_bytes())?;
    }
    let r = Runner { cfg };
    let mut result = SweepResult::default();
    for &s in &cfg.sweep.seeds {
        let mut ctx: Option<SeedContext<T>> = None;
        macro_rules! ctx {
            () => {{
                if ctx.is_none() {
                    ctx = Some(r.context(s)?);
                }
                ctx.as_mut().unwrap()
            }};
        }
        match &cfg.sweep.axis {
            SweepAxis::Mixing { alphas } => {
                for &alpha in alphas {
                    store.run(&mut result, alpha, "", s, || {
                        let c = ctx!();
                        let pool = r.gaussian_pool(r.generator(c)?, cfg.generation.pool_size, s, TAG_POOL)?;
                        let labeler = r.labeler(c, s)?.0.clone();
                        let gen = r.pseudo_labeled(&labeler, &pool, "nonrobust")?;
                        let (_, mut o) =
                            r.fit_and_score(&cfg.model, s, alpha, &c.data.train, Some(&gen), &c.data.test)?;
                        o.labeler = Some(r.labeler(c, s)?.1);
                        Ok(o)
                    })?;
                }
            }
            SweepAxis::Condition1 { levels } => {
                for &level in levels {
                    store.run(&mut result, level, "", s, || {
                        let c = ctx!();
                        let pool = r.gaussian_pool(r.generator(c)?, cfg.generation.pool_size, s, TAG_POOL)?;
                        let calib = c.data.train.concat(&c.data.holdout)?;
                        let mut lc = cfg.labeler;
                        lc.seed = seed::derive(lc.seed, &[TAG_LABELER, s]);
                        let mc = r.model_cfg(&cfg.labeler_model, s);
                        let degraded =
                            make_degraded_labeler(&calib, level, &mc, &lc, seed::derive(s, &[seed::float_tag(level)]))?;
                        let gen = r.pseudo_labeled(&degraded.model, &pool, &format!("degraded-{level}"))?;
                        let (_, mut o) =
                            r.fit_and_score(&cfg.model, s, cfg.train.alpha, &c.data.train, Some(&gen), &c.data.test)?;
                        o.labeler = Some(degraded.heldout_accuracy);
                        Ok(o)
                    })?;
                }
            }
            SweepAxis::Condition2 { gauss_fractions } => {
                for &f in gauss_fractions {
                    store.run(&mut result, f, "", s, || {
                        let c = ctx!();
                        let p = cfg.generation.pool_size;
                        let n_gauss = (f * p as f64).round() as usize;
                        let g = r.gaussian_pool(r.generator(c)?, n_gauss, s, TAG_POOL)?;
                        let t = c
                            .data
                            .distribution
                            .sample_split::<T>(p - n_gauss, seed::derive(TAG_TRUE_POOL, &[s]))?;
                        let pool = PseudoLabeledSet::from_labeled(g.concat(&t)?, "generator-class");
                        let (_, o) = r.fit_and_score(&cfg.model, s, 0.0, &c.data.train, Some(&pool), &c.data.test)?;
                        Ok(o)
                    })?;
                }
            }
            SweepAxis::Coverage {
                covered_classes,
                widths,
                gauss_fraction,
            } => {
                for &width in widths {
                    let variant = format!("w{width}");
                    let mut mc = cfg.model.clone();
                    mc.hidden = vec![width; mc.hidden.len()];
                    for &covered in covered_classes {
                        store.run(&mut result, covered as f64, &variant, s, || {
                            let c = ctx!();
                            let p = cfg.generation.pool_size;
                            let n_gauss = (gauss_fraction * p as f64).round() as usize;
                            let g = r.gaussian_pool(r.generator(c)?, n_gauss, s, TAG_POOL)?;
                            let pool = if covered == 0 {
                                g
                            } else {
                                let n_true = p - n_gauss;
                                let mut rng = seed::stream(TAG_TRUE_POOL, &[s]);
                                let mut parts = Vec::new();
                                let mut labels = Vec::new();
                                for class in 0..covered {
                                    let k = n_true / covered + usize::from(class < n_true % covered);
                                    parts.push(c.data.distribution.sample_class::<T>(class, k, &mut rng)?);
                                    labels.extend(std::iter::repeat_n(class, k));
                                }
                                let imgs = crate::tensor::Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?;
                                g.concat(&LabeledDataset::new(imgs, labels, g.num_classes)?)?
                            };
                            let pool = PseudoLabeledSet::from_labeled(pool, "generator-class");
                            let (_, o) = r.fit_and_score(&mc, s, 0.0, &c.data.train, Some(&pool), &c.data.test)?;
                            Ok(o)
                        })?;
                    }
                }
            }
            SweepAxis::Scaling {
                pool_sizes,
                gen_eval_size,
            } => {
                for &size in pool_sizes {
                    store.run(&mut result, size as f64, "", s, || {
                        let c = ctx!();
                        let max = pool_sizes.iter().copied().max().unwrap_or(size);
                        let full = r.gaussian_pool(r.generator(c)?, max, s, TAG_POOL)?;
                        let idx: Vec<usize> = (0..size).collect();
                        let labeler = r.labeler(c, s)?.0.clone();
                        let gen = r.pseudo_labeled(&labeler, &full.subset(&idx), "nonrobust")?;
                        let (model, mut o) =
                            r.fit_and_score(&cfg.model, s, 0.0, &c.data.train, Some(&gen), &c.data.test)?;
                        let m = (*gen_eval_size).min(gen.len());
                        let in_pool = gen.data.slice(0, m);
                        o.gen_split = Some(r.cascade_accuracy(&model, &in_pool, s)?.1);
                        let fresh = r.gaussian_pool(r.generator(c)?, *gen_eval_size, s, TAG_FRESH)?;
                        let fresh = r.pseudo_labeled(&labeler, &fresh, "nonrobust")?;
                        o.heldout_gen = Some(r.cascade_accuracy(&model, &fresh.data, s)?.1);
                        o.labeler = Some(r.labeler(c, s)?.1);
                        Ok(o)
                    })?;
                }
            }
        }
    }
    if let Some(d) = dir {
        result.write(d)?;
    }
    Ok(result)
}

/// [`run_sweep`] at the precision named in the config.
pub fn run_sweep_auto(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<SweepResult> {
    match cfg.precision {
        Precision::F32 => run_sweep::<f32>(cfg, dir),
        Precision::F64 => run_sweep::<f64>(cfg, dir),
    }
}

/// Mixing-factor sweep (`cfg.sweep.axis` is replaced).
pub fn run_mixing_sweep(
    cfg: &ExperimentConfig,
    alphas: &[f64],
    seeds: &[u64],
    dir: Option<&Path>,
) -> Result<SweepResult> {
    let mut c = cfg.clone();
    c.sweep.axis = SweepAxis::Mixing {
        alphas: alphas.to_vec(),
    };
    c.sweep.seeds = seeds.to_vec();
    run_sweep_auto(&c, dir)
}

pub fn run_condition1_probe(
    cfg: &ExperimentConfig,
    levels: &[f64],
    seeds: &[u64],
    dir: Option<&Path>,
) -> Result<SweepResult> {
    let mut c = cfg.clone();
    c.sweep.axis = SweepAxis::Condition1 {
        levels: levels.to_vec(),
    };
    c.sweep.seeds = seeds.to_vec();
    run_sweep_auto(&c, dir)
}

pub fn run_condition2_probe(
    cfg: &ExperimentConfig,
    gauss_fractions: &[f64],
    seeds: &[u64],
    dir: Option<&Path>,
) -> Result<SweepResult> {
    let mut c = cfg.clone();
    c.sweep.axis = SweepAxis::Condition2 {
        gauss_fractions: gauss_fractions.to_vec(),
    };
    c.sweep.seeds = seeds.to_vec();
    run_sweep_auto(&c, dir)
}

pub fn run_coverage_probe(
    cfg: &ExperimentConfig,
    covered_classes: &[usize],
    widths: &[usize],
    gauss_fraction: f64,
    seeds: &[u64],
    dir: Option<&Path>,
) -> Result<SweepResult> {
    let mut c = cfg.clone();
    c.sweep.axis = SweepAxis::Coverage {
        covered_classes: covered_classes.to_vec(),
        widths: widths.to_vec(),
        gauss_fraction,
    };
    c.sweep.seeds = seeds.to_vec();
    run_sweep_auto(&c, dir)
}

pub fn run_scaling_study(
    cfg: &ExperimentConfig,
    pool_sizes: &[usize],
    gen_eval_size: usize,
    seeds: &[u64],
    dir: Option<&Path>,
) -> Result<SweepResult> {
    let mut c = cfg.clone();
    c.sweep.axis = SweepAxis::Scaling {
        pool_sizes: pool_sizes.to_vec(),
        gen_eval_size,
    };
    c.sweep.seeds = seeds.to_vec();
    run_sweep_auto(&c, dir)
}
