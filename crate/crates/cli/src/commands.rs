use std::path::{Path, PathBuf};

use genrobust::artifacts::{
    load_checkpoint, load_dataset, load_generator, save_checkpoint, save_dataset, save_generator,
};
use genrobust::attack::attack_cascade;
use genrobust::config::ExperimentConfig;
use genrobust::diagnostics::{diagnose, loss_landscape, FeatureEmbedder};
use genrobust::experiments::run_sweep_auto;
use genrobust::generation::{default_pca_k, fit_class_gaussians, fit_pca, load_external_samples, ExternalSampleSet};
use genrobust::labeling::{filter_topk_per_class, pseudo_label_with, train_nonrobust};
use genrobust::synthetic::make_synthetic_dataset;
use genrobust::training::train;
use genrobust::{Classifier, Container, Error, LabeledDataset, PseudoLabeledSet, Result, Scalar, Tensor};

use crate::Command;

struct Layout<'a> {
    dir: &'a Path,
}

impl Layout<'_> {
    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn split<T: Scalar>(&self, name: &str) -> Result<LabeledDataset<T>> {
        load_dataset(&self.file(&format!("{name}.grtc")))
    }
}

fn save_with_hash(mut c: Container, path: &Path, hash: &str) -> Result<()> {
    c.push_meta("config_hash", hash)?;
    c.save(path)
}

pub fn run<T: Scalar>(command: &Command, cfg: &ExperimentConfig) -> Result<()> {
    let dir = cfg.output_dir.as_path();
    let at = Layout { dir };
    let hash = cfg.hash();
    match command {
        Command::MakeData(_) => {
            let data = make_synthetic_dataset::<T>(&cfg.dataset)?;
            for (name, split) in [("train", &data.train), ("test", &data.test), ("holdout", &data.holdout)] {
                let path = at.file(&format!("{name}.grtc"));
                save_dataset(split, &path, &hash)?;
                println!("{name}: {} examples -> {}", split.len(), path.display());
            }
        }
        Command::TrainNonrobust(_) => {
            let train_set = at.split::<T>("train")?;
            let model = train_nonrobust(&train_set, &cfg.labeler_model, &cfg.labeler)?;
            let acc = model.accuracy(&at.split::<T>("test")?, true)?;
            let path = at.file("labeler.grtc");
            save_checkpoint(&model, &path, &hash)?;
            println!("labeler test accuracy {acc:.4} -> {}", path.display());
        }
        Command::FitGaussian(_) => {
            let train_set = at.split::<T>("train")?;
            let flat = train_set.flat_images();
            let k = cfg.generation.pca_k.unwrap_or_else(|| default_pca_k(flat.row_len()));
            let g = fit_class_gaussians(&fit_pca(&flat, k)?, &train_set)?;
            let path = at.file("generator.grtc");
            save_generator(&g, &path, &hash)?;
            println!("generator with {k} components -> {}", path.display());
        }
        Command::Generate { count, .. } => {
            let g = load_generator::<T>(&at.file("generator.grtc"))?;
            let n = count.unwrap_or(cfg.generation.pool_size);
            let per = n.div_ceil(g.num_classes());
            let pool = g.sample_balanced(per, cfg.generation.seed)?;
            let set = ExternalSampleSet::new(pool.images, Some(pool.labels), "gaussian-fit")?;
            let path = at.file("generated.grtc");
            save_with_hash(set.to_container()?, &path, &hash)?;
            println!("{} samples -> {}", set.len(), path.display());
        }
        Command::PseudoLabel { samples, .. } => {
            let labeler = load_checkpoint::<T>(&at.file("labeler.grtc"))?;
            let src = samples.clone().unwrap_or_else(|| at.file("generated.grtc"));
            let external = load_external_samples::<T>(&src)?;
            let mut set = pseudo_label_with(&labeler, &external.images, "labeler", cfg.generation.score)?;
            if let Some(k) = cfg.generation.filter_top_k {
                set = filter_topk_per_class(&set, k)?;
            }
            let path = at.file("pseudo.grtc");
            save_with_hash(set.to_container()?, &path, &hash)?;
            println!("{} pseudo-labelled samples -> {}", set.len(), path.display());
        }
        Command::Train { pseudo, .. } => {
            let orig = at.split::<T>("train")?;
            let gen = if cfg.train.alpha < 1.0 {
                let path = pseudo.clone().unwrap_or_else(|| at.file("pseudo.grtc"));
                Some(PseudoLabeledSet::<T>::load(&path)?)
            } else {
                None
            };
            let model = Classifier::init(cfg.model.clone())?;
            let (model, report) = train(&cfg.train, &orig, gen.as_ref(), model)?;
            let path = at.file("model.grtc");
            save_checkpoint(&model, &path, &hash)?;
            report.write_csv(&at.file("train_report.csv"))?;
            match report.best_val_robust {
                Some(v) => println!(
                    "{} steps, best validation robust accuracy {v:.4} at step {}",
                    report.total_steps,
                    report.best_step.unwrap_or(0)
                ),
                None => println!("{} steps", report.total_steps),
            }
            println!("checkpoint -> {}", path.display());
        }
        Command::AttackEval { model, .. } => {
            let path = model.clone().unwrap_or_else(|| at.file("model.grtc"));
            let m = load_checkpoint::<T>(&path)?;
            let test = at.split::<T>("test")?;
            let r = attack_cascade(&m, &test, &cfg.train.perturbation, &cfg.cascade)?;
            let csv = at.file("attack.csv");
            r.write_csv(&csv)?;
            println!(
                "clean {:.4}  stage1 {:.4}  robust {:.4} -> {}",
                r.clean_accuracy,
                r.stage1_accuracy,
                r.robust_accuracy,
                csv.display()
            );
        }
        Command::Diagnose { model, .. } => {
            let labeler = load_checkpoint::<T>(&at.file("labeler.grtc"))?;
            let n = cfg.diagnostics.sample_size;
            let head = |t: Tensor<T>| {
                let k = t.rows().min(n);
                t.slice_rows(0, k)
            };
            let train_x = head(at.split::<T>("train")?.images);
            let test = at.split::<T>("test")?;
            let test_x = head(test.images.clone());
            let gen_x = head(load_external_samples::<T>(&at.file("generated.grtc"))?.images);
            let fit_on = Tensor::concat_rows(&[&train_x, &test_x])?;
            let embedder = FeatureEmbedder::fit(labeler.clone(), &fit_on, cfg.diagnostics.embed_k)?;
            let report = diagnose(
                &embedder,
                &labeler,
                &train_x,
                &test_x,
                &gen_x,
                cfg.diagnostics.is_splits,
            )?;
            report.write_csv(&at.file("diagnostics.csv"))?;

            let scanned = match model.clone() {
                Some(p) => load_checkpoint::<T>(&p)?,
                None if at.file("model.grtc").exists() => load_checkpoint::<T>(&at.file("model.grtc"))?,
                None => labeler,
            };
            let i = cfg.diagnostics.landscape_example;
            if i >= test.len() {
                return Err(Error::InvalidArgument(format!(
                    "landscape example {i} beyond {} test examples",
                    test.len()
                )));
            }
            let land = loss_landscape(
                &scanned,
                true,
                &test.images.slice_rows(i, i + 1),
                test.labels[i],
                &cfg.train.perturbation,
                cfg.diagnostics.landscape_half_extent,
                cfg.diagnostics.landscape_resolution,
                cfg.train.seed,
            )?;
            land.write_csv(&at.file("landscape.csv"))?;
            println!(
                "c_train {:.3} c_test {:.3} c_self {:.3} v_train {:.3} v_test {:.3} fid {:.4} is {:.3}±{:.3}",
                report.c_train,
                report.c_test,
                report.c_self,
                report.v_train,
                report.v_test,
                report.fid,
                report.is_mean,
                report.is_std
            );
        }
        Command::Sweep(_) => {
            let r = run_sweep_auto(cfg, Some(dir))?;
            println!(
                "{} cells computed, {} reused -> {}",
                r.computed,
                r.resumed,
                dir.display()
            );
            for row in r.summary() {
                println!(
                    "{} {:<6} robust {:.4} ± {:.4} over {} cells",
                    row.axis_value, row.variant, row.robust_mean, row.robust_std, row.ok_cells
                );
            }
        }
    }
    Ok(())
}
