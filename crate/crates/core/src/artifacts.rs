//! On-disk artifacts in the container format. Every file carries the hash
//! of the config that produced it under `meta/config_hash`.

use std::path::Path;

use crate::container::Container;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::generation::{ClassGaussian, GaussianGenerativeModel, PcaModel};
use crate::model::{Classifier, ModelConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn checkpoint_container<T: Scalar>(model: &Classifier<T>, config_hash: &str) -> Result<Container> {
    let mut c = Container::new();
    for (name, t) in model.params.iter() {
        c.push_tensor(format!("param/{name}"), t)?;
    }
    for (name, t) in model.ema.iter() {
        c.push_tensor(format!("ema/{name}"), t)?;
    }
    c.push_meta("model_config", &serde_json::to_string(&model.config)?)?;
    c.push_meta("steps", &model.steps.to_string())?;
    c.push_meta("config_hash", config_hash)?;
    Ok(c)
}

pub fn save_checkpoint<T: Scalar>(model: &Classifier<T>, path: &Path, config_hash: &str) -> Result<()> {
    checkpoint_container(model, config_hash)?.save(path)
}

pub fn checkpoint_from_container<T: Scalar>(c: &Container) -> Result<Classifier<T>> {
    let text = c
        .meta("model_config")
        .ok_or_else(|| Error::Format("checkpoint lacks model_config".into()))?;
    let config: ModelConfig = serde_json::from_str(&text)?;
    let layout = config.layout();
    let mut params = ParamStore::new();
    let mut ema = ParamStore::new();
    for (name, shape) in layout {
        for (prefix, store) in [("param", &mut params), ("ema", &mut ema)] {
            let t: Tensor<T> = c.tensor(&format!("{prefix}/{name}"))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "`{prefix}/{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            store.insert(name.clone(), t)?;
        }
    }
    let steps = c.meta("steps").and_then(|s| s.parse().ok()).unwrap_or(0);
    Ok(Classifier {
        config,
        params,
        ema,
        steps,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Classifier<T>> {
    checkpoint_from_container(&Container::load(path)?)
}

pub fn save_dataset<T: Scalar>(data: &LabeledDataset<T>, path: &Path, config_hash: &str) -> Result<()> {
    let mut c = Container::new();
    c.push_tensor("images", &data.images)?;
    c.push_labels("labels", &data.labels)?;
    c.push_meta("num_classes", &data.num_classes.to_string())?;
    c.push_meta("config_hash", config_hash)?;
    c.save(path)
}

pub fn load_dataset<T: Scalar>(path: &Path) -> Result<LabeledDataset<T>> {
    let c = Container::load(path)?;
    let num_classes = c
        .meta("num_classes")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("{}: missing num_classes", path.display())))?;
    LabeledDataset::new(c.tensor("images")?, c.labels("labels")?, num_classes)
}

pub fn save_generator<T: Scalar>(g: &GaussianGenerativeModel<T>, path: &Path, config_hash: &str) -> Result<()> {
    let mut c = Container::new();
    c.push_tensor("pca/mean", &g.pca.mean)?;
    c.push_tensor("pca/basis", &g.pca.basis)?;
    let var = Tensor::new(vec![g.pca.explained_variance.len()], g.pca.explained_variance.clone())?;
    c.push_tensor("pca/explained_variance", &var)?;
    for (i, cg) in g.per_class.iter().enumerate() {
        c.push_tensor(format!("class{i}/mean"), &cg.mean)?;
        c.push_tensor(format!("class{i}/cov_factor"), &cg.cov_factor)?;
        c.push_tensor(format!("class{i}/jitter"), &Tensor::<f64>::scalar(cg.jitter))?;
    }
    let [ch, h, w] = g.image_shape;
    c.push_u32("image_shape", vec![3], vec![ch as u32, h as u32, w as u32])?;
    c.push_meta("num_classes", &g.per_class.len().to_string())?;
    c.push_meta("config_hash", config_hash)?;
    c.save(path)
}

pub fn load_generator<T: Scalar>(path: &Path) -> Result<GaussianGenerativeModel<T>> {
    let c = Container::load(path)?;
    let classes: usize = c
        .meta("num_classes")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("generator lacks num_classes".into()))?;
    let shape = c.u32s("image_shape")?;
    if shape.len() != 3 {
        return Err(Error::Format("image_shape must have 3 extents".into()));
    }
    let pca = PcaModel {
        mean: c.tensor("pca/mean")?,
        basis: c.tensor("pca/basis")?,
        explained_variance: c.tensor::<f64>("pca/explained_variance")?.into_data(),
    };
    let per_class = (0..classes)
        .map(|i| {
            Ok(ClassGaussian {
                mean: c.tensor(&format!("class{i}/mean"))?,
                cov_factor: c.tensor(&format!("class{i}/cov_factor"))?,
                jitter: c.tensor::<f64>(&format!("class{i}/jitter"))?.item()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GaussianGenerativeModel {
        pca,
        per_class,
        image_shape: [shape[0] as usize, shape[1] as usize, shape[2] as usize],
    })
}
