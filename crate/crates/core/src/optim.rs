//! Learning-rate schedule and Nesterov SGD.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `lr0·(1 + cos(π·t/T))/2`, with the endpoints pinned to `lr0` and `0`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::InvalidArgument(format!("cosine schedule step {t} of {total}")));
    }
    if t == total {
        return Ok(0.0);
    }
    Ok(lr0 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()) / 2.0)
}

/// Nesterov momentum with decoupled weight decay:
///
/// ```text
/// buf ← μ·buf + g
/// p   ← p·(1 − lr·wd) − lr·(g + μ·buf)
/// ```
#[derive(Clone, Debug)]
pub struct NesterovSgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> NesterovSgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        NesterovSgd {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        let mu = T::of(self.momentum);
        let lr_t = T::of(lr);
        let shrink = T::of(1.0 - lr * self.weight_decay);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let p = params.get(&name)?;
            let g = grads.get(&name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("NesterovSgd::step", format!("gradient of `{name}`")));
            }
            let buf = self
                .buffers
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); p.numel()]);
            let mut data = Vec::with_capacity(p.numel());
            for ((&pv, &gv), b) in p.data().iter().zip(g.data()).zip(buf.iter_mut()) {
                *b = mu * *b + gv;
                data.push(pv * shrink - lr_t * (gv + mu * *b));
            }
            let shape = p.shape().to_vec();
            params.set(&name, Tensor::checked("sgd step", shape, data)?)?;
        }
        Ok(())
    }
}
