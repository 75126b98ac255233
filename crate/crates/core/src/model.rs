//! Small SiLU classifiers with an exponentially averaged weight copy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Dense layers over the flattened image.
    Mlp,
    /// 3×3 convolutions (the first with stride 1, the rest stride 2) then one dense layer.
    SmallCnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Hidden widths (MLP) or channel counts (CNN).
    pub hidden: Vec<usize>,
    /// `[C, H, W]`
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn mlp(input_shape: [usize; 3], hidden: Vec<usize>, num_classes: usize, seed: u64) -> Self {
        ModelConfig {
            architecture: Architecture::Mlp,
            hidden,
            input_shape,
            num_classes,
            seed,
        }
    }

    pub fn small_cnn(input_shape: [usize; 3], channels: Vec<usize>, num_classes: usize, seed: u64) -> Self {
        ModelConfig {
            architecture: Architecture::SmallCnn,
            hidden: channels,
            input_shape,
            num_classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::Config("at least one hidden layer is required".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config(format!("hidden width 0 in {:?}", self.hidden)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Config(format!("empty input shape {:?}", self.input_shape)));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Spatial extent after the `i`-th convolution (3×3, padding 1).
    fn conv_extent(&self, i: usize) -> (usize, usize) {
        let [_, mut h, mut w] = self.input_shape;
        for _ in 0..i {
            h = (h - 1) / 2 + 1;
            w = (w - 1) / 2 + 1;
        }
        (h, w)
    }

    /// Width of the penultimate representation.
    pub fn feature_dim(&self) -> usize {
        match self.architecture {
            Architecture::Mlp => *self.hidden.last().unwrap(),
            Architecture::SmallCnn => {
                let (h, w) = self.conv_extent(self.hidden.len() - 1);
                self.hidden.last().unwrap() * h * w
            }
        }
    }

    /// Parameter names with shapes, in layer order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match self.architecture {
            Architecture::Mlp => {
                let mut fan_in = self.input_len();
                for (i, &h) in self.hidden.iter().enumerate() {
                    out.push((format!("dense{i}.weight"), vec![fan_in, h]));
                    out.push((format!("dense{i}.bias"), vec![h]));
                    fan_in = h;
                }
            }
            Architecture::SmallCnn => {
                let mut cin = self.input_shape[0];
                for (i, &c) in self.hidden.iter().enumerate() {
                    out.push((format!("conv{i}.weight"), vec![c, cin, 3, 3]));
                    out.push((format!("conv{i}.bias"), vec![c]));
                    cin = c;
                }
            }
        }
        out.push(("head.weight".into(), vec![self.feature_dim(), self.num_classes]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// Weight-averaged copy; same names and shapes as `params`.
    pub ema: ParamStore<T>,
    pub steps: u64,
}

impl<T: Scalar> Classifier<T> {
    /// Fan-in scaled normal weights, zero biases; the EMA copy starts equal.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(config.seed, &[0x1417]);
        let mut params = ParamStore::new();
        for (name, shape) in config.layout() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                // dense weights are [in, out], conv weights [out, in, k, k]
                let fan_in: usize = if shape.len() == 2 {
                    shape[0]
                } else {
                    shape[1..].iter().product()
                };
                let std = T::of(1.0 / (fan_in as f64).sqrt());
                let n = shape.iter().product();
                let data = (0..n).map(|_| seed::normal::<T>(&mut rng) * std).collect();
                Tensor::new(shape, data)?
            };
            params.insert(name, t)?;
        }
        Ok(Classifier {
            config,
            ema: params.clone(),
            params,
            steps: 0,
        })
    }

    pub fn weights(&self, use_ema: bool) -> &ParamStore<T> {
        if use_ema {
            &self.ema
        } else {
            &self.params
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.config.input_shape {
            return Err(Error::shape(
                "forward_logits",
                format!("expected [B, {:?}], got {:?}", self.config.input_shape, s),
            ));
        }
        Ok(())
    }

    /// Records the network on `tape`; returns `(logits, features)`.
    ///
    /// `w` maps parameter names to tape variables, registered either as
    /// parameters (training) or constants (attacks, evaluation).
    pub fn forward_on(&self, tape: &mut Tape<T>, x: Var, w: &BTreeMap<String, Var>) -> Result<(Var, Var)> {
        self.check_input(tape.value(x))?;
        let b = tape.value(x).shape()[0];
        let get = |name: &str| {
            w.get(name)
                .copied()
                .ok_or_else(|| Error::UnknownParam(name.to_string()))
        };
        let features = match self.config.architecture {
            Architecture::Mlp => {
                let mut h = tape.reshape(x, vec![b, self.config.input_len()])?;
                for i in 0..self.config.hidden.len() {
                    let z = tape.matmul(h, get(&format!("dense{i}.weight"))?)?;
                    let z = tape.add_row(z, get(&format!("dense{i}.bias"))?)?;
                    h = tape.silu(z)?;
                }
                h
            }
            Architecture::SmallCnn => {
                let mut h = x;
                for i in 0..self.config.hidden.len() {
                    let stride = if i == 0 { 1 } else { 2 };
                    let z = tape.conv2d(
                        h,
                        get(&format!("conv{i}.weight"))?,
                        get(&format!("conv{i}.bias"))?,
                        stride,
                        1,
                    )?;
                    h = tape.silu(z)?;
                }
                tape.reshape(h, vec![b, self.config.feature_dim()])?
            }
        };
        let z = tape.matmul(features, get("head.weight")?)?;
        let logits = tape.add_row(z, get("head.bias")?)?;
        Ok((logits, features))
    }

    /// Logits for a batch `[B, C, H, W]`; never mutates the model.
    pub fn forward_logits(&self, x: &Tensor<T>, use_ema: bool) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let w = tape.constants_from(self.weights(use_ema));
        let xv = tape.constant(x.clone());
        let (logits, _) = self.forward_on(&mut tape, xv, &w)?;
        Ok(tape.value(logits).clone())
    }

    /// Penultimate activations `[B, feature_dim]`.
    pub fn features(&self, x: &Tensor<T>, use_ema: bool) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let w = tape.constants_from(self.weights(use_ema));
        let xv = tape.constant(x.clone());
        let (_, f) = self.forward_on(&mut tape, xv, &w)?;
        Ok(tape.value(f).clone())
    }

    /// Logits over a large set, evaluated in chunks.
    pub fn logits_chunked(&self, x: &Tensor<T>, use_ema: bool) -> Result<Tensor<T>> {
        const CHUNK: usize = 512;
        let n = x.rows();
        if n <= CHUNK {
            return self.forward_logits(x, use_ema);
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            parts.push(self.forward_logits(&x.slice_rows(start, end), use_ema)?);
            start = end;
        }
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    /// Argmax class per example (lowest index on ties).
    pub fn predict(&self, x: &Tensor<T>, use_ema: bool) -> Result<Vec<usize>> {
        let logits = self.logits_chunked(x, use_ema)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    /// `ema ← τ·ema + (1−τ)·params`, tensor by tensor.
    pub fn ema_update(&mut self, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("ema decay {tau} outside [0, 1]")));
        }
        let t = T::of(tau);
        let one_minus = T::of(1.0 - tau);
        let mut updated = Vec::with_capacity(self.ema.len());
        for (name, e) in self.ema.iter() {
            let p = self.params.get(name)?;
            let data = e
                .data()
                .iter()
                .zip(p.data())
                .map(|(&ev, &pv)| t * ev + one_minus * pv)
                .collect();
            updated.push((
                name.to_string(),
                Tensor::checked("ema_update", e.shape().to_vec(), data)?,
            ));
        }
        for (name, tnsr) in updated {
            self.ema.set(&name, tnsr)?;
        }
        Ok(())
    }

    /// Fraction of examples whose argmax logit equals the label.
    pub fn accuracy(&self, data: &LabeledDataset<T>, use_ema: bool) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("accuracy of an empty dataset".into()));
        }
        let pred = self.predict(&data.images, use_ema)?;
        let correct = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
        Ok(correct as f64 / data.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(seed: u64) -> Classifier<f64> {
        Classifier::init(ModelConfig::mlp([1, 4, 4], vec![8], 3, seed)).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_validates() {
        assert_eq!(mlp(3).params, mlp(3).params);
        assert_ne!(mlp(3).params, mlp(4).params);
        let bad = ModelConfig::mlp([1, 4, 4], vec![0], 3, 0);
        assert!(matches!(Classifier::<f64>::init(bad), Err(Error::Config(_))));
        let bad = ModelConfig::mlp([1, 4, 4], vec![], 3, 0);
        assert!(Classifier::<f64>::init(bad).is_err());
        let bad = ModelConfig::mlp([1, 4, 4], vec![4], 1, 0);
        assert!(Classifier::<f64>::init(bad).is_err());
    }

    #[test]
    fn forward_on_zeros_is_finite_and_ema_matches() {
        for cfg in [
            ModelConfig::mlp([1, 4, 4], vec![8, 8], 3, 1),
            ModelConfig::small_cnn([1, 6, 6], vec![3, 4], 3, 1),
        ] {
            let m = Classifier::<f64>::init(cfg).unwrap();
            let x = Tensor::zeros(vec![2, 1, m.config.input_shape[1], m.config.input_shape[2]]);
            let a = m.forward_logits(&x, false).unwrap();
            let b = m.forward_logits(&x, true).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.shape(), &[2, 3]);
        }
    }

    #[test]
    fn batch_independence() {
        let m = Classifier::<f64>::init(ModelConfig::small_cnn([1, 5, 5], vec![2, 3], 4, 9)).unwrap();
        let mut rng = seed::rng(1);
        let x = Tensor::from_fn(vec![8, 1, 5, 5], |_| rand::Rng::random::<f64>(&mut rng)).unwrap();
        let all = m.forward_logits(&x, false).unwrap();
        for i in 0..8 {
            let one = m.forward_logits(&x.select_rows(&[i]), false).unwrap();
            for (a, b) in one.data().iter().zip(all.row(i)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let m = mlp(0);
        assert!(m.forward_logits(&Tensor::zeros(vec![1, 1, 3, 3]), false).is_err());
    }

    #[test]
    fn ema_identities() {
        let mut m = mlp(0);
        m.ema = mlp(5).params;
        let ema0 = m.ema.clone();
        m.ema_update(1.0).unwrap();
        assert_eq!(m.ema, ema0);
        m.ema_update(0.0).unwrap();
        assert_eq!(m.ema, m.params);
        assert!(m.ema_update(1.5).is_err());
    }

    #[test]
    fn ema_closed_form_recurrence() {
        let mut m = mlp(0);
        m.ema = mlp(1).params;
        let ema0 = m.ema.clone();
        let tau: f64 = 0.9;
        let k = 25;
        for _ in 0..k {
            m.ema_update(tau).unwrap();
        }
        for (name, e) in m.ema.iter() {
            let p = m.params.get(name).unwrap();
            let e0 = ema0.get(name).unwrap();
            for ((&ev, &pv), &e0v) in e.data().iter().zip(p.data()).zip(e0.data()) {
                let expect = pv + tau.powi(k) * (e0v - pv);
                assert!((ev - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn accuracy_edge_cases() {
        let m = mlp(2);
        let mut rng = seed::rng(3);
        let x = Tensor::from_fn(vec![20, 1, 4, 4], |_| rand::Rng::random::<f64>(&mut rng)).unwrap();
        let pred = m.predict(&x, false).unwrap();
        let ds = LabeledDataset::new(x.clone(), pred, 3).unwrap();
        assert_eq!(m.accuracy(&ds, false).unwrap(), 1.0);
        assert!(m.accuracy(&LabeledDataset::empty([1, 4, 4], 3), false).is_err());
    }
}
