//! Synthetic image distributions with known class-conditional structure.
//!
//! Images are `0.5 + s·A·l` for a latent code `l` and a random orthonormal
//! `A` (pixels × latent), clipped to `[0, 1]`. The `gaussian` family draws
//! `l` from one Gaussian per class, so a class-conditional Gaussian fit in
//! PCA space represents it almost exactly. The `mixture-warp` family draws
//! `l` from several components per class and passes pixels through a
//! monotone warp, which a single Gaussian per class cannot represent.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum Family {
    Gaussian,
    MixtureWarp {
        /// Gaussian components per class.
        components: usize,
        /// Spread of component means around the class mean (latent units).
        spread: f64,
        /// Steepness of the `tanh` pixel warp; 0 disables it.
        warp: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub family: Family,
    pub num_classes: usize,
    /// `[C, H, W]`
    pub image_shape: [usize; 3],
    pub latent_dim: usize,
    /// Class means lie at radius `separation/2` in the latent space, along
    /// random directions (antipodal when there are two classes).
    pub separation: f64,
    /// Per-coordinate standard deviation of the latent noise.
    pub noise: f64,
    /// Pixel scale `s` applied to the latent code.
    pub pixel_scale: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub holdout_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            family: Family::Gaussian,
            num_classes: 4,
            image_shape: [1, 8, 8],
            latent_dim: 8,
            separation: 2.0,
            noise: 0.5,
            pixel_scale: 1.0,
            train_size: 2000,
            test_size: 2000,
            holdout_size: 500,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let d: usize = self.image_shape.iter().product();
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.latent_dim == 0 || self.latent_dim > d {
            return Err(Error::Config(format!(
                "latent_dim {} must lie in [1, {d}]",
                self.latent_dim
            )));
        }
        if !(self.noise >= 0.0 && self.separation >= 0.0 && self.pixel_scale > 0.0) {
            return Err(Error::Config(
                "noise, separation and pixel_scale must be non-negative".into(),
            ));
        }
        if let Family::MixtureWarp { components, .. } = self.family {
            if components == 0 {
                return Err(Error::Config("mixture needs at least one component".into()));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.image_shape.iter().product()
    }
}

/// The sampling distribution described by a spec.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDistribution {
    pub spec: SyntheticSpec,
    /// `[d, m]` orthonormal columns.
    basis: Vec<f64>,
    /// Per class, per component latent means.
    means: Vec<Vec<Vec<f64>>>,
}

const TAG_BASIS: u64 = 0xBA5E;
const TAG_MEANS: u64 = 0x3EA5;

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl SyntheticDistribution {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let (d, m) = (spec.dim(), spec.latent_dim);
        let mut rng = seed::stream(spec.seed, &[TAG_BASIS]);
        // Gram-Schmidt on Gaussian columns
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(m);
        while cols.len() < m {
            let mut v: Vec<f64> = (0..d).map(|_| seed::normal(&mut rng)).collect();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                unit(&mut v);
                cols.push(v);
            }
        }
        let mut basis = vec![0.0; d * m];
        for (j, c) in cols.iter().enumerate() {
            for i in 0..d {
                basis[i * m + j] = c[i];
            }
        }

        let mut rng = seed::stream(spec.seed, &[TAG_MEANS]);
        let half = spec.separation / 2.0;
        let components = match spec.family {
            Family::Gaussian => 1,
            Family::MixtureWarp { components, .. } => components,
        };
        let spread = match spec.family {
            Family::Gaussian => 0.0,
            Family::MixtureWarp { spread, .. } => spread,
        };
        let mut first: Vec<f64> = Vec::new();
        let means = (0..spec.num_classes)
            .map(|class| {
                let mut center: Vec<f64> = (0..m).map(|_| seed::normal(&mut rng)).collect();
                unit(&mut center);
                center.iter_mut().for_each(|x| *x *= half);
                // two classes sit exactly `separation` apart
                if spec.num_classes == 2 && class == 1 {
                    center = first.iter().map(|x| -x).collect();
                }
                if class == 0 {
                    first = center.clone();
                }
                (0..components)
                    .map(|_| {
                        let mut off: Vec<f64> = (0..m).map(|_| seed::normal(&mut rng)).collect();
                        unit(&mut off);
                        center.iter().zip(&off).map(|(c, o)| c + spread * o).collect()
                    })
                    .collect()
            })
            .collect();
        Ok(SyntheticDistribution {
            spec: spec.clone(),
            basis,
            means,
        })
    }

    /// Latent mean of a class (component 0 for mixtures).
    pub fn class_mean(&self, class: usize) -> &[f64] {
        &self.means[class][0]
    }

    /// `0.5 + s·A·l`, before clipping or warping.
    pub fn embed_latent(&self, l: &[f64]) -> Vec<f64> {
        let (d, m) = (self.spec.dim(), self.spec.latent_dim);
        (0..d)
            .map(|i| 0.5 + self.spec.pixel_scale * (0..m).map(|j| self.basis[i * m + j] * l[j]).sum::<f64>())
            .collect()
    }

    fn finish_pixel(&self, p: f64) -> f64 {
        let p = match self.spec.family {
            Family::MixtureWarp { warp, .. } if warp > 0.0 => {
                0.5 + 0.5 * (warp * (p - 0.5)).tanh() / (0.5 * warp).tanh()
            }
            _ => p,
        };
        p.clamp(0.0, 1.0)
    }

    /// `n` images of `class`, `[n, C, H, W]`.
    pub fn sample_class<T: Scalar>(&self, class: usize, n: usize, rng: &mut seed::Rng) -> Result<Tensor<T>> {
        use rand::Rng as _;
        if class >= self.spec.num_classes {
            return Err(Error::LabelOutOfRange {
                label: class,
                classes: self.spec.num_classes,
            });
        }
        let m = self.spec.latent_dim;
        let comps = &self.means[class];
        let mut data = Vec::with_capacity(n * self.spec.dim());
        let mut l = vec![0.0; m];
        for _ in 0..n {
            let comp = if comps.len() > 1 {
                rng.random_range(0..comps.len())
            } else {
                0
            };
            for (j, lj) in l.iter_mut().enumerate() {
                *lj = comps[comp][j] + self.spec.noise * seed::normal::<f64>(rng);
            }
            data.extend(self.embed_latent(&l).into_iter().map(|p| T::of(self.finish_pixel(p))));
        }
        let [c, h, w] = self.spec.image_shape;
        Tensor::new(vec![n, c, h, w], data)
    }

    /// A shuffled split with class counts `⌊n/C⌋`, the first `n mod C` classes getting one more.
    pub fn sample_split<T: Scalar>(&self, n: usize, tag: u64) -> Result<LabeledDataset<T>> {
        use rand::seq::SliceRandom;
        let c = self.spec.num_classes;
        let mut rng = seed::stream(self.spec.seed, &[tag]);
        let mut parts = Vec::with_capacity(c);
        let mut labels = Vec::with_capacity(n);
        for class in 0..c {
            let count = n / c + usize::from(class < n % c);
            parts.push(self.sample_class::<T>(class, count, &mut rng)?);
            labels.extend(std::iter::repeat_n(class, count));
        }
        let images = Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let labels = order.iter().map(|&i| labels[i]).collect();
        LabeledDataset::new(images.select_rows(&order), labels, c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData<T> {
    pub train: LabeledDataset<T>,
    pub test: LabeledDataset<T>,
    pub holdout: LabeledDataset<T>,
    pub distribution: SyntheticDistribution,
}

pub const TAG_TRAIN: u64 = 0x7A;
pub const TAG_TEST: u64 = 0x7E;
pub const TAG_HOLDOUT: u64 = 0x40;

/// Independent train, test and holdout draws from the distribution described by `spec`.
pub fn make_synthetic_dataset<T: Scalar>(spec: &SyntheticSpec) -> Result<SyntheticData<T>> {
    let dist = SyntheticDistribution::new(spec)?;
    Ok(SyntheticData {
        train: dist.sample_split(spec.train_size, TAG_TRAIN)?,
        test: dist.sample_split(spec.test_size, TAG_TEST)?,
        holdout: dist.sample_split(spec.holdout_size, TAG_HOLDOUT)?,
        distribution: dist,
    })
}
