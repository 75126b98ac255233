//! Class-conditional Gaussian generator in PCA space, and externally
//! produced sample sets.

use std::path::Path;

use crate::container::Container;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

/// Mean and top-`k` principal directions of flattened images.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel<T> {
    /// `[d]`
    pub mean: Tensor<T>,
    /// `[d, k]`, orthonormal columns in descending variance order.
    pub basis: Tensor<T>,
    /// Variance along each basis direction.
    pub explained_variance: Vec<f64>,
}

/// Flattens `[N, ...]` rows into an `f64` buffer.
fn rows_f64<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, usize, usize) {
    let n = x.rows();
    let d = x.row_len();
    (x.data().iter().map(|v| v.to_f64c()).collect(), n, d)
}

/// Default component count `min(64, d/4)`, at least 1.
pub fn default_pca_k(d: usize) -> usize {
    (d / 4).clamp(1, 64)
}

pub fn fit_pca<T: Scalar>(images: &Tensor<T>, k: usize) -> Result<PcaModel<T>> {
    let (rows, n, d) = rows_f64(images);
    if k == 0 || k >= n || k > d {
        return Err(Error::InvalidArgument(format!(
            "pca needs 1 <= k < N and k <= d (k={k}, N={n}, d={d})"
        )));
    }
    let (mean, cov) = linalg::mean_cov(&rows, n, d);
    let eig = linalg::sym_eigen(&cov, d)?;
    let mut basis = Vec::with_capacity(d * k);
    for i in 0..d {
        for j in 0..k {
            basis.push(T::of(eig.vectors[i * d + j]));
        }
    }
    Ok(PcaModel {
        mean: Tensor::new(vec![d], mean.into_iter().map(T::of).collect())?,
        basis: Tensor::new(vec![d, k], basis)?,
        explained_variance: eig.values[..k].iter().map(|&v| v.max(0.0)).collect(),
    })
}

impl<T: Scalar> PcaModel<T> {
    pub fn dim(&self) -> usize {
        self.basis.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.basis.shape()[1]
    }

    /// `(x − mean)·basis` for rows of `x`, as `[N, k]`.
    pub fn project(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (d, k) = (self.dim(), self.k());
        if x.row_len() != d {
            return Err(Error::shape(
                "pca project",
                format!("rows of {} vs dim {d}", x.row_len()),
            ));
        }
        let n = x.rows();
        let b = self.basis.data();
        let m = self.mean.data();
        let mut out = vec![T::zero(); n * k];
        let mut c = vec![T::zero(); d];
        for i in 0..n {
            for (cj, (&xj, &mj)) in c.iter_mut().zip(x.row(i).iter().zip(m)) {
                *cj = xj - mj;
            }
            let o = &mut out[i * k..(i + 1) * k];
            for (j, &cj) in c.iter().enumerate() {
                for (ov, &bv) in o.iter_mut().zip(&b[j * k..(j + 1) * k]) {
                    *ov += cj * bv;
                }
            }
        }
        Tensor::checked("pca project", vec![n, k], out)
    }

    /// `mean + z·basisᵀ`, as `[N, d]`.
    pub fn inverse(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let (d, k) = (self.dim(), self.k());
        if z.row_len() != k {
            return Err(Error::shape("pca inverse", format!("rows of {} vs k {k}", z.row_len())));
        }
        let n = z.rows();
        let b = self.basis.data();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let zi = z.row(i);
            for j in 0..d {
                let mut s = self.mean.data()[j];
                for (&zv, &bv) in zi.iter().zip(&b[j * k..(j + 1) * k]) {
                    s += zv * bv;
                }
                out.push(s);
            }
        }
        Tensor::checked("pca inverse", vec![n, d], out)
    }
}

/// `N(mean, L·Lᵀ)` in PCA coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassGaussian<T> {
    /// `[k]`
    pub mean: Tensor<T>,
    /// `[k, k]`, lower triangular with non-negative diagonal.
    pub cov_factor: Tensor<T>,
    /// Diagonal jitter added before factoring (0 when none was needed).
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGenerativeModel<T> {
    pub pca: PcaModel<T>,
    pub per_class: Vec<ClassGaussian<T>>,
    /// `[C, H, W]` of generated images.
    pub image_shape: [usize; 3],
}

/// Factors `cov`, adding `1e-6·trace/k` to the diagonal when it is not
/// positive definite (escalating tenfold while factoring still fails).
pub fn factor_covariance(cov: &[f64], k: usize) -> Result<(Vec<f64>, f64)> {
    if let Some(l) = linalg::cholesky(cov, k) {
        return Ok((l, 0.0));
    }
    let trace: f64 = (0..k).map(|i| cov[i * k + i]).sum();
    let mut jitter = if trace > 0.0 { 1e-6 * trace / k as f64 } else { 1e-6 };
    for _ in 0..12 {
        let mut a = cov.to_vec();
        for i in 0..k {
            a[i * k + i] += jitter;
        }
        if let Some(l) = linalg::cholesky(&a, k) {
            return Ok((l, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::InvalidArgument("covariance could not be factored".into()))
}

pub fn fit_class_gaussians<T: Scalar>(
    pca: &PcaModel<T>,
    data: &LabeledDataset<T>,
) -> Result<GaussianGenerativeModel<T>> {
    let k = pca.k();
    let counts = data.class_counts();
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InsufficientSamples(format!("class {c} has no examples")));
    }
    let z = pca.project(&data.flat_images())?;
    let mut per_class = Vec::with_capacity(data.num_classes);
    for c in 0..data.num_classes {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        let zc = z.select_rows(&idx);
        let (rows, n, _) = rows_f64(&zc);
        let (mean, cov) = linalg::mean_cov(&rows, n, k);
        let (l, jitter) = factor_covariance(&cov, k)?;
        per_class.push(ClassGaussian {
            mean: Tensor::new(vec![k], mean.into_iter().map(T::of).collect())?,
            cov_factor: Tensor::new(vec![k, k], l.into_iter().map(T::of).collect())?,
            jitter,
        });
    }
    Ok(GaussianGenerativeModel {
        pca: pca.clone(),
        per_class,
        image_shape: data.image_shape(),
    })
}

impl<T: Scalar> GaussianGenerativeModel<T> {
    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    fn class(&self, class: usize) -> Result<&ClassGaussian<T>> {
        self.per_class.get(class).ok_or(Error::LabelOutOfRange {
            label: class,
            classes: self.per_class.len(),
        })
    }

    /// `z = mean + L·ε` with `ε ~ N(0, I)`, as `[n, k]`.
    pub fn sample_latent(&self, class: usize, n: usize, rng: &mut seed::Rng) -> Result<Tensor<T>> {
        let g = self.class(class)?;
        let k = self.pca.k();
        let l = g.cov_factor.data();
        let mut out = Vec::with_capacity(n * k);
        let mut eps = vec![T::zero(); k];
        for _ in 0..n {
            for e in eps.iter_mut() {
                *e = seed::normal(rng);
            }
            for i in 0..k {
                let mut s = g.mean.data()[i];
                for j in 0..=i {
                    s += l[i * k + j] * eps[j];
                }
                out.push(s);
            }
        }
        Tensor::checked("sample", vec![n, k], out)
    }

    /// Maps latent rows back to images `[n, C, H, W]`, clipped to `[0, 1]`.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, h, w] = self.image_shape;
        let flat = self.pca.inverse(z)?;
        flat.clamp(T::zero(), T::one()).reshape(vec![z.rows(), c, h, w])
    }

    pub fn sample(&self, class: usize, n: usize, rng: &mut seed::Rng) -> Result<Tensor<T>> {
        let z = self.sample_latent(class, n, rng)?;
        self.decode(&z)
    }

    /// `n_per_class` samples of every class, labelled by the class they were
    /// drawn from; class `c` uses the stream `(seed, c)`.
    pub fn sample_balanced(&self, n_per_class: usize, seed_value: u64) -> Result<LabeledDataset<T>> {
        let mut parts = Vec::new();
        let mut labels = Vec::new();
        for c in 0..self.num_classes() {
            let mut rng = seed::stream(seed_value, &[c as u64]);
            parts.push(self.sample(c, n_per_class, &mut rng)?);
            labels.extend(std::iter::repeat_n(c, n_per_class));
        }
        let images = Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?;
        LabeledDataset::new(images, labels, self.num_classes())
    }
}

/// Images produced elsewhere, ingested from a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalSampleSet<T> {
    pub images: Tensor<T>,
    pub labels: Option<Vec<usize>>,
    pub provenance: String,
}

impl<T: Scalar> ExternalSampleSet<T> {
    pub fn new(images: Tensor<T>, labels: Option<Vec<usize>>, provenance: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape(
                "ExternalSampleSet",
                format!("expected [N,C,H,W], got {:?}", images.shape()),
            ));
        }
        images.check_unit_range()?;
        if let Some(l) = &labels {
            if l.len() != images.rows() {
                return Err(Error::shape(
                    "ExternalSampleSet",
                    format!("{} labels for {} images", l.len(), images.rows()),
                ));
            }
        }
        Ok(ExternalSampleSet {
            images,
            labels,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Labelled view for a consumer with `num_classes` outputs.
    pub fn to_dataset(&self, num_classes: usize) -> Result<LabeledDataset<T>> {
        let labels = self
            .labels
            .clone()
            .ok_or_else(|| Error::InvalidArgument("sample set carries no labels".into()))?;
        LabeledDataset::new(self.images.clone(), labels, num_classes)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.push_tensor("images", &self.images)?;
        if let Some(l) = &self.labels {
            c.push_labels("labels", l)?;
        }
        c.push_meta("provenance", &self.provenance)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let images = c.tensor("images")?;
        let labels = if c.get("labels").is_some() {
            Some(c.labels("labels")?)
        } else {
            None
        };
        let provenance = c.meta("provenance").unwrap_or_default();
        ExternalSampleSet::new(images, labels, provenance)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }
}

pub fn load_external_samples<T: Scalar>(path: &Path) -> Result<ExternalSampleSet<T>> {
    ExternalSampleSet::from_container(&Container::load(path)?)
}
