//! Dense symmetric linear algebra in double precision.
//!
//! Matrices are row-major `n×n` slices.

use crate::error::{Error, Result};

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
///
/// `vectors` is row-major `n×n` with eigenvectors in columns. Each column is
/// signed so that its largest-magnitude entry is positive (lowest index on ties).
#[derive(Clone, Debug, PartialEq)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
    pub n: usize,
}

impl SymEigen {
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.vectors[i * self.n + j]).collect()
    }
}

/// Cyclic Jacobi eigendecomposition.
pub fn sym_eigen(a: &[f64], n: usize) -> Result<SymEigen> {
    if a.len() != n * n {
        return Err(Error::shape("sym_eigen", format!("{} entries for {n}x{n}", a.len())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sym_eigen input"));
    }
    let mut m: Vec<f64> = a.to_vec();
    // symmetrize so that rounding asymmetry in the caller cannot leak in
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[b * n + b].partial_cmp(&m[a * n + a]).unwrap().then(a.cmp(&b)));
    let values: Vec<f64> = order.iter().map(|&j| m[j * n + j]).collect();
    let mut vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for i in 0..n {
            if v[i * n + src].abs() > v[pivot * n + src].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot * n + src] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[i * n + dst] = sign * v[i * n + src];
        }
    }
    Ok(SymEigen { values, vectors, n })
}

/// Lower-triangular `L` with `L·Lᵀ = a`, or `None` when `a` is not
/// numerically positive definite.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let max_diag = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let floor = 1e-12 * max_diag;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > floor) {
            return None;
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Some(l)
}

/// Column mean and unbiased covariance of `rows` (`count×d`).
///
/// A single row yields a zero covariance.
pub fn mean_cov(rows: &[f64], count: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for r in rows.chunks(d.max(1)).take(count) {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= count.max(1) as f64;
    }
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for r in rows.chunks(d.max(1)).take(count) {
        for k in 0..d {
            centered[k] = r[k] - mean[k];
        }
        for i in 0..d {
            let ci = centered[i];
            let row = &mut cov[i * d..(i + 1) * d];
            for (c, &cj) in row.iter_mut().zip(&centered) {
                *c += ci * cj;
            }
        }
    }
    let denom = count.saturating_sub(1).max(1) as f64;
    for c in &mut cov {
        *c /= denom;
    }
    (mean, cov)
}

/// `c = a · b` for `n×n` matrices.
pub fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// Square root of a symmetric PSD matrix via its eigendecomposition.
///
/// Eigenvalues in `[-tol, 0)` are clamped to zero; anything more negative is an error.
pub fn sqrt_psd(a: &[f64], n: usize, tol: f64) -> Result<Vec<f64>> {
    let e = sym_eigen(a, n)?;
    let mut out = vec![0.0; n * n];
    for (j, &lam) in e.values.iter().enumerate() {
        if lam < -tol {
            return Err(Error::InvalidArgument(format!(
                "matrix is not positive semidefinite (eigenvalue {lam:e})"
            )));
        }
        let s = lam.max(0.0).sqrt();
        for r in 0..n {
            let vr = e.vectors[r * n + j] * s;
            for c in 0..n {
                out[r * n + c] += vr * e.vectors[c * n + j];
            }
        }
    }
    Ok(out)
}

/// `trace((A·B)^{1/2})` for symmetric PSD `A`, `B`, through the symmetric
/// product `A^{1/2}·B·A^{1/2}`, which shares its spectrum with `A·B`.
pub fn trace_sqrt_product(a: &[f64], b: &[f64], n: usize, tol: f64) -> Result<f64> {
    let ra = sqrt_psd(a, n, tol)?;
    let m = matmul_sq(&matmul_sq(&ra, b, n), &ra, n);
    let e = sym_eigen(&m, n)?;
    let mut tr = 0.0;
    for &lam in &e.values {
        if lam < -tol {
            return Err(Error::InvalidArgument(format!(
                "product of covariances has eigenvalue {lam:e}"
            )));
        }
        tr += lam.max(0.0).sqrt();
    }
    Ok(tr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_spd(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::seed::rng(seed);
        let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum::<f64>();
            }
            a[i * n + i] += 0.1;
        }
        a
    }

    #[test]
    fn eigen_reconstructs_and_is_orthonormal() {
        let n = 6;
        let a = random_spd(n, 3);
        let e = sym_eigen(&a, n).unwrap();
        for w in e.values.windows(2) {
            assert!(w[0] >= w[1]);
        }
        for i in 0..n {
            for j in 0..n {
                let rec: f64 = (0..n)
                    .map(|k| e.vectors[i * n + k] * e.values[k] * e.vectors[j * n + k])
                    .sum();
                assert!((rec - a[i * n + j]).abs() < 1e-10);
                let dot: f64 = (0..n).map(|k| e.vectors[k * n + i] * e.vectors[k * n + j]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
        for j in 0..n {
            let col = e.column(j);
            let big = col
                .iter()
                .cloned()
                .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn cholesky_factor_and_failure() {
        let n = 5;
        let a = random_spd(n, 9);
        let l = cholesky(&a, n).unwrap();
        for i in 0..n {
            for j in 0..n {
                if j > i {
                    assert_eq!(l[i * n + j], 0.0);
                }
                let s: f64 = (0..n).map(|k| l[i * n + k] * l[j * n + k]).sum();
                assert!((s - a[i * n + j]).abs() < 1e-10);
            }
        }
        assert!(cholesky(&[1.0, 1.0, 1.0, 1.0], 2).is_none());
        assert!(cholesky(&[0.0], 1).is_none());
    }

    #[test]
    fn sqrt_psd_squares_back() {
        let n = 4;
        let a = random_spd(n, 1);
        let r = sqrt_psd(&a, n, 1e-8).unwrap();
        let back = matmul_sq(&r, &r, n);
        for (x, y) in back.iter().zip(&a) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(sqrt_psd(&[-1.0], 1, 1e-8).is_err());
    }

    #[test]
    fn trace_sqrt_of_commuting_diagonals() {
        let a = [4.0, 0.0, 0.0, 9.0];
        let b = [1.0, 0.0, 0.0, 4.0];
        let t = trace_sqrt_product(&a, &b, 2, 1e-8).unwrap();
        assert!((t - (2.0 + 6.0)).abs() < 1e-12);
    }

    #[test]
    fn mean_cov_matches_hand_values() {
        let rows = [1.0, 2.0, 3.0, 6.0];
        let (m, c) = mean_cov(&rows, 2, 2);
        assert_eq!(m, vec![2.0, 4.0]);
        assert_eq!(c, vec![2.0, 4.0, 4.0, 8.0]);
        let (_, c1) = mean_cov(&[5.0, 5.0], 1, 2);
        assert_eq!(c1, vec![0.0; 4]);
    }
}
