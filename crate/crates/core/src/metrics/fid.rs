//! Frechet distance between Gaussian fits of two feature sets, with the
//! matrix square root taken by eigendecomposition of the symmetrized product
//! (small negative eigenvalues clipped at zero). Covariances use the
//! unbiased (N-1) estimator.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

fn sample_moments(x: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = x.nrows();
    let d = x.ncols();
    let mean = x.mean_axis(Axis(0)).unwrap();
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in x.rows() {
        let centered: Vec<f64> = row.iter().zip(mean.iter()).map(|(a, m)| a - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += centered[i] * centered[j];
            }
        }
    }
    cov.mapv_inplace(|v| v / (n - 1) as f64);
    (mean, cov)
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Symmetric PSD square root via eigendecomposition, clipping negative
/// eigenvalues at zero.
fn sqrtm_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Frechet distance between two Gaussians given exact moments:
/// `|mu_a - mu_b|^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^{1/2})`.
pub fn frechet_distance(
    mu_a: &Array1<f64>,
    cov_a: &Array2<f64>,
    mu_b: &Array1<f64>,
    cov_b: &Array2<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.dim() != (d, d) || cov_b.dim() != (d, d) {
        return Err(Error::Shape("moment dimensions disagree".into()));
    }
    let ca = to_dmatrix(cov_a);
    let cb = to_dmatrix(cov_b);
    // tr((ca cb)^{1/2}) computed on the similar SPD matrix sa cb sa
    let sa = sqrtm_psd(&ca);
    let inner = &sa * &cb * &sa;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum();
    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let fid = mean_term + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(fid.max(0.0))
}

/// FID of two feature matrices `[n, d]` / `[m, d]`. `eps` is added to the
/// covariance diagonals for rank safety.
pub fn fid(features_a: &Array2<f64>, features_b: &Array2<f64>, eps: f64) -> Result<f64> {
    let d = features_a.ncols();
    if features_b.ncols() != d {
        return Err(Error::Shape(format!(
            "feature dims {d} vs {}",
            features_b.ncols()
        )));
    }
    if features_a.nrows() < 2 || features_b.nrows() < 2 {
        return Err(Error::Config(
            "FID needs at least 2 samples on each side".into(),
        ));
    }
    let (mu_a, mut cov_a) = sample_moments(features_a);
    let (mu_b, mut cov_b) = sample_moments(features_b);
    for i in 0..d {
        cov_a[[i, i]] += eps;
        cov_b[[i, i]] += eps;
    }
    frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sar2rgb_nn::rng;

    fn gaussian_sample(seed: u64, n: usize, d: usize, shift: f64) -> Array2<f64> {
        let mut r = rng::seeded(seed);
        let mut x = Array2::<f64>::zeros((n, d));
        for row in 0..n {
            for col in 0..d {
                let v: f64 = rand::Rng::sample(&mut r, rand_distr::StandardNormal);
                x[[row, col]] = v + if col == 0 { shift } else { 0.0 };
            }
        }
        x
    }

    #[test]
    fn identical_sets_give_zero() {
        let a = gaussian_sample(1, 500, 8, 0.0);
        let f = fid(&a, &a, 0.0).unwrap();
        assert!(f <= 1e-6, "fid(A,A) = {f}");
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let a = gaussian_sample(2, 400, 6, 0.0);
        let b = gaussian_sample(3, 350, 6, 0.3);
        let f1 = fid(&a, &b, 0.0).unwrap();
        let f2 = fid(&b, &a, 0.0).unwrap();
        assert!(f1 >= 0.0);
        assert!((f1 - f2).abs() <= 1e-6, "{f1} vs {f2}");
    }

    #[test]
    fn exact_moments_closed_form() {
        // cov_a = 4I, cov_b = I, equal means: per-dim (2 - 1)^2 = 1, total d
        let d = 5;
        let mu = Array1::<f64>::zeros(d);
        let cov_a = Array2::<f64>::eye(d) * 4.0;
        let cov_b = Array2::<f64>::eye(d);
        let f = frechet_distance(&mu, &cov_a, &mu, &cov_b).unwrap();
        assert!((f - d as f64).abs() < 1e-10, "{f}");
    }

    #[test]
    fn gaussian_mean_shift_check() {
        // N(0, I_4) vs N((1,0,0,0), I_4): FID = |mu|^2 = 1, to 2% at 1e5 draws
        let a = gaussian_sample(4, 100_000, 4, 0.0);
        let b = gaussian_sample(5, 100_000, 4, 1.0);
        let f = fid(&a, &b, 0.0).unwrap();
        assert!((f - 1.0).abs() < 0.02, "fid = {f}");
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = gaussian_sample(6, 10, 3, 0.0);
        let b = gaussian_sample(7, 10, 4, 0.0);
        assert!(fid(&a, &b, 0.0).is_err());
        let c = gaussian_sample(8, 1, 3, 0.0);
        assert!(fid(&a, &c, 0.0).is_err());
    }
}
