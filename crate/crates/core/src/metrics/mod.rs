//! Image-quality metrics: MAE, PSNR, single-scale SSIM with a Gaussian
//! window, classification accuracy, and (in the submodules) FID plus the
//! feature extractors feeding it.
//!
//! SSIM follows the standard construction: 11x11 Gaussian window with
//! sigma 1.5, valid-region filtering, constants `C1 = (0.01 L)^2` and
//! `C2 = (0.03 L)^2`, the channel mean of per-channel map means. Throughout
//! the crate these metrics are evaluated on the normalized `[0, 1]`
//! reflectance domain with `data_range = 1`.

pub mod features;
pub mod fid;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub use features::{load_features, save_features, FeatureExtractor};
pub use fid::{fid, frechet_distance};

#[derive(Debug, Clone, Copy)]
pub struct MetricConfig {
    pub window: usize,
    pub sigma: f64,
    pub data_range: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            window: 11,
            sigma: 1.5,
            data_range: 1.0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::Config(format!("SSIM window {} must be odd", self.window)));
        }
        if self.data_range <= 0.0 || self.sigma <= 0.0 {
            return Err(Error::Config("data_range and sigma must be positive".into()));
        }
        Ok(())
    }
}

fn check_shapes(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean absolute elementwise difference.
pub fn mae(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.len() as f64;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// Peak signal-to-noise ratio in dB; identical inputs (zero MSE) yield the
/// `+inf` sentinel.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>, data_range: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if data_range <= 0.0 {
        return Err(Error::Config("data_range must be positive".into()));
    }
    let n = a.len() as f64;
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Fraction of exact matches between predicted and true class indices.
pub fn accuracy(pred: &[u32], truth: &[u32]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "prediction count {} vs truth count {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Config("accuracy of an empty set".into()));
    }
    let hits = pred.iter().zip(truth.iter()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

fn gaussian_window(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as f64;
    let mut w: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-region Gaussian filtering of one channel.
fn filter_valid(img: &Array2<f64>, w: &[f64]) -> Array2<f64> {
    let (h, wid) = img.dim();
    let k = w.len();
    let mut horiz = Array2::<f64>::zeros((h, wid - k + 1));
    for y in 0..h {
        for x in 0..wid - k + 1 {
            let mut acc = 0.0;
            for (i, &wv) in w.iter().enumerate() {
                acc += wv * img[[y, x + i]];
            }
            horiz[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - k + 1, wid - k + 1));
    for y in 0..h - k + 1 {
        for x in 0..wid - k + 1 {
            let mut acc = 0.0;
            for (i, &wv) in w.iter().enumerate() {
                acc += wv * horiz[[y + i, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Structural similarity in `[-1, 1]`.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    check_shapes(a, b)?;
    let (c, h, w) = a.dim();
    if h < cfg.window || w < cfg.window {
        return Err(Error::Shape(format!(
            "grid {h}x{w} smaller than SSIM window {}",
            cfg.window
        )));
    }
    let win = gaussian_window(cfg.window, cfg.sigma);
    let c1 = (0.01 * cfg.data_range).powi(2);
    let c2 = (0.03 * cfg.data_range).powi(2);
    let mut channel_sum = 0.0;
    for ch in 0..c {
        let xa = a.index_axis(ndarray::Axis(0), ch).to_owned();
        let xb = b.index_axis(ndarray::Axis(0), ch).to_owned();
        let mu_a = filter_valid(&xa, &win);
        let mu_b = filter_valid(&xb, &win);
        let aa = filter_valid(&xa.mapv(|v| v * v), &win);
        let bb = filter_valid(&xb.mapv(|v| v * v), &win);
        let ab = filter_valid(&(&xa * &xb), &win);
        let mut map_sum = 0.0;
        let (oh, ow) = mu_a.dim();
        for y in 0..oh {
            for x in 0..ow {
                let (ma, mb) = (mu_a[[y, x]], mu_b[[y, x]]);
                let va = aa[[y, x]] - ma * ma;
                let vb = bb[[y, x]] - mb * mb;
                let cov = ab[[y, x]] - ma * mb;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                map_sum += num / den;
            }
        }
        channel_sum += map_sum / (oh * ow) as f64;
    }
    Ok(channel_sum / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sar2rgb_nn::rng;

    fn rand_img(seed: u64, c: usize, s: usize) -> Array3<f64> {
        let mut r = rng::seeded(seed);
        Array3::from_shape_fn((c, s, s), |_| rand::Rng::random_range(&mut r, 0.0..1.0))
    }

    #[test]
    fn mae_cases() {
        let a = rand_img(1, 3, 4);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        let b = a.mapv(|v| v + 0.1);
        assert!((mae(&a, &b).unwrap() - 0.1).abs() < 1e-12);

        // scalar-loop reference on a random pair
        let c = rand_img(2, 1, 4);
        let d = rand_img(3, 1, 4);
        let mut total = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                total += (c[[0, y, x]] - d[[0, y, x]]).abs();
            }
        }
        assert!((mae(&c, &d).unwrap() - total / 16.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_analytic_cases() {
        // craft a pair with known MSE
        let a = Array3::from_elem((1, 2, 2), 0.0);
        let b = Array3::from_elem((1, 2, 2), 0.1); // mse 0.01
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
        let c = Array3::from_elem((1, 2, 2), 0.01); // mse 1e-4
        assert!((psnr(&a, &c, 1.0).unwrap() - 40.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_strictly_decreasing_in_mse() {
        let a = Array3::from_elem((1, 2, 2), 0.0);
        let mut last = f64::INFINITY;
        for k in 1..=10 {
            let b = Array3::from_elem((1, 2, 2), 0.05 * k as f64);
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn mae_and_mse_order_differently() {
        // same MAE, different MSE: PSNR ranks by squared error
        let base = Array3::from_elem((1, 1, 4), 0.0);
        let spread = Array3::from_shape_vec((1, 1, 4), vec![0.4, 0.0, 0.0, 0.0]).unwrap();
        let even = Array3::from_elem((1, 1, 4), 0.1);
        assert!((mae(&base, &spread).unwrap() - mae(&base, &even).unwrap()).abs() < 1e-12);
        assert!(psnr(&base, &spread, 1.0).unwrap() < psnr(&base, &even, 1.0).unwrap());
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 0], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn ssim_self_is_one() {
        let a = rand_img(4, 3, 16);
        let s = ssim(&a, &a, &MetricConfig::default()).unwrap();
        assert!((s - 1.0).abs() <= 1e-6, "ssim(x,x) = {s}");
    }

    #[test]
    fn ssim_anticorrelated_checkerboard_is_negative() {
        let mut a = Array3::<f64>::zeros((1, 16, 16));
        for y in 0..16 {
            for x in 0..16 {
                a[[0, y, x]] = ((x + y) % 2) as f64;
            }
        }
        let b = a.mapv(|v| 1.0 - v);
        let s = ssim(&a, &b, &MetricConfig::default()).unwrap();
        assert!(s < 0.0, "expected negative ssim, got {s}");
    }

    #[test]
    fn ssim_matches_direct_reference() {
        // direct (non-separable) per-window reference with explicit loops
        let cfg = MetricConfig::default();
        let a = rand_img(5, 1, 16);
        let b = rand_img(6, 1, 16);
        let fast = ssim(&a, &b, &cfg).unwrap();

        let w1 = gaussian_window(cfg.window, cfg.sigma);
        let k = cfg.window;
        let c1 = (0.01 * cfg.data_range).powi(2);
        let c2 = (0.03 * cfg.data_range).powi(2);
        let mut total = 0.0;
        let mut count = 0usize;
        for y0 in 0..=(16 - k) {
            for x0 in 0..=(16 - k) {
                let (mut ma, mut mb) = (0.0, 0.0);
                for u in 0..k {
                    for v in 0..k {
                        let wgt = w1[u] * w1[v];
                        ma += wgt * a[[0, y0 + u, x0 + v]];
                        mb += wgt * b[[0, y0 + u, x0 + v]];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for u in 0..k {
                    for v in 0..k {
                        let wgt = w1[u] * w1[v];
                        va += wgt * a[[0, y0 + u, x0 + v]].powi(2);
                        vb += wgt * b[[0, y0 + u, x0 + v]].powi(2);
                        cov += wgt * a[[0, y0 + u, x0 + v]] * b[[0, y0 + u, x0 + v]];
                    }
                }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        let reference = total / count as f64;
        assert!(
            (fast - reference).abs() <= 1e-9,
            "{fast} vs reference {reference}"
        );
    }

    #[test]
    fn ssim_symmetric_and_rescale_invariant() {
        let a = rand_img(7, 2, 16);
        let b = rand_img(8, 2, 16);
        let cfg = MetricConfig::default();
        let s1 = ssim(&a, &b, &cfg).unwrap();
        let s2 = ssim(&b, &a, &cfg).unwrap();
        assert!((s1 - s2).abs() <= 1e-9);

        // simultaneous affine rescale with matching data_range
        let a2 = a.mapv(|v| 3.0 * v);
        let b2 = b.mapv(|v| 3.0 * v);
        let cfg2 = MetricConfig {
            data_range: 3.0,
            ..cfg
        };
        let s3 = ssim(&a2, &b2, &cfg2).unwrap();
        assert!((s1 - s3).abs() <= 1e-9, "{s1} vs {s3}");
    }

    #[test]
    fn ssim_rejects_small_grids() {
        let a = rand_img(9, 1, 8);
        assert!(ssim(&a, &a, &MetricConfig::default()).is_err());
    }
}
