//! Feature extraction for FID. The canonical pretrained extractor is out of
//! desk scope, so FID values here are comparable only within one extractor;
//! every report carries the extractor id.
//!
//! Feature file format: `u32 n`, `u32 d` header, then `n*d` little-endian
//! f32 values, row-major.

use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, Array4, Axis};

use sar2rgb_nn::conv::ConvSpec;
use sar2rgb_nn::{params, rng, ParamStore, Tape};

use crate::error::{Error, Result};
use crate::imagery::StandardizedImage;

const RESIZE_TO: usize = 32;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureExtractor {
    /// Fixed-seed Gaussian projection of bilinearly resized 32x32 images.
    RandomProjection { seed: u64, dim: usize },
    /// Small frozen random-weight convolutional descriptor.
    ConvDescriptor { seed: u64, dim: usize },
    /// Pre-computed features from an external file; images are not consumed.
    FeatureFile { path: PathBuf },
}

impl FeatureExtractor {
    pub fn id(&self) -> String {
        match self {
            FeatureExtractor::RandomProjection { seed, dim } => format!("randproj-s{seed}-d{dim}"),
            FeatureExtractor::ConvDescriptor { seed, dim } => format!("convrand-s{seed}-d{dim}"),
            FeatureExtractor::FeatureFile { path } => format!("file:{}", path.display()),
        }
    }

    /// Deterministic `[n, d]` features for a batch of standardized images.
    pub fn extract(&self, images: &[StandardizedImage]) -> Result<Array2<f64>> {
        match self {
            FeatureExtractor::RandomProjection { seed, dim } => {
                extract_random_projection(images, *seed, *dim)
            }
            FeatureExtractor::ConvDescriptor { seed, dim } => {
                extract_conv_descriptor(images, *seed, *dim)
            }
            FeatureExtractor::FeatureFile { .. } => Err(Error::Config(
                "feature-file extractor supplies features directly; load them with load_features"
                    .into(),
            )),
        }
    }
}

/// Bilinear resize of a `[3, h, w]` grid to `[3, 32, 32]`.
fn resize_bilinear(img: &Array3<f64>) -> Result<Array3<f64>> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("extractor expects 3 channels, got {c}")));
    }
    let mut out = Array3::<f64>::zeros((3, RESIZE_TO, RESIZE_TO));
    let sy = h as f64 / RESIZE_TO as f64;
    let sx = w as f64 / RESIZE_TO as f64;
    for ch in 0..3 {
        for oy in 0..RESIZE_TO {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let dy = fy - y0 as f64;
            for ox in 0..RESIZE_TO {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let dx = fx - x0 as f64;
                out[[ch, oy, ox]] = img[[ch, y0, x0]] * (1.0 - dy) * (1.0 - dx)
                    + img[[ch, y0, x1]] * (1.0 - dy) * dx
                    + img[[ch, y1, x0]] * dy * (1.0 - dx)
                    + img[[ch, y1, x1]] * dy * dx;
            }
        }
    }
    Ok(out)
}

fn extract_random_projection(
    images: &[StandardizedImage],
    seed: u64,
    dim: usize,
) -> Result<Array2<f64>> {
    let flat = 3 * RESIZE_TO * RESIZE_TO;
    let mut r = rng::derive(seed, 0xF1D0);
    let scale = 1.0 / (flat as f64).sqrt();
    let proj = rng::standard_normal(&mut r, &[flat, dim]).mapv(|v| v * scale);
    let proj = proj.into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut out = Array2::<f64>::zeros((images.len(), dim));
    for (i, img) in images.iter().enumerate() {
        let small = resize_bilinear(&img.data)?;
        let v = Array2::from_shape_vec((1, flat), small.iter().cloned().collect()).unwrap();
        out.row_mut(i).assign(&v.dot(&proj).row(0));
    }
    Ok(out)
}

fn extract_conv_descriptor(
    images: &[StandardizedImage],
    seed: u64,
    dim: usize,
) -> Result<Array2<f64>> {
    let mut r = rng::derive(seed, 0xF1D1);
    let mut store = ParamStore::new();
    let w1 = store.add("w1", params::kaiming_conv(&mut r, &[16, 3, 3, 3]));
    let b1 = store.add("b1", params::zeros(&[16]));
    let w2 = store.add("w2", params::kaiming_conv(&mut r, &[32, 16, 3, 3]));
    let b2 = store.add("b2", params::zeros(&[32]));
    let proj = rng::standard_normal(&mut r, &[32, dim]).mapv(|v| v / (32f64).sqrt());
    let proj = proj.into_dimensionality::<ndarray::Ix2>().unwrap();

    let mut out = Array2::<f64>::zeros((images.len(), dim));
    for (i, img) in images.iter().enumerate() {
        let small = resize_bilinear(&img.data)?;
        let mut x = Array4::<f64>::zeros((1, 3, RESIZE_TO, RESIZE_TO));
        x.index_axis_mut(Axis(0), 0).assign(&small);
        let mut tape = Tape::new();
        let xn = tape.constant(x.into_dyn());
        let w1n = tape.param(&store, w1);
        let b1n = tape.param(&store, b1);
        let h = tape.conv2d(xn, w1n, b1n, ConvSpec { stride: 2, pad: 1 });
        let h = tape.gelu(h);
        let w2n = tape.param(&store, w2);
        let b2n = tape.param(&store, b2);
        let h = tape.conv2d(h, w2n, b2n, ConvSpec { stride: 2, pad: 1 });
        let h = tape.gelu(h);
        let pooled = tape.global_avg_pool(h);
        let feat = tape
            .value(pooled)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        out.row_mut(i).assign(&feat.dot(&proj).row(0));
    }
    Ok(out)
}

pub fn save_features(path: &Path, features: &Array2<f64>) -> Result<()> {
    let (n, d) = features.dim();
    let mut buf = Vec::with_capacity(8 + 4 * n * d);
    buf.write_u32::<LittleEndian>(n as u32).unwrap();
    buf.write_u32::<LittleEndian>(d as u32).unwrap();
    for &v in features.iter() {
        buf.write_f32::<LittleEndian>(v as f32).unwrap();
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<Array2<f64>> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor::new(data);
    let n = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    let d = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    let mut out = Array2::<f64>::zeros((n, d));
    for v in out.iter_mut() {
        *v = r.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))? as f64;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, "trailing bytes"),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imgs(count: usize, seed: u64) -> Vec<StandardizedImage> {
        (0..count)
            .map(|i| {
                let mut r = rng::seeded(seed + i as u64);
                StandardizedImage {
                    data: Array3::from_shape_fn((3, 32, 32), |_| {
                        rand::Rng::random_range(&mut r, -1.0..1.0)
                    }),
                }
            })
            .collect()
    }

    #[test]
    fn random_projection_deterministic_with_dim() {
        let ex = FeatureExtractor::RandomProjection { seed: 42, dim: 64 };
        let set = imgs(3, 0);
        let a = ex.extract(&set).unwrap();
        let b = ex.extract(&set).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (3, 64));
        assert_eq!(ex.id(), "randproj-s42-d64");
    }

    #[test]
    fn permuting_images_permutes_rows() {
        let ex = FeatureExtractor::RandomProjection { seed: 7, dim: 16 };
        let set = imgs(4, 10);
        let feats = ex.extract(&set).unwrap();
        let permuted: Vec<StandardizedImage> =
            [2usize, 0, 3, 1].iter().map(|&i| set[i].clone()).collect();
        let feats_p = ex.extract(&permuted).unwrap();
        for (new_row, &old_idx) in [2usize, 0, 3, 1].iter().enumerate() {
            assert_eq!(feats_p.row(new_row), feats.row(old_idx));
        }
    }

    #[test]
    fn conv_descriptor_deterministic() {
        let ex = FeatureExtractor::ConvDescriptor { seed: 3, dim: 24 };
        let set = imgs(2, 20);
        let a = ex.extract(&set).unwrap();
        let b = ex.extract(&set).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (2, 24));
    }

    #[test]
    fn feature_file_roundtrip_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.bin");
        let ex = FeatureExtractor::RandomProjection { seed: 1, dim: 8 };
        let feats = ex.extract(&imgs(5, 30)).unwrap();
        save_features(&path, &feats).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(back.dim(), feats.dim());
        for (a, b) in feats.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let ex_file = FeatureExtractor::FeatureFile { path };
        assert!(ex_file.extract(&imgs(1, 1)).is_err());
    }

    #[test]
    fn resize_is_identity_at_native_size() {
        let set = imgs(1, 40);
        let resized = resize_bilinear(&set[0].data).unwrap();
        assert_eq!(resized, set[0].data);
    }
}
