//! Data preparation for paired SAR/RGB imagery.
//!
//! SAR comes in as a single dB-valued grid (the VV channel), RGB as
//! reflectance counts. Both are clipped, normalized and mapped into the
//! symmetric `[-1, 1]` domain the codec expects; SAR is replicated to three
//! identical channels. The module also owns the dataset manifest format, the
//! land-cover label mapping and a seeded synthetic-scene generator used for
//! desk-scale training and tests.

pub mod manifest;
pub mod raster;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub use manifest::{load_manifest, Manifest, ManifestEntry, Split};

/// SAR clip range in dB.
pub const SAR_CLIP: (f64, f64) = (-25.0, 0.0);
/// RGB clip range in reflectance counts.
pub const RGB_CLIP: (f64, f64) = (0.0, 10000.0);

/// A co-registered SAR/RGB pair in raw units (dB / reflectance counts).
#[derive(Debug, Clone)]
pub struct RawPair {
    pub id: String,
    /// `[h, w]` backscatter in dB.
    pub sar: Array2<f64>,
    /// `[3, h, w]` non-negative reflectance counts.
    pub rgb: Array3<f64>,
    pub class_label: Option<u32>,
    /// Optional cloud-contaminated RGB for the cloud-removal benchmark.
    pub cloudy_rgb: Option<Array3<f64>>,
}

impl RawPair {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.sar.dim();
        let (c, rh, rw) = self.rgb.dim();
        if c != 3 || rh != h || rw != w {
            return Err(Error::Shape(format!(
                "pair {}: sar {h}x{w} vs rgb {c}x{rh}x{rw}",
                self.id
            )));
        }
        if let Some(cl) = &self.cloudy_rgb {
            if cl.dim() != self.rgb.dim() {
                return Err(Error::Shape(format!(
                    "pair {}: cloudy rgb {:?} vs rgb {:?}",
                    self.id,
                    cl.dim(),
                    self.rgb.dim()
                )));
            }
        }
        Ok(())
    }
}

/// A `[c, h, w]` grid standardized into `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedImage {
    pub data: Array3<f64>,
}

impl StandardizedImage {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// Clip SAR dB values to `[-25, 0]`, map to `[0, 1]` via `(v + 25) / 25`,
/// standardize to `[-1, 1]` and replicate across three channels.
pub fn preprocess_sar(raw: &Array2<f64>) -> Result<StandardizedImage> {
    for ((y, x), &v) in raw.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                location: format!("sar[{y},{x}]"),
            });
        }
    }
    let (h, w) = raw.dim();
    let mut data = Array3::<f64>::zeros((3, h, w));
    for ((y, x), &v) in raw.indexed_iter() {
        let clipped = v.clamp(SAR_CLIP.0, SAR_CLIP.1);
        let unit = (clipped - SAR_CLIP.0) / (SAR_CLIP.1 - SAR_CLIP.0);
        let std = (unit - 0.5) / 0.5;
        for c in 0..3 {
            data[[c, y, x]] = std;
        }
    }
    Ok(StandardizedImage { data })
}

/// Clip RGB counts to `[0, 10000]`, divide by 10000 and standardize to
/// `[-1, 1]`. Negative inputs are rejected rather than clipped.
pub fn preprocess_rgb(raw: &Array3<f64>) -> Result<StandardizedImage> {
    for ((c, y, x), &v) in raw.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                location: format!("rgb[{c},{y},{x}]"),
            });
        }
        if v < 0.0 {
            return Err(Error::Negative {
                value: v,
                location: format!("rgb[{c},{y},{x}]"),
            });
        }
    }
    let data = raw.mapv(|v| {
        let unit = v.clamp(RGB_CLIP.0, RGB_CLIP.1) / RGB_CLIP.1;
        (unit - 0.5) / 0.5
    });
    Ok(StandardizedImage { data })
}

/// Right-inverse of [`preprocess_rgb`] on the clipped range: values are
/// clamped to `[-1, 1]` and mapped back to whole reflectance counts.
pub fn inverse_preprocess_rgb(img: &StandardizedImage) -> Array3<f64> {
    img.data
        .mapv(|v| (RGB_CLIP.1 * (v.clamp(-1.0, 1.0) * 0.5 + 0.5)).round())
}

// ---------------------------------------------------------------------------
// Label mapping
// ---------------------------------------------------------------------------

/// Total mapping from source land-cover codes to a simplified class system
/// with contiguous indices starting at 0.
#[derive(Debug, Clone)]
pub struct LabelMap {
    entries: BTreeMap<u32, u32>,
    class_count: usize,
}

impl LabelMap {
    pub fn new(entries: BTreeMap<u32, u32>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("label map has no entries".into()));
        }
        let max = *entries.values().max().unwrap() as usize;
        for idx in 0..=max {
            if !entries.values().any(|&v| v as usize == idx) {
                return Err(Error::Config(format!(
                    "label map indices not contiguous: missing {idx}"
                )));
            }
        }
        Ok(LabelMap {
            entries,
            class_count: max + 1,
        })
    }

    /// Default IGBP (17 classes) to simplified (10 classes) mapping.
    pub fn igbp_simplified() -> Self {
        let pairs: [(u32, u32); 17] = [
            (1, 0), // evergreen needleleaf -> forest
            (2, 0),
            (3, 0),
            (4, 0),
            (5, 0),
            (6, 1), // closed shrublands -> shrubland
            (7, 1),
            (8, 2), // woody savannas -> savanna
            (9, 2),
            (10, 3), // grasslands -> grassland
            (11, 4), // permanent wetlands -> wetlands
            (12, 5), // croplands -> croplands
            (14, 5),
            (13, 6), // urban and built-up -> urban
            (15, 7), // snow and ice -> snow/ice
            (16, 8), // barren -> barren
            (17, 9), // water bodies -> water
        ];
        LabelMap::new(pairs.into_iter().collect()).expect("builtin map is valid")
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn codes(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }

    pub fn map(&self, code: u32) -> Result<u32> {
        self.entries
            .get(&code)
            .copied()
            .ok_or(Error::UnknownCode { code })
    }
}

/// Simplified-index lookup; see [`LabelMap::map`].
pub fn map_label(code: u32, map: &LabelMap) -> Result<u32> {
    map.map(code)
}

// ---------------------------------------------------------------------------
// Synthetic paired scenes
// ---------------------------------------------------------------------------

/// Appearance of one synthetic land-cover class in both modalities.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ClassAppearance {
    /// Reflectance counts per channel, within `[0, 28000]`.
    pub rgb: [f64; 3],
    /// Backscatter level in dB, within `[-50, 5]`.
    pub sar_db: f64,
}

/// Seeded specification of a synthetic paired scene. `noise_sigma` is in
/// normalized units: it scales to `sigma * 10000` counts on RGB and
/// `sigma * 25` dB on SAR so one knob perturbs both modalities comparably.
#[derive(Debug, Clone)]
pub struct SyntheticSceneSpec {
    pub size: usize,
    pub region_count: usize,
    pub class_palette: Vec<ClassAppearance>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    fn validate(&self) -> Result<()> {
        if !self.size.is_power_of_two() || self.size < 32 {
            return Err(Error::Config(format!(
                "synthetic scene size must be a power of two >= 32, got {}",
                self.size
            )));
        }
        if self.region_count == 0 {
            return Err(Error::Config("region_count must be >= 1".into()));
        }
        if self.region_count > self.class_palette.len() {
            return Err(Error::Config(format!(
                "region_count {} exceeds palette size {}",
                self.region_count,
                self.class_palette.len()
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        for (i, cls) in self.class_palette.iter().enumerate() {
            for (c, &v) in cls.rgb.iter().enumerate() {
                if !(0.0..=28000.0).contains(&v) {
                    return Err(Error::Config(format!(
                        "palette class {i} rgb[{c}] = {v} outside [0, 28000]"
                    )));
                }
            }
            if !(-50.0..=5.0).contains(&cls.sar_db) {
                return Err(Error::Config(format!(
                    "palette class {i} sar_db = {} outside [-50, 5]",
                    cls.sar_db
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel class indices of a generated scene plus the modal class.
pub struct SyntheticScene {
    pub pair: RawPair,
    pub region_map: Array2<u32>,
}

/// Generate a piecewise-constant Voronoi scene. The SAR level of each pixel
/// is the backscatter of its class, so SAR predicts class (and hence RGB) up
/// to noise. Pure function of the spec, including the seed.
pub fn generate_synthetic_scene(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let s = spec.size;
    let mut rng = sar2rgb_nn::rng::seeded(spec.seed);

    // Voronoi cell centers, then one distinct palette class per region.
    let centers: Vec<(f64, f64)> = (0..spec.region_count)
        .map(|_| {
            (
                rng.random_range(0.0..s as f64),
                rng.random_range(0.0..s as f64),
            )
        })
        .collect();
    let mut class_order: Vec<u32> = (0..spec.class_palette.len() as u32).collect();
    class_order.shuffle(&mut rng);
    let region_class: Vec<u32> = class_order[..spec.region_count].to_vec();

    let mut region_map = Array2::<u32>::zeros((s, s));
    for y in 0..s {
        for x in 0..s {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, &(cy, cx)) in centers.iter().enumerate() {
                let d = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            region_map[[y, x]] = region_class[best];
        }
    }

    let rgb_sigma = spec.noise_sigma * RGB_CLIP.1;
    let sar_sigma = spec.noise_sigma * (SAR_CLIP.1 - SAR_CLIP.0);
    let mut rgb = Array3::<f64>::zeros((3, s, s));
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let base = spec.class_palette[region_map[[y, x]] as usize].rgb[c];
                let noise: f64 = rng.sample(StandardNormal);
                rgb[[c, y, x]] = (base + rgb_sigma * noise).clamp(0.0, 28000.0);
            }
        }
    }
    let mut sar = Array2::<f64>::zeros((s, s));
    for y in 0..s {
        for x in 0..s {
            let base = spec.class_palette[region_map[[y, x]] as usize].sar_db;
            let noise: f64 = rng.sample(StandardNormal);
            sar[[y, x]] = (base + sar_sigma * noise).clamp(-50.0, 5.0);
        }
    }

    let label = modal_class(&region_map);
    Ok(SyntheticScene {
        pair: RawPair {
            id: format!("syn{:016x}", spec.seed),
            sar,
            rgb,
            class_label: Some(label),
            cloudy_rgb: None,
        },
        region_map,
    })
}

/// Convenience wrapper returning just the pair.
pub fn generate_synthetic_pair(spec: &SyntheticSceneSpec) -> Result<RawPair> {
    Ok(generate_synthetic_scene(spec)?.pair)
}

/// Most frequent class in a region map; ties go to the smallest index.
pub fn modal_class(region_map: &Array2<u32>) -> u32 {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &c in region_map.iter() {
        *counts.entry(c).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn palette4() -> Vec<ClassAppearance> {
        vec![
            ClassAppearance { rgb: [9000.0, 1500.0, 1500.0], sar_db: -22.0 },
            ClassAppearance { rgb: [1500.0, 9000.0, 1500.0], sar_db: -16.0 },
            ClassAppearance { rgb: [1500.0, 1500.0, 9000.0], sar_db: -10.0 },
            ClassAppearance { rgb: [8000.0, 8000.0, 2000.0], sar_db: -4.0 },
        ]
    }

    #[test]
    fn sar_clip_endpoints() {
        let raw = arr2(&[[-25.0, -12.5], [3.0, -30.0]]);
        let img = preprocess_sar(&raw).unwrap();
        // lower clip endpoint maps to the domain minimum
        assert_eq!(img.data[[0, 0, 0]], -1.0);
        // interval midpoint maps to zero
        assert_eq!(img.data[[0, 0, 1]], 0.0);
        // +3 dB clips to 0 dB and maps to +1
        assert_eq!(img.data[[0, 1, 0]], 1.0);
        assert_eq!(img.data[[0, 1, 1]], -1.0);
        // all three channels identical
        for c in 1..3 {
            assert_eq!(img.data.index_axis(ndarray::Axis(0), c), img.data.index_axis(ndarray::Axis(0), 0));
        }
    }

    #[test]
    fn sar_rejects_non_finite() {
        let raw = arr2(&[[-10.0, f64::NAN]]);
        let err = preprocess_sar(&raw).unwrap_err();
        assert!(err.to_string().contains("sar[0,1]"), "{err}");
    }

    #[test]
    fn rgb_endpoints_and_clipping() {
        let raw = Array3::from_shape_vec((3, 1, 1), vec![10000.0, 12000.0, 5000.0]).unwrap();
        let img = preprocess_rgb(&raw).unwrap();
        assert_eq!(img.data[[0, 0, 0]], 1.0);
        assert_eq!(img.data[[1, 0, 0]], 1.0); // clipped
        assert_eq!(img.data[[2, 0, 0]], 0.0); // midpoint
    }

    #[test]
    fn rgb_rejects_negative() {
        let raw = Array3::from_shape_vec((3, 1, 1), vec![10.0, -1.0, 3.0]).unwrap();
        let err = preprocess_rgb(&raw).unwrap_err();
        assert!(err.to_string().contains("rgb[1,0,0]"), "{err}");
    }

    #[test]
    fn inverse_rgb_endpoints() {
        let img = StandardizedImage {
            data: Array3::from_shape_vec((3, 1, 1), vec![1.0, -1.0, 1.5]).unwrap(),
        };
        let counts = inverse_preprocess_rgb(&img);
        assert_eq!(counts[[0, 0, 0]], 10000.0);
        assert_eq!(counts[[1, 0, 0]], 0.0);
        assert_eq!(counts[[2, 0, 0]], 10000.0); // clamped
    }

    #[test]
    fn rgb_roundtrip_exhaustive() {
        // brute force over every representable count on a 1x1 grid
        for count in 0..=10000u32 {
            let raw = Array3::from_elem((3, 1, 1), count as f64);
            let img = preprocess_rgb(&raw).unwrap();
            let back = inverse_preprocess_rgb(&img);
            assert!(
                (back[[0, 0, 0]] - count as f64).abs() <= 0.5,
                "count {count} -> {}",
                back[[0, 0, 0]]
            );
        }
    }

    #[test]
    fn label_map_lookup_and_rejection() {
        let map =
            LabelMap::new([(1u32, 0u32), (2, 0), (3, 1)].into_iter().collect()).unwrap();
        assert_eq!(map_label(2, &map).unwrap(), 0);
        assert_eq!(map_label(3, &map).unwrap(), 1);
        match map_label(7, &map) {
            Err(Error::UnknownCode { code }) => assert_eq!(code, 7),
            other => panic!("expected UnknownCode, got {other:?}"),
        }
    }

    #[test]
    fn label_map_identity_and_composition() {
        let identity = LabelMap::new((0..4u32).map(|k| (k, k)).collect()).unwrap();
        assert_eq!(map_label(3, &identity).unwrap(), 3);

        // composing two maps equals mapping through the composed table
        let first = LabelMap::new([(10u32, 0u32), (11, 1), (12, 2)].into_iter().collect()).unwrap();
        let second = LabelMap::new([(0u32, 1u32), (1, 0), (2, 1)].into_iter().collect()).unwrap();
        let composed = LabelMap::new(
            first
                .codes()
                .map(|c| (c, second.map(first.map(c).unwrap()).unwrap()))
                .collect(),
        )
        .unwrap();
        for code in first.codes() {
            assert_eq!(
                composed.map(code).unwrap(),
                second.map(first.map(code).unwrap()).unwrap()
            );
        }
    }

    #[test]
    fn label_map_rejects_gap() {
        let err = LabelMap::new([(1u32, 0u32), (2, 2)].into_iter().collect()).unwrap_err();
        assert!(err.to_string().contains("missing 1"));
    }

    #[test]
    fn igbp_default_is_total_over_17_codes() {
        let map = LabelMap::igbp_simplified();
        assert_eq!(map.class_count(), 10);
        for code in 1..=17 {
            map.map(code).unwrap();
        }
    }

    #[test]
    fn synthetic_deterministic_and_modal() {
        let spec = SyntheticSceneSpec {
            size: 32,
            region_count: 3,
            class_palette: palette4(),
            noise_sigma: 0.02,
            seed: 99,
        };
        let a = generate_synthetic_scene(&spec).unwrap();
        let b = generate_synthetic_scene(&spec).unwrap();
        assert_eq!(a.pair.sar, b.pair.sar);
        assert_eq!(a.pair.rgb, b.pair.rgb);
        assert_eq!(a.pair.class_label, b.pair.class_label);

        // recount region areas by brute force on the emitted map
        let mut counts = std::collections::BTreeMap::new();
        for &c in a.region_map.iter() {
            *counts.entry(c).or_insert(0usize) += 1;
        }
        let modal = counts
            .iter()
            .max_by(|x, y| x.1.cmp(y.1).then(y.0.cmp(x.0)))
            .map(|(c, _)| *c)
            .unwrap();
        assert_eq!(a.pair.class_label, Some(modal));
    }

    #[test]
    fn synthetic_single_region_is_constant() {
        let spec = SyntheticSceneSpec {
            size: 32,
            region_count: 1,
            class_palette: palette4(),
            noise_sigma: 0.0,
            seed: 7,
        };
        let scene = generate_synthetic_scene(&spec).unwrap();
        let cls = scene.region_map[[0, 0]] as usize;
        let expected = spec.class_palette[cls];
        for c in 0..3 {
            for v in scene.pair.rgb.index_axis(ndarray::Axis(0), c).iter() {
                assert_eq!(*v, expected.rgb[c]);
            }
        }
        for v in scene.pair.sar.iter() {
            assert_eq!(*v, expected.sar_db);
        }
    }

    #[test]
    fn synthetic_rejects_region_count_over_palette() {
        let spec = SyntheticSceneSpec {
            size: 32,
            region_count: 5,
            class_palette: palette4(),
            noise_sigma: 0.0,
            seed: 1,
        };
        assert!(generate_synthetic_pair(&spec).is_err());
    }
}
