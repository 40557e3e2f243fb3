//! Dataset manifests: UTF-8, one record per line, tab-separated fields
//! `id, sar_path, rgb_path, [label], [cloudy_rgb_path]`. Paths are resolved
//! relative to the manifest file; the label field may be left empty. Blank
//! lines and lines starting with `#` are skipped.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::imagery::{raster, RawPair};

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub sar_path: PathBuf,
    pub rgb_path: PathBuf,
    pub label: Option<u32>,
    pub cloudy_rgb_path: Option<PathBuf>,
}

/// Ordered collection of pair references with lazy per-item loading.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Train/eval index split. Membership is decided by a seeded shuffle with
/// `floor(fraction * n)` items on the training side; within each side the
/// original manifest order is kept.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let row = lineno + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 || fields.len() > 5 {
            return Err(Error::ManifestRow {
                path: path.to_path_buf(),
                row,
                message: format!("expected 3-5 tab-separated fields, got {}", fields.len()),
            });
        }
        let label = match fields.get(3) {
            None => None,
            Some(s) if s.is_empty() => None,
            Some(s) => Some(s.parse::<u32>().map_err(|_| Error::ManifestRow {
                path: path.to_path_buf(),
                row,
                message: format!("label `{s}` is not a non-negative integer"),
            })?),
        };
        let resolve = |p: &str| -> Result<PathBuf> {
            let full = dir.join(p);
            if !full.exists() {
                return Err(Error::ManifestRow {
                    path: path.to_path_buf(),
                    row,
                    message: format!("referenced file {} does not exist", full.display()),
                });
            }
            Ok(full)
        };
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            sar_path: resolve(fields[1])?,
            rgb_path: resolve(fields[2])?,
            label,
            cloudy_rgb_path: match fields.get(4) {
                None => None,
                Some(s) if s.is_empty() => None,
                Some(s) => Some(resolve(s)?),
            },
        });
    }
    Ok(Manifest {
        path: path.to_path_buf(),
        entries,
    })
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load the rasters of entry `index`.
    pub fn load_pair(&self, index: usize) -> Result<RawPair> {
        let e = &self.entries[index];
        let pair = RawPair {
            id: e.id.clone(),
            sar: raster::load_sar_raster(&e.sar_path)?,
            rgb: raster::load_rgb_raster(&e.rgb_path)?,
            class_label: e.label,
            cloudy_rgb: match &e.cloudy_rgb_path {
                Some(p) => Some(raster::load_rgb_raster(p)?),
                None => None,
            },
        };
        pair.validate()?;
        Ok(pair)
    }

    /// Split entry indices into train/eval; see [`Split`].
    pub fn split(&self, fraction: f64, seed: u64) -> Result<Split> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!(
                "split fraction {fraction} outside [0, 1]"
            )));
        }
        let n = self.entries.len();
        let n_train = (fraction * n as f64).floor() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = sar2rgb_nn::rng::derive(seed, 0x53504c49_54);
        order.shuffle(&mut rng);
        let mut train: Vec<usize> = order[..n_train].to_vec();
        let mut eval: Vec<usize> = order[n_train..].to_vec();
        train.sort_unstable();
        eval.sort_unstable();
        Ok(Split { train, eval })
    }

    /// True if every entry carries a class label.
    pub fn fully_labeled(&self) -> bool {
        self.entries.iter().all(|e| e.label.is_some())
    }
}
