//! Downstream evaluation harnesses: five-configuration land-cover
//! classification and direct-metric cloud removal.

pub mod classifier;

use ndarray::{concatenate, Array3, Axis};
use serde::{Deserialize, Serialize};

use sar2rgb_nn::rng;

use crate::codec::Codec;
use crate::diffusion::cold::improved_cold_sample_batch;
use crate::diffusion::standard::{ddpm_sample_batch, load_checkpoint, SampleOptions};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::imagery::{preprocess_rgb, preprocess_sar, RawPair, StandardizedImage};
use crate::metrics::{accuracy, mae, psnr, ssim, MetricConfig};

pub use classifier::{train_classifier, widen_stem_kernel, Classifier, ClassifierSpec, EpochLog};

/// The five input configurations evaluated by the classification harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputConfiguration {
    /// 1: original SAR only (VV replicated to 3 channels).
    S1,
    /// 2: original RGB only.
    S2,
    /// 3: generated RGB only.
    GenS2,
    /// 4: SAR and original RGB stacked to 6 channels.
    S1S2,
    /// 5: SAR and generated RGB stacked to 6 channels.
    S1GenS2,
}

impl InputConfiguration {
    pub fn all() -> [InputConfiguration; 5] {
        [
            InputConfiguration::S1,
            InputConfiguration::S2,
            InputConfiguration::GenS2,
            InputConfiguration::S1S2,
            InputConfiguration::S1GenS2,
        ]
    }

    pub fn id(&self) -> usize {
        match self {
            InputConfiguration::S1 => 1,
            InputConfiguration::S2 => 2,
            InputConfiguration::GenS2 => 3,
            InputConfiguration::S1S2 => 4,
            InputConfiguration::S1GenS2 => 5,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            InputConfiguration::S1 | InputConfiguration::S2 | InputConfiguration::GenS2 => 3,
            InputConfiguration::S1S2 | InputConfiguration::S1GenS2 => 6,
        }
    }

    pub fn uses_generated(&self) -> bool {
        matches!(self, InputConfiguration::GenS2 | InputConfiguration::S1GenS2)
    }

    /// Column label in the classification report.
    pub fn column(&self) -> &'static str {
        match self {
            InputConfiguration::S1 => "S1",
            InputConfiguration::S2 => "S2",
            InputConfiguration::GenS2 => "GenS2",
            InputConfiguration::S1S2 => "S1&S2",
            InputConfiguration::S1GenS2 => "S1&GenS2",
        }
    }
}

/// Assemble the classifier input for one pair. Channel order for 6-channel
/// configurations is fixed as `[SAR x3 | RGB]`; every channel goes through
/// the standard preprocessing.
pub fn assemble_input(
    config: InputConfiguration,
    pair: &RawPair,
    generated_rgb: Option<&StandardizedImage>,
) -> Result<Array3<f64>> {
    if config.uses_generated() != generated_rgb.is_some() {
        return Err(Error::Config(format!(
            "configuration {} {} a generated image",
            config.column(),
            if config.uses_generated() {
                "requires"
            } else {
                "does not take"
            }
        )));
    }
    let sar = || -> Result<Array3<f64>> { Ok(preprocess_sar(&pair.sar)?.data) };
    let rgb = || -> Result<Array3<f64>> { Ok(preprocess_rgb(&pair.rgb)?.data) };
    match config {
        InputConfiguration::S1 => sar(),
        InputConfiguration::S2 => rgb(),
        InputConfiguration::GenS2 => Ok(generated_rgb.unwrap().data.clone()),
        InputConfiguration::S1S2 => {
            let (a, b) = (sar()?, rgb()?);
            Ok(concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims"))
        }
        InputConfiguration::S1GenS2 => {
            let a = sar()?;
            let g = &generated_rgb.unwrap().data;
            if g.dim() != a.dim() {
                return Err(Error::Shape(format!(
                    "generated rgb {:?} vs sar {:?}",
                    g.dim(),
                    a.dim()
                )));
            }
            Ok(concatenate(Axis(0), &[a.view(), g.view()]).expect("matching spatial dims"))
        }
    }
}

/// A frozen SAR-to-RGB generator (checkpoint-backed model or a test oracle).
pub trait RgbGenerator {
    /// Generate a standardized RGB image for one pair deterministically
    /// under `seed`.
    fn generate(&self, pair: &RawPair, seed: u64) -> Result<StandardizedImage>;

    /// Batched generation; the default just loops.
    fn generate_batch(&self, pairs: &[&RawPair], seeds: &[u64]) -> Result<Vec<StandardizedImage>> {
        pairs
            .iter()
            .zip(seeds.iter())
            .map(|(p, &s)| self.generate(p, s))
            .collect()
    }

    fn id(&self) -> String;
}

/// Generator backed by a trained diffusion checkpoint plus its codec.
pub struct DiffusionGenerator {
    pub model: crate::backbone::Backbone,
    pub store: sar2rgb_nn::ParamStore,
    pub codec: Codec,
    pub sched: NoiseSchedule,
    pub x0_clamp: f64,
    checkpoint_id: String,
}

impl DiffusionGenerator {
    pub fn from_checkpoint(dir: &std::path::Path, codec: Codec) -> Result<Self> {
        let (model, store, meta) = load_checkpoint(dir)?;
        let sched = meta.schedule.build()?;
        Ok(DiffusionGenerator {
            model,
            store,
            codec,
            sched,
            x0_clamp: meta.train.x0_clamp,
            checkpoint_id: format!("{}@step{}", dir.display(), meta.step),
        })
    }

    pub fn new(
        model: crate::backbone::Backbone,
        store: sar2rgb_nn::ParamStore,
        codec: Codec,
        sched: NoiseSchedule,
        x0_clamp: f64,
        checkpoint_id: String,
    ) -> Self {
        DiffusionGenerator {
            model,
            store,
            codec,
            sched,
            x0_clamp,
            checkpoint_id,
        }
    }
}

impl RgbGenerator for DiffusionGenerator {
    fn generate(&self, pair: &RawPair, seed: u64) -> Result<StandardizedImage> {
        Ok(self.generate_batch(&[pair], &[seed])?.remove(0))
    }

    fn generate_batch(&self, pairs: &[&RawPair], seeds: &[u64]) -> Result<Vec<StandardizedImage>> {
        let zs: Vec<ndarray::ArrayD<f64>> = pairs
            .iter()
            .map(|p| Ok(self.codec.encode(&preprocess_sar(&p.sar)?)?.data.into_dyn()))
            .collect::<Result<_>>()?;
        let z_refs: Vec<&ndarray::ArrayD<f64>> = zs.iter().collect();
        let labels: Vec<Option<u32>> = pairs
            .iter()
            .map(|p| {
                if self.model.config.class_count.is_some() {
                    p.class_label
                } else {
                    None
                }
            })
            .collect();
        let latents: Vec<ndarray::ArrayD<f64>> = match self.model.config.variant {
            crate::backbone::Variant::Standard => {
                let opts = SampleOptions {
                    x0_clamp: self.x0_clamp,
                    trajectory_every: None,
                };
                ddpm_sample_batch(
                    &self.model,
                    &self.store,
                    &z_refs,
                    &labels,
                    &self.sched,
                    seeds,
                    &opts,
                )?
                .into_iter()
                .map(|o| o.latent)
                .collect()
            }
            crate::backbone::Variant::Cold => improved_cold_sample_batch(
                &self.model,
                &self.store,
                &z_refs,
                &labels,
                &self.sched,
                self.x0_clamp,
            )?,
        };
        latents
            .into_iter()
            .map(|latent| {
                let grid = crate::codec::LatentGrid {
                    data: latent.into_dimensionality::<ndarray::Ix3>().unwrap(),
                    scale: self.codec.config().scale,
                };
                self.codec.decode(&grid)
            })
            .collect()
    }

    fn id(&self) -> String {
        self.checkpoint_id.clone()
    }
}

// ---------------------------------------------------------------------------
// Classification experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub runs: Vec<f64>,
}

impl MeanStd {
    pub fn from_runs(runs: Vec<f64>) -> Self {
        let n = runs.len().max(1) as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let var = runs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: var.sqrt(),
            runs,
        }
    }
}

/// One row of the classification table: accuracy per configuration over
/// `repeats` independent generation+training runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationOutcome {
    pub setup: String,
    pub repeats: usize,
    pub generator_id: Option<String>,
    pub columns: Vec<(String, MeanStd)>,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    rng::splitmix64(seed ^ rng::splitmix64(a.wrapping_mul(0x1000193) ^ b))
}

/// Run the five-configuration classification benchmark. Per repeat, a fresh
/// generation pass (for the generated configurations) and a freshly seeded
/// classifier; reported as mean +/- std over repeats.
#[allow(clippy::too_many_arguments)]
pub fn run_classification_experiment(
    pairs: &[RawPair],
    train_idx: &[usize],
    eval_idx: &[usize],
    generator: Option<&dyn RgbGenerator>,
    configs: &[InputConfiguration],
    repeats: usize,
    base_spec: &ClassifierSpec,
    seed: u64,
    setup: &str,
) -> Result<ClassificationOutcome> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    let needs_gen = configs.iter().any(|c| c.uses_generated());
    if needs_gen && generator.is_none() {
        return Err(Error::Config(
            "generated configurations require a generator checkpoint".into(),
        ));
    }
    for (i, p) in pairs.iter().enumerate() {
        if p.class_label.is_none() {
            return Err(Error::Config(format!("pair {i} ({}) has no label", p.id)));
        }
    }

    let mut runs: Vec<Vec<f64>> = vec![Vec::new(); configs.len()];
    for r in 0..repeats {
        // one generation pass per repeat, shared by configs 3 and 5
        let generated: Option<Vec<StandardizedImage>> = if needs_gen {
            let g = generator.unwrap();
            let refs: Vec<&RawPair> = pairs.iter().collect();
            let seeds: Vec<u64> = (0..pairs.len())
                .map(|i| mix_seed(seed, r as u64, i as u64))
                .collect();
            let mut images = Vec::with_capacity(pairs.len());
            for (chunk, seeds_chunk) in refs.chunks(16).zip(seeds.chunks(16)) {
                images.extend(g.generate_batch(chunk, seeds_chunk)?);
            }
            Some(images)
        } else {
            None
        };

        for (ci, config) in configs.iter().enumerate() {
            let build = |idx: &[usize]| -> Result<Vec<(Array3<f64>, u32)>> {
                idx.iter()
                    .map(|&i| {
                        let gen = generated.as_ref().map(|g| &g[i]);
                        let gen = if config.uses_generated() { gen } else { None };
                        Ok((
                            assemble_input(*config, &pairs[i], gen)?,
                            pairs[i].class_label.unwrap(),
                        ))
                    })
                    .collect()
            };
            let train_set = build(train_idx)?;
            let eval_set = build(eval_idx)?;
            let mut spec = base_spec.clone();
            spec.input_channels = config.channels();
            spec.seed = mix_seed(seed, 0xC0FFEE ^ r as u64, config.id() as u64);
            let (clf, _) = train_classifier(&train_set, &eval_set, spec)?;
            let preds = clf.predict(&eval_set.iter().map(|(x, _)| x.clone()).collect::<Vec<_>>())?;
            let truth: Vec<u32> = eval_set.iter().map(|(_, l)| *l).collect();
            runs[ci].push(accuracy(&preds, &truth)?);
        }
    }
    Ok(ClassificationOutcome {
        setup: setup.to_string(),
        repeats,
        generator_id: generator.map(|g| g.id()),
        columns: configs
            .iter()
            .zip(runs)
            .map(|(c, r)| (c.column().to_string(), MeanStd::from_runs(r)))
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Cloud removal
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CloudRemovalReport {
    pub mae_mean: f64,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub n: usize,
    pub generator_id: String,
    pub seed: u64,
}

fn to_unit_interval(img: &StandardizedImage) -> Array3<f64> {
    img.data.mapv(|v| (v.clamp(-1.0, 1.0) + 1.0) * 0.5)
}

/// Generate RGB from SAR for every triplet (the cloudy image is never an
/// input to generation) and compare against the clean RGB in the normalized
/// `[0, 1]` domain.
pub fn run_cloud_removal_eval(
    pairs: &[RawPair],
    generator: &dyn RgbGenerator,
    seed: u64,
    cfg: &MetricConfig,
) -> Result<CloudRemovalReport> {
    if pairs.is_empty() {
        return Err(Error::Config("cloud-removal dataset is empty".into()));
    }
    for (i, p) in pairs.iter().enumerate() {
        if p.cloudy_rgb.is_none() {
            return Err(Error::Config(format!(
                "pair {i} ({}) lacks the cloudy image; triplets must be complete",
                p.id
            )));
        }
    }
    let refs: Vec<&RawPair> = pairs.iter().collect();
    let seeds: Vec<u64> = (0..pairs.len())
        .map(|i| mix_seed(seed, 0xC10D, i as u64))
        .collect();
    let mut generated = Vec::with_capacity(pairs.len());
    for (chunk, seeds_chunk) in refs.chunks(16).zip(seeds.chunks(16)) {
        generated.extend(generator.generate_batch(chunk, seeds_chunk)?);
    }

    let (mut mae_sum, mut psnr_sum, mut ssim_sum) = (0.0, 0.0, 0.0);
    for (pair, gen) in pairs.iter().zip(&generated) {
        let clean = to_unit_interval(&preprocess_rgb(&pair.rgb)?);
        let got = to_unit_interval(gen);
        mae_sum += mae(&got, &clean)?;
        psnr_sum += psnr(&got, &clean, cfg.data_range)?;
        ssim_sum += ssim(&got, &clean, cfg)?;
    }
    let n = pairs.len();
    Ok(CloudRemovalReport {
        mae_mean: mae_sum / n as f64,
        psnr_mean: psnr_sum / n as f64,
        ssim_mean: ssim_sum / n as f64,
        n,
        generator_id: generator.id(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagery::{generate_synthetic_scene, ClassAppearance, SyntheticSceneSpec};

    fn sample_pair(seed: u64) -> RawPair {
        let spec = SyntheticSceneSpec {
            size: 32,
            region_count: 2,
            class_palette: vec![
                ClassAppearance { rgb: [8000.0, 2000.0, 2000.0], sar_db: -20.0 },
                ClassAppearance { rgb: [2000.0, 8000.0, 2000.0], sar_db: -8.0 },
            ],
            noise_sigma: 0.0,
            seed,
        };
        let mut pair = generate_synthetic_scene(&spec).unwrap().pair;
        pair.cloudy_rgb = Some(pair.rgb.mapv(|v| (v + 2000.0).min(10000.0)));
        pair
    }

    struct OracleGen;
    impl RgbGenerator for OracleGen {
        fn generate(&self, pair: &RawPair, _seed: u64) -> Result<StandardizedImage> {
            preprocess_rgb(&pair.rgb)
        }
        fn id(&self) -> String {
            "oracle".into()
        }
    }

    struct CloudyGen;
    impl RgbGenerator for CloudyGen {
        fn generate(&self, pair: &RawPair, _seed: u64) -> Result<StandardizedImage> {
            preprocess_rgb(pair.cloudy_rgb.as_ref().unwrap())
        }
        fn id(&self) -> String {
            "cloudy-passthrough".into()
        }
    }

    #[test]
    fn assemble_channel_contracts() {
        let pair = sample_pair(1);
        let gen = OracleGen.generate(&pair, 0).unwrap();
        for config in InputConfiguration::all() {
            let gen_arg = config.uses_generated().then_some(&gen);
            let out = assemble_input(config, &pair, gen_arg).unwrap();
            assert_eq!(out.dim().0, config.channels(), "{:?}", config);
        }
        // config 1: three identical SAR channels
        let s1 = assemble_input(InputConfiguration::S1, &pair, None).unwrap();
        assert_eq!(s1.index_axis(Axis(0), 0), s1.index_axis(Axis(0), 1));
        assert_eq!(s1.index_axis(Axis(0), 0), s1.index_axis(Axis(0), 2));
        // config 4: first three channels are the SAR block
        let s1s2 = assemble_input(InputConfiguration::S1S2, &pair, None).unwrap();
        assert_eq!(s1s2.index_axis(Axis(0), 0), s1.index_axis(Axis(0), 0));
        // config 5 shares the SAR slots with config 4 bit-for-bit
        let s1gen = assemble_input(InputConfiguration::S1GenS2, &pair, Some(&gen)).unwrap();
        for c in 0..3 {
            assert_eq!(s1gen.index_axis(Axis(0), c), s1s2.index_axis(Axis(0), c));
        }
        // missing generated image is a config error
        assert!(assemble_input(InputConfiguration::GenS2, &pair, None).is_err());
        assert!(assemble_input(InputConfiguration::S2, &pair, Some(&gen)).is_err());
    }

    #[test]
    fn cloud_removal_oracle_and_passthrough() {
        let pairs: Vec<RawPair> = (0..3).map(sample_pair).collect();
        let cfg = MetricConfig::default();
        let report = run_cloud_removal_eval(&pairs, &OracleGen, 7, &cfg).unwrap();
        assert_eq!(report.mae_mean, 0.0);
        assert!((report.ssim_mean - 1.0).abs() <= 1e-6);
        assert!(report.psnr_mean.is_infinite());
        assert_eq!(report.n, 3);

        // pass-through generator equals direct cloudy-vs-clean metrics
        let report = run_cloud_removal_eval(&pairs, &CloudyGen, 7, &cfg).unwrap();
        let mut mae_sum = 0.0;
        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        for p in &pairs {
            let clean = to_unit_interval(&preprocess_rgb(&p.rgb).unwrap());
            let cloudy = to_unit_interval(&preprocess_rgb(p.cloudy_rgb.as_ref().unwrap()).unwrap());
            mae_sum += mae(&cloudy, &clean).unwrap();
            psnr_sum += psnr(&cloudy, &clean, 1.0).unwrap();
            ssim_sum += ssim(&cloudy, &clean, &cfg).unwrap();
        }
        assert!((report.mae_mean - mae_sum / 3.0).abs() < 1e-9);
        assert!((report.psnr_mean - psnr_sum / 3.0).abs() < 1e-9);
        assert!((report.ssim_mean - ssim_sum / 3.0).abs() < 1e-9);
    }

    #[test]
    fn cloud_removal_requires_complete_triplets() {
        let mut pair = sample_pair(4);
        pair.cloudy_rgb = None;
        assert!(run_cloud_removal_eval(&[pair], &OracleGen, 1, &MetricConfig::default()).is_err());
    }

    #[test]
    fn experiment_rejects_missing_generator() {
        let pairs: Vec<RawPair> = (0..4).map(sample_pair).collect();
        let spec = ClassifierSpec::defaults(3, 2, 1);
        let err = run_classification_experiment(
            &pairs,
            &[0, 1, 2],
            &[3],
            None,
            &InputConfiguration::all(),
            1,
            &spec,
            1,
            "test",
        );
        assert!(err.is_err());
    }

    #[test]
    fn repeats_of_one_report_zero_std() {
        let m = MeanStd::from_runs(vec![0.75]);
        assert_eq!(m.mean, 0.75);
        assert_eq!(m.std, 0.0);
    }
}
