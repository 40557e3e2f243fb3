//! Latent codec behind the diffusion modules. Two modes:
//!
//! * `identity` — pixel space is the latent space (downsample factor 1);
//!   diffusion then runs directly on standardized images.
//! * `learned` — a small convolutional VAE with one stride-2 stage per
//!   configured hidden width (three stages give the canonical factor 8) and a
//!   1x1 head emitting posterior mean and log-variance.
//!
//! `encode` is deterministic (posterior mean, times the configured scale);
//! decoding ends in `tanh`, so outputs always live in `[-1, 1]`.

use std::path::Path;

use ndarray::{Array3, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use sar2rgb_nn::conv::ConvSpec;
use sar2rgb_nn::optim::AdamW;
use sar2rgb_nn::{params, rng, NodeId, ParamId, ParamStore, Tape};

use crate::error::{Error, Result};
use crate::imagery::StandardizedImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecMode {
    Identity,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub mode: CodecMode,
    /// Latent channels in learned mode; ignored (image channels) for identity.
    pub latent_channels: usize,
    /// One stride-2 stage per width; empty for identity.
    pub hidden: Vec<usize>,
    pub kl_weight: f64,
    /// Normalization constant applied after encoding (and divided out before
    /// decoding).
    pub scale: f64,
}

impl CodecConfig {
    pub fn identity() -> Self {
        CodecConfig {
            mode: CodecMode::Identity,
            latent_channels: 3,
            hidden: Vec::new(),
            kl_weight: 0.0,
            scale: 1.0,
        }
    }

    pub fn learned(latent_channels: usize, hidden: Vec<usize>, kl_weight: f64) -> Self {
        CodecConfig {
            mode: CodecMode::Learned,
            latent_channels,
            hidden,
            kl_weight,
            scale: 1.0,
        }
    }

    pub fn downsample_factor(&self) -> usize {
        match self.mode {
            CodecMode::Identity => 1,
            CodecMode::Learned => 1 << self.hidden.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            CodecMode::Identity => Ok(()),
            CodecMode::Learned => {
                if self.latent_channels == 0 {
                    return Err(Error::Config("latent_channels must be >= 1".into()));
                }
                if self.hidden.is_empty() {
                    return Err(Error::Config(
                        "learned codec needs at least one hidden width".into(),
                    ));
                }
                if self.kl_weight < 0.0 {
                    return Err(Error::Config("kl_weight must be >= 0".into()));
                }
                Ok(())
            }
        }
    }
}

/// Codec-space representation of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub data: Array3<f64>,
    pub scale: f64,
}

struct LearnedParams {
    enc_convs: Vec<(ParamId, ParamId)>,
    enc_head: (ParamId, ParamId),
    dec_in: (ParamId, ParamId),
    dec_convs: Vec<(ParamId, ParamId)>,
    dec_out: (ParamId, ParamId),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecMeta {
    pub config: CodecConfig,
    pub seed: u64,
    pub steps: u64,
}

pub struct Codec {
    pub meta: CodecMeta,
    store: ParamStore,
    learned: Option<LearnedParams>,
}

const IMG_CHANNELS: usize = 3;

impl Codec {
    pub fn identity() -> Self {
        Codec {
            meta: CodecMeta {
                config: CodecConfig::identity(),
                seed: 0,
                steps: 0,
            },
            store: ParamStore::new(),
            learned: None,
        }
    }

    /// Fresh (untrained) codec for `config`.
    pub fn init(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.mode == CodecMode::Identity {
            let mut c = Codec::identity();
            c.meta.config = config;
            return Ok(c);
        }
        let mut store = ParamStore::new();
        let mut r = rng::derive(seed, 0xC0DEC);
        let lc = config.latent_channels;
        let widths = &config.hidden;

        let mut enc_convs = Vec::new();
        let mut prev = IMG_CHANNELS;
        for (i, &w) in widths.iter().enumerate() {
            enc_convs.push((
                store.add(&format!("enc{i}.w"), params::kaiming_conv(&mut r, &[w, prev, 3, 3])),
                store.add(&format!("enc{i}.b"), params::zeros(&[w])),
            ));
            prev = w;
        }
        let enc_head = (
            store.add("enc.head.w", params::kaiming_conv(&mut r, &[2 * lc, prev, 1, 1])),
            store.add("enc.head.b", params::zeros(&[2 * lc])),
        );
        let dec_in = (
            store.add("dec.in.w", params::kaiming_conv(&mut r, &[prev, lc, 1, 1])),
            store.add("dec.in.b", params::zeros(&[prev])),
        );
        let mut dec_convs = Vec::new();
        for i in (0..widths.len()).rev() {
            let out_w = if i == 0 { widths[0] } else { widths[i - 1] };
            dec_convs.push((
                store.add(&format!("dec{i}.w"), params::kaiming_conv(&mut r, &[out_w, widths[i], 3, 3])),
                store.add(&format!("dec{i}.b"), params::zeros(&[out_w])),
            ));
        }
        let dec_out = (
            store.add("dec.out.w", params::kaiming_conv(&mut r, &[IMG_CHANNELS, widths[0], 3, 3])),
            store.add("dec.out.b", params::zeros(&[IMG_CHANNELS])),
        );
        Ok(Codec {
            meta: CodecMeta {
                config,
                seed,
                steps: 0,
            },
            store,
            learned: Some(LearnedParams {
                enc_convs,
                enc_head,
                dec_in,
                dec_convs,
                dec_out,
            }),
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.meta.config
    }

    pub fn latent_channels(&self) -> usize {
        match self.meta.config.mode {
            CodecMode::Identity => IMG_CHANNELS,
            CodecMode::Learned => self.meta.config.latent_channels,
        }
    }

    fn check_divisible(&self, img: &StandardizedImage) -> Result<()> {
        let f = self.meta.config.downsample_factor();
        let (h, w) = img.spatial();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} not divisible by downsample factor {f}"
            )));
        }
        Ok(())
    }

    /// Encoder moments for a batch `[b, 3, s, s] -> [b, 2*lc, s/f, s/f]`.
    fn encode_moments(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let p = self.learned.as_ref().expect("learned codec");
        let mut h = x;
        for &(w, b) in &p.enc_convs {
            let wn = tape.param(&self.store, w);
            let bn = tape.param(&self.store, b);
            h = tape.conv2d(h, wn, bn, ConvSpec { stride: 2, pad: 1 });
            h = tape.gelu(h);
        }
        let wn = tape.param(&self.store, p.enc_head.0);
        let bn = tape.param(&self.store, p.enc_head.1);
        tape.conv2d(h, wn, bn, ConvSpec { stride: 1, pad: 0 })
    }

    /// Decoder for a latent batch `[b, lc, s, s] -> [b, 3, s*f, s*f]`.
    fn decode_node(&self, tape: &mut Tape, z: NodeId) -> NodeId {
        let p = self.learned.as_ref().expect("learned codec");
        let wn = tape.param(&self.store, p.dec_in.0);
        let bn = tape.param(&self.store, p.dec_in.1);
        let mut h = tape.conv2d(z, wn, bn, ConvSpec { stride: 1, pad: 0 });
        h = tape.gelu(h);
        for &(w, b) in &p.dec_convs {
            h = tape.upsample2x(h);
            let wn = tape.param(&self.store, w);
            let bn = tape.param(&self.store, b);
            h = tape.conv2d(h, wn, bn, ConvSpec { stride: 1, pad: 1 });
            h = tape.gelu(h);
        }
        let wn = tape.param(&self.store, p.dec_out.0);
        let bn = tape.param(&self.store, p.dec_out.1);
        let out = tape.conv2d(h, wn, bn, ConvSpec { stride: 1, pad: 1 });
        tape.tanh(out)
    }

    /// Deterministic encoding: posterior mean scaled by the configured
    /// constant. Identity mode returns the image unchanged.
    pub fn encode(&self, img: &StandardizedImage) -> Result<LatentGrid> {
        self.check_divisible(img)?;
        let scale = self.meta.config.scale;
        match self.meta.config.mode {
            CodecMode::Identity => {
                let data = if scale == 1.0 {
                    img.data.clone()
                } else {
                    img.data.mapv(|v| v * scale)
                };
                Ok(LatentGrid { data, scale })
            }
            CodecMode::Learned => {
                let (c, h, w) = img.data.dim();
                let mut x = Array4::<f64>::zeros((1, c, h, w));
                x.index_axis_mut(Axis(0), 0).assign(&img.data);
                let mut tape = Tape::new();
                let xn = tape.constant(x.into_dyn());
                let moments = self.encode_moments(&mut tape, xn);
                let lc = self.meta.config.latent_channels;
                let mean = tape.slice_axis(moments, 1, 0, lc);
                let v = tape.value(mean);
                let data = v
                    .index_axis(Axis(0), 0)
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    .mapv(|x| x * scale);
                Ok(LatentGrid { data, scale })
            }
        }
    }

    /// Decode back to image space; outputs are always within `[-1, 1]`.
    pub fn decode(&self, z: &LatentGrid) -> Result<StandardizedImage> {
        let lc = self.latent_channels();
        let (c, _, _) = z.data.dim();
        if c != lc {
            return Err(Error::Shape(format!(
                "latent has {c} channels, codec expects {lc}"
            )));
        }
        let scale = self.meta.config.scale;
        match self.meta.config.mode {
            CodecMode::Identity => Ok(StandardizedImage {
                data: z.data.mapv(|v| (v / scale).clamp(-1.0, 1.0)),
            }),
            CodecMode::Learned => {
                let (c, h, w) = z.data.dim();
                let mut x = Array4::<f64>::zeros((1, c, h, w));
                x.index_axis_mut(Axis(0), 0)
                    .assign(&z.data.mapv(|v| v / scale));
                let mut tape = Tape::new();
                let zn = tape.constant(x.into_dyn());
                let out = self.decode_node(&mut tape, zn);
                let v = tape.value(out);
                Ok(StandardizedImage {
                    data: v
                        .index_axis(Axis(0), 0)
                        .to_owned()
                        .into_dimensionality::<ndarray::Ix3>()
                        .unwrap(),
                })
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = toml::to_string_pretty(&self.meta)
            .map_err(|e| Error::Config(format!("serialize codec meta: {e}")))?;
        std::fs::write(dir.join("meta.txt"), meta).map_err(|e| Error::io(dir.join("meta.txt"), e))?;
        if self.learned.is_some() {
            self.store
                .save(&dir.join("weights.bin"))
                .map_err(|e| Error::io(dir.join("weights.bin"), e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.txt");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CodecMeta = toml::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_path.display())))?;
        let mut codec = Codec::init(meta.config.clone(), meta.seed)?;
        codec.meta = meta;
        if codec.learned.is_some() {
            let wpath = dir.join("weights.bin");
            codec
                .store
                .load_into(&wpath)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", wpath.display())))?;
        }
        Ok(codec)
    }
}

/// One (reconstruction, KL) measurement from codec training.
#[derive(Debug, Clone, Copy)]
pub struct CodecLossSample {
    pub step: u64,
    pub recon: f64,
    pub kl: f64,
}

/// Train the learned codec on standardized images with reconstruction L2
/// plus `kl_weight * KL`. Deterministic for a fixed seed under serial
/// execution; aborts on non-finite loss.
pub fn train_codec(
    images: &[StandardizedImage],
    config: CodecConfig,
    seed: u64,
    steps: u64,
    batch_size: usize,
    learning_rate: f64,
) -> Result<(Codec, Vec<CodecLossSample>)> {
    if images.is_empty() {
        return Err(Error::Config("codec training set is empty".into()));
    }
    if config.mode != CodecMode::Learned {
        return Err(Error::Config("train_codec requires a learned codec".into()));
    }
    let mut codec = Codec::init(config.clone(), seed)?;
    let mut opt = AdamW::new(&codec.store, learning_rate, 0.0);
    let (c, hgt, wid) = images[0].data.dim();
    for img in images {
        if img.data.dim() != (c, hgt, wid) {
            return Err(Error::Shape("codec training images must share a shape".into()));
        }
    }
    let lc = config.latent_channels;
    let mut log = Vec::new();
    for step in 0..steps {
        let mut r = rng::derive(seed, step);
        let bsz = batch_size.min(images.len());
        let mut batch = Array4::<f64>::zeros((bsz, c, hgt, wid));
        for i in 0..bsz {
            let pick = rand::Rng::random_range(&mut r, 0..images.len());
            batch.index_axis_mut(Axis(0), i).assign(&images[pick].data);
        }
        let f = config.downsample_factor();
        let eps = rng::standard_normal(&mut r, &[bsz, lc, hgt / f, wid / f]);

        let mut tape = Tape::new();
        let x = tape.constant(batch.clone().into_dyn());
        let moments = codec.encode_moments(&mut tape, x);
        let mean = tape.slice_axis(moments, 1, 0, lc);
        let logvar = tape.slice_axis(moments, 1, lc, lc);
        // z = mean + exp(logvar / 2) * eps
        let half_logvar = tape.mul_scalar(logvar, 0.5);
        let std = tape.exp(half_logvar);
        let noise = tape.mul_const(std, &eps);
        let z = tape.add(mean, noise);
        let recon = codec.decode_node(&mut tape, z);

        let target = tape.constant(batch.into_dyn());
        let diff = tape.sub(recon, target);
        let sq = tape.mul(diff, diff);
        let recon_loss = tape.mean_all(sq);

        // KL(N(mu, sigma^2) || N(0,1)) per element
        let mu2 = tape.mul(mean, mean);
        let sig2 = tape.exp(logvar);
        let a = tape.add(mu2, sig2);
        let b = tape.sub(a, logvar);
        let b = tape.add_scalar(b, -1.0);
        let kl_elem = tape.mul_scalar(b, 0.5);
        let kl = tape.mean_all(kl_elem);

        let weighted_kl = tape.mul_scalar(kl, config.kl_weight);
        let loss = tape.add(recon_loss, weighted_kl);

        let recon_v = tape.scalar(recon_loss);
        let kl_v = tape.scalar(kl);
        if !recon_v.is_finite() || !kl_v.is_finite() {
            return Err(Error::Numeric(format!(
                "codec loss became non-finite at step {step} (recon {recon_v}, kl {kl_v})"
            )));
        }
        debug_assert!(kl_v >= -1e-12, "KL must be non-negative, got {kl_v}");
        let grads = tape.backward(loss, &codec.store);
        opt.step(&mut codec.store, &grads);
        log.push(CodecLossSample {
            step,
            recon: recon_v,
            kl: kl_v,
        });
    }
    codec.meta.steps = steps;
    Ok((codec, log))
}

/// Preprocess-and-encode helper used by the training pipelines.
pub fn encode_image(codec: &Codec, img: &StandardizedImage) -> Result<ArrayD<f64>> {
    Ok(codec.encode(img)?.data.into_dyn())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagery::StandardizedImage;

    fn img(seed: u64, s: usize) -> StandardizedImage {
        let mut r = rng::seeded(seed);
        StandardizedImage {
            data: rng::standard_normal(&mut r, &[3, s, s])
                .mapv(|v| (v * 0.5).clamp(-1.0, 1.0))
                .into_dimensionality()
                .unwrap(),
        }
    }

    #[test]
    fn identity_roundtrip_is_exact() {
        let codec = Codec::identity();
        let x = img(1, 16);
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.data, x.data);
        let back = codec.decode(&z).unwrap();
        assert_eq!(back.data, x.data);
    }

    #[test]
    fn learned_shape_contract() {
        for (s, widths) in [(32usize, vec![8, 12, 16]), (64, vec![8, 12, 16]), (256, vec![4, 6, 8])] {
            let codec = Codec::init(CodecConfig::learned(4, widths, 1e-4), 7).unwrap();
            assert_eq!(codec.config().downsample_factor(), 8);
            let x = img(s as u64, s);
            let z = codec.encode(&x).unwrap();
            assert_eq!(z.data.dim(), (4, s / 8, s / 8));
            let back = codec.decode(&z).unwrap();
            assert_eq!(back.data.dim(), (3, s, s));
        }
    }

    #[test]
    fn indivisible_dims_rejected() {
        let codec = Codec::init(CodecConfig::learned(4, vec![4, 4, 4], 0.0), 7).unwrap();
        let mut r = rng::seeded(2);
        let x = StandardizedImage {
            data: rng::standard_normal(&mut r, &[3, 20, 20])
                .into_dimensionality()
                .unwrap(),
        };
        assert!(codec.encode(&x).is_err());
    }

    #[test]
    fn zero_latent_decodes_in_range() {
        let codec = Codec::init(CodecConfig::learned(4, vec![4, 6, 8], 0.0), 3).unwrap();
        let z = LatentGrid {
            data: Array3::zeros((4, 4, 4)),
            scale: 1.0,
        };
        let out = codec.decode(&z).unwrap();
        assert!(out.data.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn decode_rejects_channel_mismatch() {
        let codec = Codec::identity();
        let z = LatentGrid {
            data: Array3::zeros((4, 8, 8)),
            scale: 1.0,
        };
        assert!(codec.decode(&z).is_err());
    }

    #[test]
    fn training_is_deterministic_and_loss_decreases() {
        let images: Vec<StandardizedImage> = (0..8).map(|i| img(100 + i, 16)).collect();
        let cfg = CodecConfig::learned(4, vec![8, 8], 0.0);
        let (_, log_a) = train_codec(&images, cfg.clone(), 42, 60, 4, 2e-3).unwrap();
        let (_, log_b) = train_codec(&images, cfg, 42, 60, 4, 2e-3).unwrap();
        assert_eq!(log_a[0].recon, log_b[0].recon);
        assert_eq!(log_a[59].recon, log_b[59].recon);
        let head: f64 = log_a[..10].iter().map(|l| l.recon).sum::<f64>() / 10.0;
        let tail: f64 = log_a[50..].iter().map(|l| l.recon).sum::<f64>() / 10.0;
        assert!(tail < head, "windowed loss did not improve: {head} -> {tail}");
        assert!(log_a.iter().all(|l| l.kl >= 0.0));
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = CodecConfig::learned(4, vec![8, 8], 0.0);
        assert!(train_codec(&[], cfg, 1, 10, 4, 1e-3).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<StandardizedImage> = (0..2).map(|i| img(i, 16)).collect();
        let cfg = CodecConfig::learned(2, vec![4, 4], 1e-4);
        let (codec, _) = train_codec(&images, cfg, 9, 20, 2, 1e-3).unwrap();
        codec.save(dir.path()).unwrap();
        let loaded = Codec::load(dir.path()).unwrap();
        let x = img(5, 16);
        let a = codec.encode(&x).unwrap();
        let b = loaded.encode(&x).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(loaded.meta.steps, 20);
    }
}
