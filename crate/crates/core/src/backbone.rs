//! The denoiser network: a patchified transformer over latent grids,
//! conditioned on the timestep (and optionally a class label) through
//! adaptive layer norm with zero-initialized gates, so a fresh network is the
//! identity on its trunk and emits an all-zero head output.
//!
//! The noisy RGB latent and the clean SAR latent enter concatenated along the
//! channel axis; the head emits either noise plus a variance-interpolation
//! parameter (standard regime) or a clean-image estimate (cold regime).

use ndarray::{Array2, Array4, ArrayD};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sar2rgb_nn::ops::patchify_grid;
use sar2rgb_nn::{params, NodeId, ParamId, ParamStore, Tape};

use crate::error::{Error, Result};

/// Frequency dimension of the raw sinusoidal timestep features.
pub const TIME_FREQ_DIM: usize = 256;
const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Predict the added noise plus a variance-interpolation parameter.
    Standard,
    /// Predict the clean latent directly.
    Cold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub heads: usize,
    pub hidden: usize,
    pub patch: usize,
    /// Channels after concatenating the noisy/blended latent with the SAR
    /// conditioning latent (twice the per-stream latent channels).
    pub in_channels: usize,
    /// Head channels: `2 * latent_channels` for standard, `latent_channels`
    /// for cold.
    pub out_channels: usize,
    pub class_count: Option<usize>,
    pub variant: Variant,
}

impl BackboneConfig {
    /// Config for a given per-stream latent channel count.
    pub fn for_variant(
        variant: Variant,
        latent_channels: usize,
        depth: usize,
        heads: usize,
        hidden: usize,
        patch: usize,
        class_count: Option<usize>,
    ) -> Self {
        let out_channels = match variant {
            Variant::Standard => 2 * latent_channels,
            Variant::Cold => latent_channels,
        };
        BackboneConfig {
            depth,
            heads,
            hidden,
            patch,
            in_channels: 2 * latent_channels,
            out_channels,
            class_count,
            variant,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.in_channels / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.hidden % 4 != 0 {
            return Err(Error::Config(
                "hidden width must be divisible by 4 for the 2-d positional encoding".into(),
            ));
        }
        if self.depth == 0 || self.patch == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.in_channels % 2 != 0 {
            return Err(Error::Config(
                "in_channels must be even (noisy latent + SAR latent)".into(),
            ));
        }
        Ok(())
    }

    /// Total scalar parameter count implied by this config.
    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        let patch_in = self.patch * self.patch * self.in_channels;
        let patch_out = self.patch * self.patch * self.out_channels;
        let mut n = patch_in * h + h; // patch embedding
        n += TIME_FREQ_DIM * h + h + h * h + h; // timestep MLP
        if let Some(c) = self.class_count {
            n += (c + 1) * h; // class table incl. the null class
        }
        // per block: modulation, qkv, proj, mlp
        n += self.depth * (h * 6 * h + 6 * h + h * 3 * h + 3 * h + h * h + h + h * 4 * h + 4 * h + 4 * h * h + h);
        n += h * 2 * h + 2 * h; // final modulation
        n += h * patch_out + patch_out; // final projection
        n
    }
}

/// Network output split per variant, in latent-grid space `[b, c, s, s]`.
pub enum BackboneOutput {
    Standard {
        eps_hat: Array4<f64>,
        /// Raw (unsquashed) variance-interpolation parameter.
        v_raw: Array4<f64>,
    },
    Cold { x0_hat: Array4<f64> },
}

struct BlockParams {
    mod_w: ParamId,
    mod_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

pub struct Backbone {
    pub config: BackboneConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    t_w1: ParamId,
    t_b1: ParamId,
    t_w2: ParamId,
    t_b2: ParamId,
    class_table: Option<ParamId>,
    blocks: Vec<BlockParams>,
    final_mod_w: ParamId,
    final_mod_b: ParamId,
    final_w: ParamId,
    final_b: ParamId,
}

impl Backbone {
    /// Register freshly initialized parameters in `store`. Modulation layers
    /// and the output head start at zero (adaLN-zero); the head of a new
    /// network therefore emits exactly zero.
    pub fn init(config: BackboneConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let patch_in = config.patch * config.patch * config.in_channels;
        let patch_out = config.patch * config.patch * config.out_channels;

        let patch_w = store.add("patch.w", params::xavier_uniform(rng, patch_in, h));
        let patch_b = store.add("patch.b", params::zeros(&[h]));
        let t_w1 = store.add("time.w1", params::normal_init(rng, &[TIME_FREQ_DIM, h], 0.02));
        let t_b1 = store.add("time.b1", params::zeros(&[h]));
        let t_w2 = store.add("time.w2", params::normal_init(rng, &[h, h], 0.02));
        let t_b2 = store.add("time.b2", params::zeros(&[h]));
        let class_table = config.class_count.map(|c| {
            store.add("class.table", params::normal_init(rng, &[c + 1, h], 0.02))
        });
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            blocks.push(BlockParams {
                mod_w: store.add(&format!("block{i}.mod.w"), params::zeros(&[h, 6 * h])),
                mod_b: store.add(&format!("block{i}.mod.b"), params::zeros(&[6 * h])),
                qkv_w: store.add(&format!("block{i}.attn.qkv.w"), params::xavier_uniform(rng, h, 3 * h)),
                qkv_b: store.add(&format!("block{i}.attn.qkv.b"), params::zeros(&[3 * h])),
                proj_w: store.add(&format!("block{i}.attn.proj.w"), params::xavier_uniform(rng, h, h)),
                proj_b: store.add(&format!("block{i}.attn.proj.b"), params::zeros(&[h])),
                fc1_w: store.add(&format!("block{i}.mlp.fc1.w"), params::xavier_uniform(rng, h, 4 * h)),
                fc1_b: store.add(&format!("block{i}.mlp.fc1.b"), params::zeros(&[4 * h])),
                fc2_w: store.add(&format!("block{i}.mlp.fc2.w"), params::xavier_uniform(rng, 4 * h, h)),
                fc2_b: store.add(&format!("block{i}.mlp.fc2.b"), params::zeros(&[h])),
            });
        }
        let final_mod_w = store.add("final.mod.w", params::zeros(&[h, 2 * h]));
        let final_mod_b = store.add("final.mod.b", params::zeros(&[2 * h]));
        let final_w = store.add("final.w", params::zeros(&[h, patch_out]));
        let final_b = store.add("final.b", params::zeros(&[patch_out]));

        Ok(Backbone {
            config,
            patch_w,
            patch_b,
            t_w1,
            t_b1,
            t_w2,
            t_b2,
            class_table,
            blocks,
            final_mod_w,
            final_mod_b,
            final_w,
            final_b,
        })
    }

    /// Recorded forward pass over a pre-concatenated input batch.
    /// `x_in: [b, in_channels, s, s]`, one timestep and optional label per
    /// item. Returns the head output node `[b, out_channels, s, s]`.
    pub fn forward_tokens(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_in: &Array4<f64>,
        t: &[usize],
        labels: &[Option<u32>],
    ) -> NodeId {
        let cfg = &self.config;
        let (b, c_in, s, s2) = x_in.dim();
        assert_eq!(c_in, cfg.in_channels, "input channel mismatch");
        assert_eq!(s, s2, "square grids only");
        assert_eq!(s % cfg.patch, 0, "patch must divide spatial size");
        assert_eq!(t.len(), b);
        assert_eq!(labels.len(), b);
        let grid = s / cfg.patch;
        let n_tokens = grid * grid;
        let h = cfg.hidden;
        let heads = cfg.heads;

        // tokens
        let patches = patchify_grid(&x_in.view().into_dyn(), cfg.patch);
        let patches = tape.constant(patches);
        let pw = tape.param(store, self.patch_w);
        let pb = tape.param(store, self.patch_b);
        let mut x = tape.affine(patches, pw, pb);
        let pos = pos_embed_2d(grid, h);
        let mut pos_tiled = Array2::<f64>::zeros((b * n_tokens, h));
        for bi in 0..b {
            pos_tiled
                .slice_mut(ndarray::s![bi * n_tokens..(bi + 1) * n_tokens, ..])
                .assign(&pos);
        }
        x = tape.add_const(x, &pos_tiled.into_dyn());

        // conditioning vector
        let feats = tape.constant(timestep_features(t).into_dyn());
        let tw1 = tape.param(store, self.t_w1);
        let tb1 = tape.param(store, self.t_b1);
        let tw2 = tape.param(store, self.t_w2);
        let tb2 = tape.param(store, self.t_b2);
        let te = tape.affine(feats, tw1, tb1);
        let te = tape.silu(te);
        let mut cond = tape.affine(te, tw2, tb2);
        if let (Some(table), Some(count)) = (self.class_table, cfg.class_count) {
            let indices: Vec<usize> = labels
                .iter()
                .map(|l| match l {
                    Some(v) => {
                        assert!((*v as usize) < count, "label {v} >= class_count {count}");
                        *v as usize
                    }
                    None => count, // null class
                })
                .collect();
            let tbl = tape.param(store, table);
            let ce = tape.gather_rows(tbl, &indices);
            cond = tape.add(cond, ce);
        }

        for blk in &self.blocks {
            let cm = tape.silu(cond);
            let mw = tape.param(store, blk.mod_w);
            let mb = tape.param(store, blk.mod_b);
            let m = tape.affine(cm, mw, mb); // [b, 6h]
            let shift1 = tape.slice_axis(m, 1, 0, h);
            let scale1 = tape.slice_axis(m, 1, h, h);
            let gate1 = tape.slice_axis(m, 1, 2 * h, h);
            let shift2 = tape.slice_axis(m, 1, 3 * h, h);
            let scale2 = tape.slice_axis(m, 1, 4 * h, h);
            let gate2 = tape.slice_axis(m, 1, 5 * h, h);

            // attention branch
            let norm = tape.layer_norm(x, LN_EPS);
            let modded = tape.modulate(norm, scale1, shift1, n_tokens);
            let qkvw = tape.param(store, blk.qkv_w);
            let qkvb = tape.param(store, blk.qkv_b);
            let qkv = tape.affine(modded, qkvw, qkvb); // [b*n, 3h]
            let ctx = tape.attention(qkv, b, n_tokens, heads);
            let prw = tape.param(store, blk.proj_w);
            let prb = tape.param(store, blk.proj_b);
            let attn_out = tape.affine(ctx, prw, prb);
            x = tape.gated_add(x, attn_out, gate1, n_tokens);

            // mlp branch
            let norm2 = tape.layer_norm(x, LN_EPS);
            let modded2 = tape.modulate(norm2, scale2, shift2, n_tokens);
            let f1w = tape.param(store, blk.fc1_w);
            let f1b = tape.param(store, blk.fc1_b);
            let hmid = tape.affine(modded2, f1w, f1b);
            let hmid = tape.gelu(hmid);
            let f2w = tape.param(store, blk.fc2_w);
            let f2b = tape.param(store, blk.fc2_b);
            let mlp_out = tape.affine(hmid, f2w, f2b);
            x = tape.gated_add(x, mlp_out, gate2, n_tokens);
        }

        // final layer: shift/scale modulation then a zero-initialized projection
        let cm = tape.silu(cond);
        let fmw = tape.param(store, self.final_mod_w);
        let fmb = tape.param(store, self.final_mod_b);
        let fm = tape.affine(cm, fmw, fmb);
        let shift = tape.slice_axis(fm, 1, 0, h);
        let scale = tape.slice_axis(fm, 1, h, h);
        let norm = tape.layer_norm(x, LN_EPS);
        let modded = tape.modulate(norm, scale, shift, n_tokens);
        let fw = tape.param(store, self.final_w);
        let fb = tape.param(store, self.final_b);
        let out = tape.affine(modded, fw, fb); // [b*n, p*p*out_c]
        tape.unpatchify(out, b, cfg.out_channels, s, cfg.patch)
    }

    /// Plain (untracked) forward pass with input validation; the batch-size-1
    /// convenience entry used by samplers and tests.
    pub fn forward(
        &self,
        store: &ParamStore,
        z_noisy: &ArrayD<f64>,
        z_sar: &ArrayD<f64>,
        t: usize,
        label: Option<u32>,
    ) -> Result<BackboneOutput> {
        let batch = self.forward_batch(
            store,
            &stack_pairs(&[(z_noisy, z_sar)], self.config.in_channels)?,
            &[t],
            &[label],
        )?;
        Ok(batch)
    }

    /// Batched plain forward over pre-concatenated input.
    pub fn forward_batch(
        &self,
        store: &ParamStore,
        x_in: &Array4<f64>,
        t: &[usize],
        labels: &[Option<u32>],
    ) -> Result<BackboneOutput> {
        let cfg = &self.config;
        let (b, c_in, s, s2) = x_in.dim();
        if c_in != cfg.in_channels || s != s2 {
            return Err(Error::Shape(format!(
                "backbone input [{b},{c_in},{s},{s2}], expected [{b},{},s,s]",
                cfg.in_channels
            )));
        }
        if s % cfg.patch != 0 {
            return Err(Error::Shape(format!(
                "spatial size {s} not divisible by patch {}",
                cfg.patch
            )));
        }
        if let Some(count) = cfg.class_count {
            for l in labels.iter().flatten() {
                if *l as usize >= count {
                    return Err(Error::Config(format!(
                        "class label {l} >= class_count {count}"
                    )));
                }
            }
        }
        let mut tape = Tape::new();
        let node = self.forward_tokens(&mut tape, store, x_in, t, labels);
        let value = tape.value(node);
        let out = value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned();
        let c = cfg.latent_channels();
        Ok(match cfg.variant {
            Variant::Standard => BackboneOutput::Standard {
                eps_hat: out.slice(ndarray::s![.., 0..c, .., ..]).to_owned(),
                v_raw: out.slice(ndarray::s![.., c..2 * c, .., ..]).to_owned(),
            },
            Variant::Cold => BackboneOutput::Cold { x0_hat: out },
        })
    }
}

/// Concatenate per-item (noisy, sar) latent pairs along the channel axis.
pub fn stack_pairs(pairs: &[(&ArrayD<f64>, &ArrayD<f64>)], in_channels: usize) -> Result<Array4<f64>> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let shape = first.0.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "latent must be [c,s,s], got {shape:?}"
        )));
    }
    let (c, s) = (shape[0], shape[1]);
    if 2 * c != in_channels {
        return Err(Error::Shape(format!(
            "latent channels {c} do not pair to in_channels {in_channels}"
        )));
    }
    let mut out = Array4::<f64>::zeros((pairs.len(), 2 * c, s, s));
    for (i, (noisy, sar)) in pairs.iter().enumerate() {
        if noisy.shape() != sar.shape() || noisy.shape() != shape {
            return Err(Error::Shape(format!(
                "latent pair {i} shapes {:?} vs {:?}",
                noisy.shape(),
                sar.shape()
            )));
        }
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    out[[i, ch, y, x]] = noisy[[ch, y, x]];
                    out[[i, c + ch, y, x]] = sar[[ch, y, x]];
                }
            }
        }
    }
    Ok(out)
}

/// Raw sinusoidal features for integer timesteps: first half sines, second
/// half cosines, geometric frequency ladder with maximum period 10000.
pub fn timestep_features(t: &[usize]) -> Array2<f64> {
    let half = TIME_FREQ_DIM / 2;
    let mut out = Array2::<f64>::zeros((t.len(), TIME_FREQ_DIM));
    for (row, &tv) in t.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            let arg = tv as f64 * freq;
            out[[row, j]] = arg.sin();
            out[[row, half + j]] = arg.cos();
        }
    }
    out
}

fn sincos_1d(dim: usize, pos: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    for j in 0..half {
        let omega = 1.0 / 10000f64.powf(j as f64 / half as f64);
        v.push((pos * omega).sin());
    }
    for j in 0..half {
        let omega = 1.0 / 10000f64.powf(j as f64 / half as f64);
        v.push((pos * omega).cos());
    }
    v
}

/// Fixed 2-d sin/cos positional table over a `grid x grid` token layout, in
/// row-major token order (first half encodes the row, second half the
/// column).
pub fn pos_embed_2d(grid: usize, dim: usize) -> Array2<f64> {
    assert_eq!(dim % 4, 0, "pos embed needs dim divisible by 4");
    let mut out = Array2::<f64>::zeros((grid * grid, dim));
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            let ye = sincos_1d(dim / 2, gy as f64);
            let xe = sincos_1d(dim / 2, gx as f64);
            for (i, &v) in ye.iter().chain(xe.iter()).enumerate() {
                out[[row, i]] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use sar2rgb_nn::rng;

    fn tiny_config(variant: Variant, class_count: Option<usize>) -> BackboneConfig {
        BackboneConfig::for_variant(variant, 2, 2, 2, 16, 2, class_count)
    }

    fn rand_latent(seed: u64, c: usize, s: usize) -> ArrayD<f64> {
        let mut r = rng::seeded(seed);
        rng::standard_normal(&mut r, &[c, s, s])
    }

    #[test]
    fn desk_param_count_frozen() {
        // depth 4, hidden 128, heads 4, patch 4, identity codec on 3-channel
        // images, standard variant, unconditioned
        let cfg = BackboneConfig::for_variant(Variant::Standard, 3, 4, 4, 128, 4, None);
        assert_eq!(cfg.param_count(), 1_294_560);
        let mut store = ParamStore::new();
        let mut r = rng::seeded(0);
        Backbone::init(cfg.clone(), &mut store, &mut r).unwrap();
        assert_eq!(store.scalar_count(), cfg.param_count());
    }

    #[test]
    fn token_arithmetic() {
        // 32x32 latent with patch 4 -> 64 tokens of p*p*c entries
        assert_eq!((32 / 4) * (32 / 4), 64);
        let cfg = BackboneConfig::for_variant(Variant::Standard, 4, 1, 2, 16, 4, None);
        assert_eq!(cfg.in_channels, 8);
        assert_eq!(4 * 4 * cfg.in_channels, 128);
    }

    #[test]
    fn fresh_backbone_head_is_zero() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(3);
        let model = Backbone::init(tiny_config(Variant::Standard, None), &mut store, &mut r).unwrap();
        for seed in 0..10 {
            let zn = rand_latent(100 + seed, 2, 8);
            let zs = rand_latent(200 + seed, 2, 8);
            let out = model.forward(&store, &zn, &zs, 5, None).unwrap();
            let BackboneOutput::Standard { eps_hat, v_raw } = out else {
                panic!("wrong variant")
            };
            let max = eps_hat
                .iter()
                .chain(v_raw.iter())
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            assert!(max <= 1e-6, "seed {seed}: head output {max}");
        }
    }

    #[test]
    fn forward_deterministic() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(4);
        let model = Backbone::init(tiny_config(Variant::Cold, None), &mut store, &mut r).unwrap();
        // perturb params so the trunk is non-trivial
        for id in store.ids().collect::<Vec<_>>() {
            let mut rr = rng::seeded(77);
            let noise = rng::standard_normal(&mut rr, store.value(id).shape());
            *store.value_mut(id) += &(noise * 0.05);
        }
        let zn = rand_latent(1, 2, 8);
        let zs = rand_latent(2, 2, 8);
        let a = model.forward(&store, &zn, &zs, 3, None).unwrap();
        let b = model.forward(&store, &zn, &zs, 3, None).unwrap();
        let (BackboneOutput::Cold { x0_hat: xa }, BackboneOutput::Cold { x0_hat: xb }) = (a, b)
        else {
            panic!()
        };
        assert_eq!(xa, xb);
    }

    #[test]
    fn class_label_changes_output_with_nonzero_gates() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(5);
        let model =
            Backbone::init(tiny_config(Variant::Standard, Some(3)), &mut store, &mut r).unwrap();
        let mut rr = rng::seeded(99);
        for id in store.ids().collect::<Vec<_>>() {
            let noise = rng::standard_normal(&mut rr, store.value(id).shape());
            *store.value_mut(id) += &(noise * 0.05);
        }
        let zn = rand_latent(6, 2, 8);
        let zs = rand_latent(7, 2, 8);
        let a = model.forward(&store, &zn, &zs, 4, Some(0)).unwrap();
        let b = model.forward(&store, &zn, &zs, 4, Some(1)).unwrap();
        let (BackboneOutput::Standard { eps_hat: ea, .. }, BackboneOutput::Standard { eps_hat: eb, .. }) =
            (a, b)
        else {
            panic!()
        };
        let max_diff = ea
            .iter()
            .zip(eb.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 0.0, "class change had no effect");
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(6);
        let model =
            Backbone::init(tiny_config(Variant::Standard, Some(2)), &mut store, &mut r).unwrap();
        let zn = rand_latent(1, 2, 8);
        let zs = rand_latent(2, 2, 8);
        assert!(model.forward(&store, &zn, &zs, 1, Some(2)).is_err());
    }

    #[test]
    fn timestep_features_contract() {
        let f = timestep_features(&[0]);
        let half = TIME_FREQ_DIM / 2;
        for j in 0..half {
            assert_eq!(f[[0, j]], 0.0); // sin(0)
            assert_eq!(f[[0, half + j]], 1.0); // cos(0)
        }
        let a = timestep_features(&[1]);
        let b = timestep_features(&[1]);
        assert_eq!(a, b);
        let c = timestep_features(&[999]);
        let dist: f64 = a
            .iter()
            .zip(c.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn gradient_check_on_projected_output() {
        // L = sum(forward(...) * fixed random grid); central differences on a
        // sample of parameters, relative error <= 1e-4 at step 1e-4
        let mut store = ParamStore::new();
        let mut r = rng::seeded(8);
        let model = Backbone::init(tiny_config(Variant::Standard, Some(2)), &mut store, &mut r).unwrap();
        let mut rr = rng::seeded(44);
        for id in store.ids().collect::<Vec<_>>() {
            let noise = rng::standard_normal(&mut rr, store.value(id).shape());
            *store.value_mut(id) += &(noise * 0.05);
        }
        let zn = rand_latent(9, 2, 8);
        let zs = rand_latent(10, 2, 8);
        let x_in = stack_pairs(&[(&zn, &zs)], 4).unwrap();
        let mut rg = rng::seeded(55);
        let proj = rng::standard_normal(&mut rg, &[1, 4, 8, 8]);

        let loss = |tape: &mut Tape, store: &ParamStore| -> NodeId {
            let out = model.forward_tokens(tape, store, &x_in, &[3], &[Some(1)]);
            let weighted = tape.mul_const(out, &proj);
            tape.sum_all(weighted)
        };

        let mut tape = Tape::new();
        let root = loss(&mut tape, &store);
        let grads = tape.backward(root, &store);

        let ids: Vec<_> = store.ids().collect();
        let mut pick = rng::seeded(66);
        for k in 0..10 {
            let id = ids[rand::Rng::random_range(&mut pick, 0..ids.len())];
            let len = store.value(id).len();
            let entry = rand::Rng::random_range(&mut pick, 0..len);
            let orig = store.value(id).as_slice().unwrap()[entry];
            let h = 1e-4;
            store.value_mut(id).as_slice_mut().unwrap()[entry] = orig + h;
            let mut tp = Tape::new();
            let rp = loss(&mut tp, &store);
            let fp = tp.scalar(rp);
            store.value_mut(id).as_slice_mut().unwrap()[entry] = orig - h;
            let mut tm = Tape::new();
            let rm = loss(&mut tm, &store);
            let fm = tm.scalar(rm);
            store.value_mut(id).as_slice_mut().unwrap()[entry] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads.get(id).map(|g| g.as_slice().unwrap()[entry]).unwrap_or(0.0);
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            let rel = ((numeric - analytic) / denom).abs();
            // null directions (e.g. the key bias, which softmax cancels) have
            // a true gradient of zero and leave only roundoff in the FD value
            assert!(
                rel <= 1e-4 || (numeric - analytic).abs() < 1e-9,
                "check {k} param {} entry {entry}: rel {rel} ({numeric} vs {analytic})",
                store.name(id)
            );
        }
    }
}
