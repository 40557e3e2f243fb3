//! Cold regime: deterministic degradation that blends the RGB latent toward
//! the SAR latent along the shared schedule, a clean-prediction MSE
//! objective, and the two reverse procedures (the naive baseline and the
//! improved sampler that cancels degradation error step by step).

use ndarray::{Array4, ArrayD, Axis};

use sar2rgb_nn::{NodeId, ParamStore, Tape};

use crate::backbone::{Backbone, BackboneOutput, Variant};
use crate::diffusion::standard::{LatentItem, LossDraws, StandardLossTerms};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

/// Blend toward the source: `x_t = sqrt(abar_t) x + sqrt(1 - abar_t) z`,
/// with `abar_0 = 1` so `t = 0` is exactly the identity on `x`.
pub fn degrade(
    x: &ArrayD<f64>,
    z: &ArrayD<f64>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ArrayD<f64>> {
    if x.shape() != z.shape() {
        return Err(Error::Shape(format!(
            "degrade: {:?} vs {:?}",
            x.shape(),
            z.shape()
        )));
    }
    if t > sched.t_steps() {
        return Err(Error::Config(format!(
            "degrade timestep {t} outside 0..={}",
            sched.t_steps()
        )));
    }
    if t == 0 {
        return Ok(x.clone());
    }
    let ab = sched.alpha_bar(t);
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x.mapv(|v| ca * v);
    out.zip_mut_with(z, |o, &zv| *o += cb * zv);
    Ok(out)
}

/// A frozen clean-image estimator `R(x_t, t)` (the network, or an oracle in
/// tests). The SAR latent is supplied alongside because the network consumes
/// it as conditioning channels.
pub trait Restorer {
    fn restore(&self, x_t: &ArrayD<f64>, z: &ArrayD<f64>, t: usize) -> Result<ArrayD<f64>>;
}

impl<F> Restorer for F
where
    F: Fn(&ArrayD<f64>, &ArrayD<f64>, usize) -> Result<ArrayD<f64>>,
{
    fn restore(&self, x_t: &ArrayD<f64>, z: &ArrayD<f64>, t: usize) -> Result<ArrayD<f64>> {
        self(x_t, z, t)
    }
}

/// Checkpoint-backed restorer.
pub struct ModelRestorer<'a> {
    pub model: &'a Backbone,
    pub store: &'a ParamStore,
    pub label: Option<u32>,
}

impl Restorer for ModelRestorer<'_> {
    fn restore(&self, x_t: &ArrayD<f64>, z: &ArrayD<f64>, t: usize) -> Result<ArrayD<f64>> {
        match self.model.forward(self.store, x_t, z, t, self.label)? {
            BackboneOutput::Cold { x0_hat } => Ok(x0_hat
                .index_axis(Axis(0), 0)
                .to_owned()
                .into_dyn()),
            BackboneOutput::Standard { .. } => {
                Err(Error::Config("cold restorer needs a cold-variant backbone".into()))
            }
        }
    }
}

fn clamp_estimate(x: &mut ArrayD<f64>, k: f64) {
    x.mapv_inplace(|v| v.clamp(-k, k));
}

fn check_finite(x: &ArrayD<f64>, t: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "cold sampler state non-finite at t = {t}"
        )));
    }
    Ok(())
}

/// Baseline reverse procedure: re-degrade the estimate to `t - 1` each step.
pub fn naive_cold_sample(
    restorer: &dyn Restorer,
    z: &ArrayD<f64>,
    sched: &NoiseSchedule,
    x0_clamp: f64,
) -> Result<ArrayD<f64>> {
    let mut x = z.clone();
    for t in (1..=sched.t_steps()).rev() {
        let mut x0_hat = restorer.restore(&x, z, t)?;
        clamp_estimate(&mut x0_hat, x0_clamp);
        x = degrade(&x0_hat, z, t - 1, sched)?;
        check_finite(&x, t)?;
    }
    Ok(x)
}

/// One improved reverse step: `x_{t-1} = x_t - D(x0_hat, t) + D(x0_hat, t-1)`.
pub fn improved_step(
    x_t: &ArrayD<f64>,
    x0_hat: &ArrayD<f64>,
    z: &ArrayD<f64>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ArrayD<f64>> {
    let d_t = degrade(x0_hat, z, t, sched)?;
    let d_prev = degrade(x0_hat, z, t - 1, sched)?;
    let mut out = x_t.clone();
    ndarray::Zip::from(&mut out)
        .and(&d_t)
        .and(&d_prev)
        .for_each(|o, &a, &b| *o = *o - a + b);
    Ok(out)
}

/// Improved reverse procedure; fully deterministic (no randomness anywhere).
pub fn improved_cold_sample(
    restorer: &dyn Restorer,
    z: &ArrayD<f64>,
    sched: &NoiseSchedule,
    x0_clamp: f64,
) -> Result<ArrayD<f64>> {
    let mut x = z.clone();
    for t in (1..=sched.t_steps()).rev() {
        let mut x0_hat = restorer.restore(&x, z, t)?;
        clamp_estimate(&mut x0_hat, x0_clamp);
        x = improved_step(&x, &x0_hat, z, t, sched)?;
        check_finite(&x, t)?;
    }
    Ok(x)
}

/// Batched improved sampling with a checkpoint-backed model.
pub fn improved_cold_sample_batch(
    model: &Backbone,
    store: &ParamStore,
    z_sars: &[&ArrayD<f64>],
    labels: &[Option<u32>],
    sched: &NoiseSchedule,
    x0_clamp: f64,
) -> Result<Vec<ArrayD<f64>>> {
    assert_eq!(model.config.variant, Variant::Cold);
    let n = z_sars.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if labels.len() != n {
        return Err(Error::Shape("labels length mismatch".into()));
    }
    let c = model.config.latent_channels();
    let shape = z_sars[0].shape().to_vec();
    let s = shape[1];
    let mut x = Array4::<f64>::zeros((n, c, s, s));
    let mut x_in = Array4::<f64>::zeros((n, 2 * c, s, s));
    for (i, z) in z_sars.iter().enumerate() {
        let zv = z.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        x.index_axis_mut(Axis(0), i).assign(&zv);
        x_in.slice_mut(ndarray::s![i, c..2 * c, .., ..]).assign(&zv);
    }
    for t in (1..=sched.t_steps()).rev() {
        x_in.slice_mut(ndarray::s![.., 0..c, .., ..]).assign(&x);
        let ts = vec![t; n];
        let BackboneOutput::Cold { x0_hat } = model.forward_batch(store, &x_in, &ts, labels)?
        else {
            unreachable!("cold variant checked above")
        };
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i).to_owned().into_dyn();
            let mut est = x0_hat.index_axis(Axis(0), i).to_owned().into_dyn();
            clamp_estimate(&mut est, x0_clamp);
            let next = improved_step(&xi, &est, z_sars[i], t, sched)?;
            check_finite(&next, t)?;
            x.index_axis_mut(Axis(0), i)
                .assign(&next.view().into_dimensionality::<ndarray::Ix3>().unwrap());
        }
    }
    Ok((0..n)
        .map(|i| x.index_axis(Axis(0), i).to_owned().into_dyn())
        .collect())
}

/// MSE between a clean-image prediction node and the true latents.
pub fn cold_loss_from_prediction(
    tape: &mut Tape,
    x0_hat: NodeId,
    x0: &Array4<f64>,
) -> Result<StandardLossTerms> {
    let target = tape.constant(x0.clone().into_dyn());
    let diff = tape.sub(x0_hat, target);
    let sq = tape.mul(diff, diff);
    let node = tape.mean_all(sq);
    let l = tape.scalar(node);
    if !l.is_finite() {
        return Err(Error::Numeric("cold loss non-finite".into()));
    }
    Ok(StandardLossTerms {
        node,
        l_final: l,
        l_mse: l,
        l_vlb: 0.0,
    })
}

/// Record the cold training loss for a batch: degrade each RGB latent to its
/// drawn timestep (the eps draws are unused — the degradation is
/// deterministic), run the restorer and take the MSE to the clean latent.
pub fn cold_training_loss(
    tape: &mut Tape,
    model: &Backbone,
    store: &ParamStore,
    items: &[&LatentItem],
    draws: &LossDraws,
    sched: &NoiseSchedule,
) -> Result<StandardLossTerms> {
    assert_eq!(model.config.variant, Variant::Cold);
    let n = items.len();
    assert_eq!(draws.t.len(), n);
    let c = model.config.latent_channels();
    let s = items[0].rgb.shape()[1];
    let mut x0 = Array4::<f64>::zeros((n, c, s, s));
    let mut x_in = Array4::<f64>::zeros((n, 2 * c, s, s));
    for (i, item) in items.iter().enumerate() {
        let blended = degrade(&item.rgb, &item.sar, draws.t[i], sched)?;
        x0.index_axis_mut(Axis(0), i).assign(
            &item
                .rgb
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap(),
        );
        x_in.slice_mut(ndarray::s![i, 0..c, .., ..]).assign(
            &blended
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap(),
        );
        x_in.slice_mut(ndarray::s![i, c..2 * c, .., ..]).assign(
            &item
                .sar
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap(),
        );
    }
    let labels: Vec<Option<u32>> = items.iter().map(|it| it.label).collect();
    let out = model.forward_tokens(tape, store, &x_in, &draws.t, &labels);
    cold_loss_from_prediction(tape, out, &x0)
}
