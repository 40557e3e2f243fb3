//! Diffusion processes over codec latents: the shared noise schedule, the
//! standard DDPM regime (noise prediction, learned variance, ancestral
//! sampling) and the cold blending regime.

pub mod cold;
pub mod standard;

use ndarray::ArrayD;

use crate::error::{Error, Result};

/// Per-timestep schedule quantities, indexed by `t` in `1..=T`. Index 0 is a
/// defined boundary: `alpha_bar(0) = 1`, so the cold degradation at `t = 0`
/// is the identity.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule, endpoints inclusive.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "invalid beta endpoints [{beta_start}, {beta_end}]: need 0 < start <= end < 1"
            )));
        }
        let mut beta = vec![0.0; t_steps + 1];
        for (i, b) in beta.iter_mut().enumerate().skip(1) {
            *b = if t_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (i - 1) as f64 / (t_steps - 1) as f64
            };
        }
        Ok(Self::from_betas(beta))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let t_steps = beta.len() - 1;
        let mut alpha = vec![1.0; t_steps + 1];
        let mut alpha_bar = vec![1.0; t_steps + 1];
        for t in 1..=t_steps {
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        // posterior variance; the t = 1 recurrence divides by zero, so it is
        // pinned to beta_1 by convention
        let mut beta_tilde = vec![0.0; t_steps + 1];
        if t_steps >= 1 {
            beta_tilde[1] = beta[1];
        }
        for t in 2..=t_steps {
            beta_tilde[t] = beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
        }
        NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        }
    }

    /// Schedule from explicit cumulative retention values `alpha_bar[1..=T]`
    /// (strictly decreasing, in `[0, 1)`). Allows a terminal value of exactly
    /// zero, which the linear constructor cannot reach; used by the cold
    /// sampler's exactness tests.
    pub fn from_alpha_bar(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let mut prev = 1.0;
        for (i, &v) in values.iter().enumerate() {
            if !(0.0..1.0).contains(&v) || v >= prev {
                return Err(Error::Config(format!(
                    "alpha_bar[{}] = {v} must be strictly decreasing within [0, 1)",
                    i + 1
                )));
            }
            prev = v;
        }
        let mut beta = vec![0.0; values.len() + 1];
        let mut prev = 1.0;
        for (t, &v) in values.iter().enumerate() {
            beta[t + 1] = 1.0 - v / prev;
            prev = v;
        }
        Ok(Self::from_betas(beta))
    }

    pub fn t_steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_steps()).contains(&t), "beta({t}) out of range");
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!((1..=self.t_steps()).contains(&t), "alpha({t}) out of range");
        self.alpha[t]
    }

    /// Cumulative retention; defined for `t = 0` as exactly 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_steps(), "alpha_bar({t}) out of range");
        self.alpha_bar[t]
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        assert!(
            (1..=self.t_steps()).contains(&t),
            "beta_tilde({t}) out of range"
        );
        self.beta_tilde[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_steps() {
            return Err(Error::Config(format!(
                "timestep {t} outside 1..={}",
                self.t_steps()
            )));
        }
        Ok(())
    }
}

/// Convenience constructor mirroring the config defaults (linear schedule).
pub fn make_linear_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(t_steps, beta_start, beta_end)
}

fn check_same_shape(a: &ArrayD<f64>, b: &ArrayD<f64>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Forward noising: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(
    x0: &ArrayD<f64>,
    t: usize,
    eps: &ArrayD<f64>,
    sched: &NoiseSchedule,
) -> Result<ArrayD<f64>> {
    sched.check_t(t)?;
    check_same_shape(x0, eps, "q_sample x0 vs eps")?;
    let ab = sched.alpha_bar(t);
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x0.mapv(|v| ca * v);
    out.zip_mut_with(eps, |o, &e| *o += cb * e);
    Ok(out)
}

/// Algebraic inverse of [`q_sample`] given a noise estimate, clamped to
/// `[-clamp, clamp]`.
pub fn predict_x0_from_eps(
    x_t: &ArrayD<f64>,
    t: usize,
    eps_hat: &ArrayD<f64>,
    sched: &NoiseSchedule,
    clamp: f64,
) -> Result<ArrayD<f64>> {
    sched.check_t(t)?;
    check_same_shape(x_t, eps_hat, "predict_x0 x_t vs eps_hat")?;
    let ab = sched.alpha_bar(t);
    let inv_sa = 1.0 / ab.sqrt();
    let cb = (1.0 - ab).sqrt();
    let mut out = x_t.clone();
    out.zip_mut_with(eps_hat, |o, &e| {
        *o = ((*o - cb * e) * inv_sa).clamp(-clamp, clamp);
    });
    Ok(out)
}

/// Mean of the forward posterior `q(x_{t-1} | x_t, x0)`.
pub fn posterior_mean(
    x0: &ArrayD<f64>,
    x_t: &ArrayD<f64>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ArrayD<f64>> {
    sched.check_t(t)?;
    check_same_shape(x0, x_t, "posterior_mean x0 vs x_t")?;
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let coef0 = ab_prev.sqrt() * sched.beta(t) / (1.0 - ab_t);
    let coef_t = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let mut out = x0.mapv(|v| coef0 * v);
    out.zip_mut_with(x_t, |o, &x| *o += coef_t * x);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn linear_schedule_small_cases() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);

        let s2 = make_linear_schedule(2, 0.1, 0.2).unwrap();
        assert!((s2.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s2.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_matches_brute_force_product() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        // independent recomputation of all 1000 betas and their product
        let mut prod = 1.0f64;
        for t in 1..=1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        let rel = ((s.alpha_bar(1000) - prod) / prod).abs();
        assert!(rel < 1e-12, "rel err {rel}");
        assert!((prod - 4.04e-5).abs() < 0.02e-5, "expected ~4.04e-5, got {prod}");
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn beta_tilde_convention_and_recurrence() {
        let s = make_linear_schedule(10, 1e-3, 0.2).unwrap();
        assert_eq!(s.beta_tilde(1), s.beta(1));
        for t in 2..=10 {
            let expect = s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t));
            assert!((s.beta_tilde(t) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_endpoints() {
        assert!(make_linear_schedule(10, 0.0, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_linear_schedule(10, 1e-4, 1.0).is_err());
        assert!(make_linear_schedule(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn from_alpha_bar_reaches_zero() {
        let s = NoiseSchedule::from_alpha_bar(&[0.75, 0.5, 0.25, 0.0]).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.alpha_bar(4), 0.0);
        // betas reproduce the requested cumulative products
        for (t, expect) in [(1, 0.75), (2, 0.5), (3, 0.25), (4, 0.0)] {
            assert!((s.alpha_bar(t) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn q_sample_degenerate_cases() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = ndarray::ArrayD::from_elem(IxDyn(&[2, 2]), 0.5);
        let zeros = ndarray::ArrayD::zeros(IxDyn(&[2, 2]));
        let t = 40;

        let xt = q_sample(&x0, t, &zeros, &s).unwrap();
        let expect = s.alpha_bar(t).sqrt() * 0.5;
        assert!(xt.iter().all(|&v| (v - expect).abs() < 1e-15));

        let eps = ndarray::ArrayD::from_elem(IxDyn(&[2, 2]), 2.0);
        let xt = q_sample(&zeros, t, &eps, &s).unwrap();
        let expect = (1.0 - s.alpha_bar(t)).sqrt() * 2.0;
        assert!(xt.iter().all(|&v| (v - expect).abs() < 1e-15));

        assert!(q_sample(&x0, 0, &zeros, &s).is_err());
        assert!(q_sample(&x0, 101, &zeros, &s).is_err());
    }

    #[test]
    fn predict_x0_roundtrip() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = sar2rgb_nn::rng::seeded(5);
        let x0 = sar2rgb_nn::rng::standard_normal(&mut rng, &[3, 4, 4]).mapv(|v| 0.5 * v);
        let eps = sar2rgb_nn::rng::standard_normal(&mut rng, &[3, 4, 4]);
        for t in [1, 17, 500, 1000] {
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let rec = predict_x0_from_eps(&xt, t, &eps, &s, 1e9).unwrap();
            let max_err = rec
                .iter()
                .zip(x0.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_err <= 1e-6, "t={t} max err {max_err}");
        }
        // eps_hat = 0 -> x_t / sqrt(abar)
        let xt = q_sample(&x0, 10, &eps, &s).unwrap();
        let zero = ndarray::ArrayD::zeros(xt.raw_dim());
        let rec = predict_x0_from_eps(&xt, 10, &zero, &s, 1e9).unwrap();
        let expect = xt.mapv(|v| v / s.alpha_bar(10).sqrt());
        assert!(rec.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn q_sample_monte_carlo_mean() {
        // per-pixel sample mean within 4 sigma of sqrt(abar_t) x0
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let t = 300;
        let n = 100_000usize;
        let x0 = ndarray::ArrayD::from_elem(IxDyn(&[2, 2]), 0.3);
        let mut rng = sar2rgb_nn::rng::seeded(11);
        let mut acc = ndarray::ArrayD::<f64>::zeros(IxDyn(&[2, 2]));
        for _ in 0..n {
            let eps = sar2rgb_nn::rng::standard_normal(&mut rng, &[2, 2]);
            acc += &q_sample(&x0, t, &eps, &s).unwrap();
        }
        acc.mapv_inplace(|v| v / n as f64);
        let expect = s.alpha_bar(t).sqrt() * 0.3;
        let band = 4.0 * ((1.0 - s.alpha_bar(t)) / n as f64).sqrt();
        for &m in acc.iter() {
            assert!((m - expect).abs() < band, "mean {m} expect {expect} band {band}");
        }
    }
}
