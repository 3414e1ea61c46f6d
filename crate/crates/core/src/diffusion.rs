//! Noise schedules, the forward process, training targets, DDIM stepping and
//! guidance combination. Pure functions; coefficients precomputed in f64 and
//! cast to the working precision at use sites.

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use terradiff_autograd::{randn, Element};

use crate::config::{ScheduleConfig, ScheduleKind};
use crate::{Error, Result};

/// What the denoiser is trained to predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    Epsilon,
    Sample,
    Velocity,
}

/// Variance-preserving schedule: `alpha_t^2 + sigma_t^2 = 1` at every index,
/// `t = 0` (nearly) clean, `t = T` (nearly) pure noise.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    num_steps: usize,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

/// Reference discretization the scaled-linear betas are defined against.
const REFERENCE_STEPS: usize = 1000;

fn scaled_linear_alpha_bar(beta_start: f64, beta_end: f64) -> Vec<f64> {
    let n = REFERENCE_STEPS;
    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
    let mut bar = Vec::with_capacity(n + 1);
    bar.push(1.0);
    let mut prod = 1.0;
    for i in 0..n {
        let frac = i as f64 / (n - 1) as f64;
        let beta = (a + frac * (b - a)).powi(2);
        prod *= 1.0 - beta;
        bar.push(prod);
    }
    bar
}

impl NoiseSchedule {
    pub fn build(cfg: &ScheduleConfig) -> Result<Self> {
        if cfg.num_steps == 0 {
            return Err(Error::Config("schedule needs num_steps >= 1".into()));
        }
        let t = cfg.num_steps;
        let alpha_bar: Vec<f64> = match cfg.kind {
            ScheduleKind::ScaledLinear => {
                if !(cfg.beta_start > 0.0 && cfg.beta_end < 1.0 && cfg.beta_start <= cfg.beta_end) {
                    return Err(Error::Config(format!(
                        "invalid beta range [{}, {}]",
                        cfg.beta_start, cfg.beta_end
                    )));
                }
                let reference = scaled_linear_alpha_bar(cfg.beta_start, cfg.beta_end);
                if t == REFERENCE_STEPS {
                    reference
                } else {
                    // resample the reference cumulative product in log space so
                    // endpoint noise levels are preserved for any step count
                    (0..=t)
                        .map(|i| {
                            let u = i as f64 / t as f64 * REFERENCE_STEPS as f64;
                            let lo = u.floor() as usize;
                            let hi = u.ceil() as usize;
                            if lo == hi {
                                reference[lo]
                            } else {
                                let w = u - lo as f64;
                                (reference[lo].ln() * (1.0 - w) + reference[hi].ln() * w).exp()
                            }
                        })
                        .collect()
                }
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |x: f64| (((x + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                let f0 = f(0.0);
                let mut bar = Vec::with_capacity(t + 1);
                bar.push(1.0);
                let mut prod = 1.0;
                for i in 1..=t {
                    let raw = f(i as f64 / t as f64) / f0;
                    let prev = f((i - 1) as f64 / t as f64) / f0;
                    let beta = (1.0 - raw / prev).min(0.999);
                    prod *= 1.0 - beta;
                    bar.push(prod);
                }
                bar
            }
        };
        let alphas: Vec<f64> = alpha_bar.iter().map(|&ab| ab.sqrt()).collect();
        let sigmas: Vec<f64> = alpha_bar.iter().map(|&ab| (1.0 - ab).sqrt()).collect();
        let sched = NoiseSchedule {
            num_steps: t,
            alphas,
            sigmas,
        };
        sched.check_invariants()?;
        Ok(sched)
    }

    fn check_invariants(&self) -> Result<()> {
        for t in 0..=self.num_steps {
            let vp = self.alphas[t].powi(2) + self.sigmas[t].powi(2);
            if (vp - 1.0).abs() > 1e-6 {
                return Err(Error::Numerical(format!("schedule not VP at t={t}: {vp}")));
            }
            if t > 0 && self.alphas[t] > self.alphas[t - 1] {
                return Err(Error::Numerical(format!("alphas increase at t={t}")));
            }
        }
        if !(self.alphas[0] > 0.999 && self.alphas[0] <= 1.0) {
            return Err(Error::Numerical(format!("alpha_0 = {}", self.alphas[0])));
        }
        let st = self.sigmas[self.num_steps];
        if !(st > 0.99 && st <= 1.0) {
            return Err(Error::Numerical(format!("sigma_T = {st}")));
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn alpha_f64(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma_f64(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn alpha<E: Element>(&self, t: usize) -> E {
        E::from_f64(self.alphas[t])
    }

    pub fn sigma<E: Element>(&self, t: usize) -> E {
        E::from_f64(self.sigmas[t])
    }
}

/// Forward process: `alpha_t * z + sigma_t * eps`, elementwise.
pub fn add_noise<E: Element>(
    z: &ArrayD<E>,
    t: usize,
    eps: &ArrayD<E>,
    sched: &NoiseSchedule,
) -> ArrayD<E> {
    assert_eq!(z.shape(), eps.shape(), "add_noise: shape mismatch");
    assert!(t <= sched.num_steps(), "add_noise: t out of range");
    let a: E = sched.alpha(t);
    let s: E = sched.sigma(t);
    ndarray::Zip::from(z).and(eps).map_collect(|&zv, &ev| a * zv + s * ev)
}

/// Training target for the configured prediction mode.
pub fn compute_target<E: Element>(
    z: &ArrayD<E>,
    eps: &ArrayD<E>,
    t: usize,
    mode: PredictionMode,
    sched: &NoiseSchedule,
) -> ArrayD<E> {
    assert_eq!(z.shape(), eps.shape(), "compute_target: shape mismatch");
    match mode {
        PredictionMode::Epsilon => eps.clone(),
        PredictionMode::Sample => z.clone(),
        PredictionMode::Velocity => {
            let a: E = sched.alpha(t);
            let s: E = sched.sigma(t);
            ndarray::Zip::from(z).and(eps).map_collect(|&zv, &ev| a * ev - s * zv)
        }
    }
}

/// Mean squared error over all elements.
pub fn diffusion_loss<E: Element>(pred: &ArrayD<E>, target: &ArrayD<E>) -> E {
    assert_eq!(pred.shape(), target.shape(), "diffusion_loss: shape mismatch");
    let mut acc = E::zero();
    for (p, t) in pred.iter().zip(target.iter()) {
        let d = *t - *p;
        acc = acc + d * d;
    }
    acc / E::from_f64(pred.len() as f64)
}

/// Converts a model prediction into `(z0_hat, eps_hat)` estimates.
pub fn estimate_clean_and_noise<E: Element>(
    z_t: &ArrayD<E>,
    pred: &ArrayD<E>,
    t: usize,
    mode: PredictionMode,
    sched: &NoiseSchedule,
) -> (ArrayD<E>, ArrayD<E>) {
    let a: E = sched.alpha(t);
    let s: E = sched.sigma(t);
    match mode {
        PredictionMode::Epsilon => {
            let z0 = ndarray::Zip::from(z_t)
                .and(pred)
                .map_collect(|&zv, &ev| (zv - s * ev) / a);
            (z0, pred.clone())
        }
        PredictionMode::Sample => {
            let eps = ndarray::Zip::from(z_t)
                .and(pred)
                .map_collect(|&zv, &pv| (zv - a * pv) / s);
            (pred.clone(), eps)
        }
        PredictionMode::Velocity => {
            let z0 = ndarray::Zip::from(z_t)
                .and(pred)
                .map_collect(|&zv, &vv| a * zv - s * vv);
            let eps = ndarray::Zip::from(z_t)
                .and(pred)
                .map_collect(|&zv, &vv| s * zv + a * vv);
            (z0, eps)
        }
    }
}

/// One DDIM update from `t` to `t_prev`. `eta = 0` is deterministic; larger
/// eta blends in the stochastic term (which draws from `rng`).
pub fn ddim_step<E: Element>(
    z_t: &ArrayD<E>,
    pred: &ArrayD<E>,
    t: usize,
    t_prev: usize,
    mode: PredictionMode,
    sched: &NoiseSchedule,
    eta: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> ArrayD<E> {
    assert!(t_prev < t, "ddim_step: t_prev must be < t");
    assert!(t <= sched.num_steps());
    let (z0, eps) = estimate_clean_and_noise(z_t, pred, t, mode, sched);
    let a_prev = sched.alpha_f64(t_prev);
    let s_prev = sched.sigma_f64(t_prev);
    if eta == 0.0 {
        let a = E::from_f64(a_prev);
        let s = E::from_f64(s_prev);
        return ndarray::Zip::from(&z0).and(&eps).map_collect(|&z0v, &ev| a * z0v + s * ev);
    }
    let ab_t = sched.alpha_f64(t).powi(2);
    let ab_prev = a_prev.powi(2);
    let sigma_noise = eta
        * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
        * (1.0 - ab_t / ab_prev).sqrt();
    let dir = (s_prev.powi(2) - sigma_noise.powi(2)).max(0.0).sqrt();
    let a = E::from_f64(a_prev);
    let d = E::from_f64(dir);
    let mut out = ndarray::Zip::from(&z0).and(&eps).map_collect(|&z0v, &ev| a * z0v + d * ev);
    let rng = rng.expect("ddim_step: eta > 0 requires an RNG");
    let noise: ArrayD<E> = randn(z_t.shape(), rng);
    let sn = E::from_f64(sigma_noise);
    ndarray::Zip::from(&mut out).and(&noise).for_each(|o, &n| *o = *o + sn * n);
    out
}

/// Classifier-free guidance: `uncond + w * (cond - uncond)`. The `w = 1` and
/// `w = 0` endpoints return the corresponding branch exactly.
pub fn cfg_combine<E: Element>(uncond: &ArrayD<E>, cond: &ArrayD<E>, w: f64) -> ArrayD<E> {
    assert_eq!(uncond.shape(), cond.shape(), "cfg_combine: shape mismatch");
    if w == 1.0 {
        return cond.clone();
    }
    if w == 0.0 {
        return uncond.clone();
    }
    let we = E::from_f64(w);
    ndarray::Zip::from(uncond)
        .and(cond)
        .map_collect(|&u, &c| u + we * (c - u))
}

/// Uniform-stride DDIM timestep subsequence, descending from `T` and landing
/// exactly on 0. Returns `steps + 1` values.
pub fn ddim_timesteps(num_train_steps: usize, steps: usize) -> Vec<usize> {
    assert!(steps >= 1);
    let steps = steps.min(num_train_steps);
    (0..=steps)
        .map(|i| ((num_train_steps as f64) * (1.0 - i as f64 / steps as f64)).round() as usize)
        .collect()
}
