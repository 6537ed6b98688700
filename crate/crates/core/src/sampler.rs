//! Ancestral sampling from a trained noise predictor, with optional
//! classifier-guided perturbation of the predicted mean.

use ndarray::Array4;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{DDAENetwork, TapId};
use crate::corruption::{ImageBatch, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::repmetrics::{log_prob_grad, ClassifierHead};

/// Classifier guidance: shift the predicted mean by the scaled gradient of
/// the target class's log-probability under the noise-conditional classifier.
pub struct GuidanceSpec<'a> {
    pub head: &'a ClassifierHead,
    pub tap: TapId,
    pub target_label: usize,
    /// Guidance strength; 0 reproduces unguided sampling exactly.
    pub scale: f64,
    /// Scale the gradient by the sampling variance (default) rather than its
    /// square root.
    pub variance_scaled: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOpts {
    /// Ancestral stepping on variance-exploding schedules is off by default.
    pub allow_ve: bool,
    /// Clamp intermediate states to `[-1, 1]` (final states always are).
    pub clamp_intermediate: bool,
}

impl Default for SampleOpts {
    fn default() -> Self {
        SampleOpts { allow_ve: false, clamp_intermediate: false }
    }
}

fn check_finite(x: &Array4<f32>, t: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!(
            "non-finite sampler state at step t={t}"
        )));
    }
    Ok(())
}

/// One reverse transition `x_t -> x_{t-1}`: the posterior mean is computed
/// from the noise prediction, optionally shifted by guidance, and Gaussian
/// noise with the schedule's sampling variance is added for every step but
/// the last.
pub fn ancestral_step(
    net: &DDAENetwork,
    x_t: &Array4<f32>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
    guidance: Option<&GuidanceSpec>,
    opts: &SampleOpts,
) -> Result<Array4<f32>> {
    sched.check_level(t)?;
    if sched.kind() == ScheduleKind::Ve && !opts.allow_ve {
        return Err(Error::contract(
            "ancestral stepping on a VE schedule requires SampleOpts::allow_ve",
        ));
    }
    let n = x_t.dim().0;
    let t_vec = vec![t; n];
    let eps_pred = net.forward_eps(x_t, &t_vec)?;
    let var = sched.posterior_var(t)?;

    let mut mean = match sched.kind() {
        ScheduleKind::Vp => {
            // mean = (x_t - (beta_t / sigma_t) eps) / sqrt(1 - beta_t)
            let beta = sched.beta(t)?;
            let sigma = sched.sigma(t)?;
            let coef = beta / sigma;
            let inv_sqrt = 1.0 / (1.0 - beta).sqrt();
            let mut m = x_t.clone();
            m.zip_mut_with(&eps_pred, |x, &e| *x = (*x - coef * e) * inv_sqrt);
            m
        }
        ScheduleKind::Ve => {
            // mean = x_t - (sigma_t^2 - sigma_{t-1}^2) / sigma_t * eps
            let sigma = sched.sigma(t)?;
            let coef = var / sigma;
            let mut m = x_t.clone();
            m.zip_mut_with(&eps_pred, |x, &e| *x -= coef * e);
            m
        }
    };

    if let Some(g) = guidance {
        if g.scale != 0.0 {
            let (_, grad) = log_prob_grad(g.head, net, &g.tap, x_t, t, g.target_label)?;
            let s = if g.variance_scaled {
                g.scale * var as f64
            } else {
                g.scale * (var as f64).sqrt()
            };
            mean.zip_mut_with(&grad, |m, &d| *m += (s * d as f64) as f32);
        }
    }

    let mut out = mean;
    if t > 1 {
        let std = var.sqrt();
        for v in out.iter_mut() {
            let z: f32 = StandardNormal.sample(rng);
            *v += std * z;
        }
    }
    if opts.clamp_intermediate && t > 1 {
        out.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    }
    check_finite(&out, t)?;
    Ok(out)
}

/// Draws `n` images by iterating [`ancestral_step`] from pure noise down to
/// `t = 1`. Values are clamped to `[-1, 1]` at the end only.
pub fn sample(
    net: &DDAENetwork,
    sched: &NoiseSchedule,
    n: usize,
    rng: &mut impl Rng,
    guidance: Option<&GuidanceSpec>,
    opts: &SampleOpts,
) -> Result<ImageBatch> {
    if n == 0 {
        return Err(Error::contract("sample: n must be positive"));
    }
    let cfg = net.config();
    let init_std = match sched.kind() {
        ScheduleKind::Vp => 1.0f32,
        ScheduleKind::Ve => sched.sigma(sched.levels())?,
    };
    let mut x = Array4::from_shape_simple_fn(
        (n, cfg.in_channels, cfg.image_size, cfg.image_size),
        || {
            let v: f32 = StandardNormal.sample(rng);
            v * init_std
        },
    );
    for t in (1..=sched.levels()).rev() {
        x = ancestral_step(net, &x, t, sched, rng, guidance, opts)?;
    }
    x.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    let labels = guidance.map(|g| vec![g.target_label; n]);
    ImageBatch::new(x, labels)
}
