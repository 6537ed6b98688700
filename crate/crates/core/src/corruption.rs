//! Diffusion corruption algebra: noise schedules, forward noising, loss
//! targets, and conversions between noise prediction and denoised output.
//!
//! All operations here are pure and stateless. Level indices `t` are 1-based
//! (`t in [1, T]`); internal arrays are 0-based. Schedules are constructed in
//! f64 (the VP cumulative product underflows quickly in f32) and cast to f32
//! at the point of use; batch math runs in f32.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corruption parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// Variance preserving: `alpha_t^2 + sigma_t^2 = 1`.
    Vp,
    /// Variance exploding: `alpha_t = 1`, `sigma_t` growing.
    Ve,
}

/// Per-level corruption law: signal coefficient `alpha_t`, noise scale
/// `sigma_t`, per-level rate `beta_t` (VP only), and the ancestral sampling
/// variance `posterior_var_t`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    posterior_var: Vec<f64>,
}

/// A batch of images in `[-1, 1]`, shape `[N, C, H, W]`, with optional class
/// labels.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub data: Array4<f32>,
    pub labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn new(data: Array4<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(ref l) = labels {
            if l.len() != data.shape()[0] {
                return Err(Error::contract(format!(
                    "label count {} does not match batch size {}",
                    l.len(),
                    data.shape()[0]
                )));
            }
        }
        if data.shape()[2] != data.shape()[3] {
            return Err(Error::contract(format!(
                "images must be square, got {}x{}",
                data.shape()[2],
                data.shape()[3]
            )));
        }
        Ok(ImageBatch { data, labels })
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl NoiseSchedule {
    /// Number of levels `T`.
    pub fn levels(&self) -> usize {
        self.alpha.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t < 1 || t > self.levels() {
            return Err(Error::contract(format!(
                "level t={} outside [1, {}]",
                t,
                self.levels()
            )));
        }
        Ok(t - 1)
    }

    pub fn alpha(&self, t: usize) -> Result<f32> {
        Ok(self.alpha[self.idx(t)?] as f32)
    }

    pub fn sigma(&self, t: usize) -> Result<f32> {
        Ok(self.sigma[self.idx(t)?] as f32)
    }

    /// Per-level rate `beta_t`; zero for VE schedules.
    pub fn beta(&self, t: usize) -> Result<f32> {
        let i = self.idx(t)?;
        Ok(if self.beta.is_empty() {
            0.0
        } else {
            self.beta[i] as f32
        })
    }

    /// Ancestral sampling variance at level `t`.
    pub fn posterior_var(&self, t: usize) -> Result<f32> {
        Ok(self.posterior_var[self.idx(t)?] as f32)
    }

    /// Full-precision `alpha_t`, as constructed (before the f32 cast).
    pub fn alpha_f64(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.idx(t)?])
    }

    pub fn sigma_f64(&self, t: usize) -> Result<f64> {
        Ok(self.sigma[self.idx(t)?])
    }

    pub fn check_level(&self, t: usize) -> Result<()> {
        self.idx(t).map(|_| ())
    }
}

/// Builds a variance-preserving schedule with `beta` linearly spaced over
/// `[beta_min, beta_max]` inclusive and `alpha_t = sqrt(prod(1 - beta_i))`.
pub fn make_vp_schedule(t_count: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_count < 1 {
        return Err(Error::parameter("level count T must be >= 1"));
    }
    if !(beta_min > 0.0) || !beta_min.is_finite() {
        return Err(Error::parameter(format!(
            "beta_min must be in (0, 1), got {beta_min}"
        )));
    }
    if !(beta_max < 1.0) || !beta_max.is_finite() {
        return Err(Error::parameter(format!(
            "beta_max must be in (0, 1), got {beta_max}"
        )));
    }
    if beta_min > beta_max {
        return Err(Error::parameter(format!(
            "beta_min {beta_min} exceeds beta_max {beta_max}"
        )));
    }
    let beta: Vec<f64> = if t_count == 1 {
        vec![beta_min]
    } else {
        let step = (beta_max - beta_min) / (t_count - 1) as f64;
        (0..t_count).map(|i| beta_min + step * i as f64).collect()
    };
    let mut alpha = Vec::with_capacity(t_count);
    let mut sigma = Vec::with_capacity(t_count);
    let mut prod = 1.0f64;
    for &b in &beta {
        prod *= 1.0 - b;
        alpha.push(prod.sqrt());
        sigma.push((1.0 - prod).sqrt());
    }
    let posterior_var = beta.clone();
    Ok(NoiseSchedule {
        kind: ScheduleKind::Vp,
        beta,
        alpha,
        sigma,
        posterior_var,
    })
}

/// Builds a variance-exploding schedule: `alpha_t = 1` and `sigma` spaced
/// log-uniformly over `[sigma_min, sigma_max]`. The ancestral transition
/// variance is `sigma_t^2 - sigma_{t-1}^2` with `sigma_0 = 0`.
pub fn make_ve_schedule(t_count: usize, sigma_min: f64, sigma_max: f64) -> Result<NoiseSchedule> {
    if t_count < 1 {
        return Err(Error::parameter("level count T must be >= 1"));
    }
    if !(sigma_min > 0.0) || !sigma_min.is_finite() {
        return Err(Error::parameter(format!(
            "sigma_min must be positive, got {sigma_min}"
        )));
    }
    if !(sigma_max > sigma_min) || !sigma_max.is_finite() {
        return Err(Error::parameter(format!(
            "sigma_max must exceed sigma_min, got {sigma_max}"
        )));
    }
    let sigma: Vec<f64> = if t_count == 1 {
        vec![sigma_min]
    } else {
        let (lo, hi) = (sigma_min.ln(), sigma_max.ln());
        let step = (hi - lo) / (t_count - 1) as f64;
        (0..t_count)
            .map(|i| (lo + step * i as f64).exp())
            .collect()
    };
    let alpha = vec![1.0; t_count];
    let mut posterior_var = Vec::with_capacity(t_count);
    let mut prev_sq = 0.0f64;
    for &s in &sigma {
        posterior_var.push(s * s - prev_sq);
        prev_sq = s * s;
    }
    Ok(NoiseSchedule {
        kind: ScheduleKind::Ve,
        beta: Vec::new(),
        alpha,
        sigma,
        posterior_var,
    })
}

fn check_match(name: &str, a: &Array4<f32>, b: &Array4<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "{name}: shape {:?} does not match {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_levels(t: &[usize], n: usize, sched: &NoiseSchedule) -> Result<()> {
    if t.len() != n {
        return Err(Error::contract(format!(
            "level index count {} does not match batch size {n}",
            t.len()
        )));
    }
    for &ti in t {
        sched.idx(ti)?;
    }
    Ok(())
}

/// Forward corruption: `x_t = alpha_t * x_0 + sigma_t * eps`, per item.
pub fn noise(
    x0: &Array4<f32>,
    t: &[usize],
    eps: &Array4<f32>,
    sched: &NoiseSchedule,
) -> Result<Array4<f32>> {
    check_match("noise", x0, eps)?;
    check_levels(t, x0.shape()[0], sched)?;
    let mut out = x0.clone();
    for (n, &ti) in t.iter().enumerate() {
        let a = sched.alpha(ti)?;
        let s = sched.sigma(ti)?;
        let mut item = out.index_axis_mut(ndarray::Axis(0), n);
        item.zip_mut_with(&eps.index_axis(ndarray::Axis(0), n), |x, &e| {
            *x = a * *x + s * e;
        });
    }
    Ok(out)
}

/// Signal-to-noise ratio `alpha_t^2 / sigma_t^2`, strictly decreasing in `t`.
pub fn snr(sched: &NoiseSchedule, t: usize) -> Result<f64> {
    let a = sched.alpha_f64(t)?;
    let s = sched.sigma_f64(t)?;
    Ok(a * a / (s * s))
}

/// Minimum `alpha_t` accepted when inverting the corruption; below this the
/// division amplifies noise past any useful precision.
pub const ALPHA_DEGENERATE: f32 = 1e-12;

/// Recovers the denoised estimate `(x_t - sigma_t * eps_pred) / alpha_t`.
pub fn denoiser_from_eps(
    x_t: &Array4<f32>,
    eps_pred: &Array4<f32>,
    t: &[usize],
    sched: &NoiseSchedule,
) -> Result<Array4<f32>> {
    check_match("denoiser_from_eps", x_t, eps_pred)?;
    check_levels(t, x_t.shape()[0], sched)?;
    let mut out = x_t.clone();
    for (n, &ti) in t.iter().enumerate() {
        let a = sched.alpha(ti)?;
        let s = sched.sigma(ti)?;
        if a < ALPHA_DEGENERATE {
            return Err(Error::numerical(format!(
                "alpha_t = {a:.3e} at t={ti} is too small to invert the corruption"
            )));
        }
        let mut item = out.index_axis_mut(ndarray::Axis(0), n);
        item.zip_mut_with(&eps_pred.index_axis(ndarray::Axis(0), n), |x, &e| {
            *x = (*x - s * e) / a;
        });
    }
    Ok(out)
}

fn mse(a: &Array4<f32>, b: &Array4<f32>) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = (x - y) as f64;
        acc += d * d;
    }
    acc / a.len() as f64
}

/// Mean squared error between a denoised estimate and the clean target.
pub fn denoise_loss(x0_hat: &Array4<f32>, x0: &Array4<f32>) -> Result<f32> {
    check_match("denoise_loss", x0_hat, x0)?;
    Ok(mse(x0_hat, x0) as f32)
}

/// Mean squared error between predicted and true noise. Same kernel as
/// [`denoise_loss`]; the two differ only in what they are applied to.
pub fn eps_loss(eps_pred: &Array4<f32>, eps: &Array4<f32>) -> Result<f32> {
    check_match("eps_loss", eps_pred, eps)?;
    Ok(mse(eps_pred, eps) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn vp_beta_endpoints() {
        let s = make_vp_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1).unwrap(), 1e-4f64 as f32);
        assert_eq!(s.beta(1000).unwrap(), 0.02f64 as f32);
    }

    #[test]
    fn vp_single_level_collapses() {
        let s = make_vp_schedule(1, 0.02, 0.02).unwrap();
        assert!((s.alpha_f64(1).unwrap() - 0.98f64.sqrt()).abs() < 1e-12);
        assert!((s.sigma_f64(1).unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn vp_terminal_alpha_matches_brute_force_product() {
        let s = make_vp_schedule(1000, 1e-4, 0.02).unwrap();
        // Independent oracle: evaluate the product directly, then sqrt.
        let mut prod = 1.0f64;
        for i in 0..1000usize {
            let b = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod *= 1.0 - b;
        }
        let oracle = prod.sqrt();
        assert!((s.alpha_f64(1000).unwrap() - oracle).abs() < 1e-9);
        assert!((oracle - 6.4e-3).abs() < 2e-4, "oracle={oracle}");
    }

    #[test]
    fn vp_invariants_hold() {
        let s = make_vp_schedule(1000, 1e-4, 0.02).unwrap();
        for t in 1..=1000 {
            let (a, g) = (s.alpha_f64(t).unwrap(), s.sigma_f64(t).unwrap());
            assert!((a * a + g * g - 1.0).abs() < 1e-6, "t={t}");
            // f32 casts stay inside the same budget
            let (a32, g32) = (s.alpha(t).unwrap() as f64, s.sigma(t).unwrap() as f64);
            assert!((a32 * a32 + g32 * g32 - 1.0).abs() < 1e-6, "t={t} (f32)");
            if t > 1 {
                assert!(s.alpha_f64(t).unwrap() < s.alpha_f64(t - 1).unwrap());
                assert!(s.sigma_f64(t).unwrap() > s.sigma_f64(t - 1).unwrap());
            }
        }
    }

    #[test]
    fn vp_rejects_bad_bounds() {
        for (t, lo, hi) in [(1000, 0.0, 0.02), (1000, 1e-4, 1.0), (1000, 0.03, 0.02)] {
            let err = make_vp_schedule(t, lo, hi).unwrap_err();
            assert!(matches!(err, Error::Parameter(_)), "{err}");
        }
        assert!(make_vp_schedule(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn ve_endpoints_and_midpoint() {
        let s = make_ve_schedule(2, 0.01, 100.0).unwrap();
        assert!((s.sigma_f64(1).unwrap() - 0.01).abs() < 1e-12);
        assert!((s.sigma_f64(2).unwrap() - 100.0).abs() < 1e-9);
        // log-uniform midpoint = sqrt(0.01 * 100) = 1
        let s = make_ve_schedule(3, 0.01, 100.0).unwrap();
        assert!((s.sigma_f64(2).unwrap() - 1.0).abs() < 1e-9);
        for t in 1..=3 {
            assert_eq!(s.alpha(t).unwrap(), 1.0);
        }
    }

    #[test]
    fn ve_rejects_bad_bounds() {
        assert!(make_ve_schedule(3, 0.0, 1.0).is_err());
        assert!(make_ve_schedule(3, 1.0, 1.0).is_err());
        assert!(make_ve_schedule(0, 0.01, 1.0).is_err());
    }

    #[test]
    fn noise_zero_eps_and_zero_signal() {
        let s = make_vp_schedule(10, 1e-4, 0.02).unwrap();
        let x0 = randn((2, 3, 4, 4), 1);
        let zeros = Array4::zeros((2, 3, 4, 4));
        let t = vec![3usize, 7];

        let xt = noise(&x0, &t, &zeros, &s).unwrap();
        for (n, &ti) in t.iter().enumerate() {
            let a = s.alpha(ti).unwrap();
            for (y, x) in xt
                .index_axis(ndarray::Axis(0), n)
                .iter()
                .zip(x0.index_axis(ndarray::Axis(0), n).iter())
            {
                assert_eq!(*y, a * *x);
            }
        }

        let eps = randn((2, 3, 4, 4), 2);
        let xt = noise(&zeros, &t, &eps, &s).unwrap();
        for (n, &ti) in t.iter().enumerate() {
            let g = s.sigma(ti).unwrap();
            for (y, e) in xt
                .index_axis(ndarray::Axis(0), n)
                .iter()
                .zip(eps.index_axis(ndarray::Axis(0), n).iter())
            {
                assert_eq!(*y, g * *e);
            }
        }
    }

    #[test]
    fn noise_rejects_bad_inputs() {
        let s = make_vp_schedule(10, 1e-4, 0.02).unwrap();
        let x0 = Array4::<f32>::zeros((2, 3, 4, 4));
        let eps_bad = Array4::<f32>::zeros((2, 3, 4, 5));
        assert!(noise(&x0, &[1, 2], &eps_bad, &s).is_err());
        let eps = Array4::<f32>::zeros((2, 3, 4, 4));
        assert!(noise(&x0, &[1, 11], &eps, &s).is_err());
        assert!(noise(&x0, &[0, 1], &eps, &s).is_err());
        assert!(noise(&x0, &[1], &eps, &s).is_err());
    }

    #[test]
    fn noise_monte_carlo_statistics() {
        // Fixed x0, many eps draws: sample mean ~ alpha_t * x0 within
        // 4*sigma_t/sqrt(n), sample variance ~ sigma_t^2 within 5%.
        let s = make_vp_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = randn((1, 1, 2, 2), 3);
        let t = 60usize;
        let n_draws = 10_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut sums = vec![0.0f64; 4];
        let mut sqs = vec![0.0f64; 4];
        for _ in 0..n_draws {
            let eps = Array4::from_shape_simple_fn((1, 1, 2, 2), || {
                let v: f32 = StandardNormal.sample(&mut rng);
                v
            });
            let xt = noise(&x0, &[t], &eps, &s).unwrap();
            for (i, &v) in xt.iter().enumerate() {
                sums[i] += v as f64;
                sqs[i] += (v as f64) * (v as f64);
            }
        }
        let a = s.alpha_f64(t).unwrap();
        let g = s.sigma_f64(t).unwrap();
        for i in 0..4 {
            let mean = sums[i] / n_draws as f64;
            let var = sqs[i] / n_draws as f64 - mean * mean;
            let expect = a * x0.as_slice().unwrap()[i] as f64;
            assert!(
                (mean - expect).abs() < 4.0 * g / (n_draws as f64).sqrt(),
                "pixel {i}: mean {mean} vs {expect}"
            );
            assert!(
                (var - g * g).abs() < 0.05 * g * g,
                "pixel {i}: var {var} vs {}",
                g * g
            );
        }
    }

    #[test]
    fn snr_values_and_monotonicity() {
        let s = make_vp_schedule(1000, 1e-4, 0.02).unwrap();
        let expect = (1.0 - 1e-4) / 1e-4;
        assert!((snr(&s, 1).unwrap() - expect).abs() / expect < 1e-12);
        for t in 2..=1000 {
            assert!(snr(&s, t).unwrap() < snr(&s, t - 1).unwrap(), "t={t}");
        }
        let v = make_ve_schedule(50, 0.01, 50.0).unwrap();
        for t in 2..=50 {
            assert!(snr(&v, t).unwrap() < snr(&v, t - 1).unwrap(), "t={t}");
        }
        // sigma_t = 1 on a VE schedule gives snr exactly 1
        let v = make_ve_schedule(3, 0.01, 100.0).unwrap();
        assert!((snr(&v, 2).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn denoiser_round_trip_recovers_x0() {
        let s = make_vp_schedule(50, 1e-4, 0.02).unwrap();
        let x0 = randn((2, 3, 4, 4), 7);
        let eps = randn((2, 3, 4, 4), 8);
        let t = vec![5usize, 44];
        let xt = noise(&x0, &t, &eps, &s).unwrap();
        let rec = denoiser_from_eps(&xt, &eps, &t, &s).unwrap();
        for (r, x) in rec.iter().zip(x0.iter()) {
            assert!(
                (r - x).abs() <= 1e-5 * x.abs().max(1.0),
                "recovered {r} vs {x}"
            );
        }
        // eps_pred = 0 collapses to x_t / alpha_t
        let zeros = Array4::zeros((2, 3, 4, 4));
        let d = denoiser_from_eps(&xt, &zeros, &t, &s).unwrap();
        for (n, &ti) in t.iter().enumerate() {
            let a = s.alpha(ti).unwrap();
            for (y, x) in d
                .index_axis(ndarray::Axis(0), n)
                .iter()
                .zip(xt.index_axis(ndarray::Axis(0), n).iter())
            {
                assert_eq!(*y, *x / a);
            }
        }
    }

    #[test]
    fn denoiser_rejects_degenerate_alpha() {
        // A long, aggressive schedule drives alpha below any usable size.
        let s = make_vp_schedule(4000, 0.02, 0.999).unwrap();
        assert!(s.alpha(4000).unwrap() < ALPHA_DEGENERATE);
        let x = Array4::<f32>::zeros((1, 1, 2, 2));
        let err = denoiser_from_eps(&x, &x, &[4000], &s).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn losses_match_two_loop_oracle() {
        let a = randn((2, 3, 4, 4), 11);
        let b = randn((2, 3, 4, 4), 12);
        assert_eq!(eps_loss(&a, &a).unwrap(), 0.0);
        let shifted = &a + 1.0;
        assert!((denoise_loss(&shifted, &a).unwrap() - 1.0).abs() < 1e-6);

        // naive summation oracle, element order independent of the kernel
        let (sa, sb) = (a.as_slice().unwrap(), b.as_slice().unwrap());
        let mut acc = 0.0f64;
        for i in 0..sa.len() {
            for _ in 0..1 {
                let d = (sa[i] - sb[i]) as f64;
                acc += d * d;
            }
        }
        let oracle = (acc / sa.len() as f64) as f32;
        assert!((eps_loss(&a, &b).unwrap() - oracle).abs() < 1e-6);
        assert_eq!(eps_loss(&a, &b).unwrap(), denoise_loss(&a, &b).unwrap());
    }

    #[test]
    fn reweighting_identity() {
        // denoise_loss(D(x_t, e1), D(x_t, e2)) = (sigma/alpha)^2 * eps_loss(e1, e2)
        let s = make_vp_schedule(100, 1e-4, 0.02).unwrap();
        let xt = randn((2, 3, 4, 4), 21);
        let e1 = randn((2, 3, 4, 4), 22);
        let e2 = randn((2, 3, 4, 4), 23);
        for &ti in &[1usize, 30, 100] {
            let t = vec![ti; 2];
            let d1 = denoiser_from_eps(&xt, &e1, &t, &s).unwrap();
            let d2 = denoiser_from_eps(&xt, &e2, &t, &s).unwrap();
            let lhs = denoise_loss(&d1, &d2).unwrap() as f64;
            let ratio = (s.sigma_f64(ti).unwrap() / s.alpha_f64(ti).unwrap()).powi(2);
            let rhs = ratio * eps_loss(&e1, &e2).unwrap() as f64;
            assert!((lhs - rhs).abs() <= 1e-5 * rhs.abs().max(1e-12), "t={ti}");
        }
    }
}
