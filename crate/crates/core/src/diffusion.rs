//! Noise schedule, closed-form noising, x0 prediction, guidance and the
//! deterministic few-step sampler with its inversion.

use serde::{Deserialize, Serialize};

use crate::error::{out_of_range, shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear betas in `[beta_start, beta_end]` over `total` steps.
pub fn build_schedule(total: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if total < 1 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let alphas: Vec<f64> = (0..total)
        .map(|i| {
            let frac = if total == 1 {
                0.0
            } else {
                i as f64 / (total - 1) as f64
            };
            1.0 - (beta_start + frac * (beta_end - beta_start))
        })
        .collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { alphas, alpha_bars })
}

impl NoiseSchedule {
    /// Schedule whose betas are the usual `[1e-4, 0.02]` over 1000 steps
    /// rescaled by `1000 / total`, so a short chain still ends near pure noise.
    pub fn scaled_linear(total: usize) -> Result<Self> {
        let k = 1000.0 / total.max(1) as f64;
        build_schedule(total, (1e-4 * k).min(0.5), (0.02 * k).min(0.999))
    }

    pub fn total(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.total() {
            return Err(out_of_range(
                "time step",
                t as i64,
                format!("1..={}", self.total()),
            ));
        }
        Ok(())
    }

    /// Cumulative product at step `t`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t)?;
        Ok(self.alpha_bars[t - 1])
    }
}

/// CFG coefficient and the few-step subset used for sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub lambda: f32,
    pub steps: Vec<usize>,
}

impl GuidanceConfig {
    pub fn new(lambda: f32, steps: Vec<usize>, total: usize) -> Result<Self> {
        let cfg = Self { lambda, steps };
        cfg.validate(total)?;
        Ok(cfg)
    }

    /// `n` evenly spaced steps ending at `total`.
    pub fn evenly_spaced(lambda: f32, n: usize, total: usize) -> Result<Self> {
        if n == 0 || n > total {
            return Err(Error::Config(format!(
                "cannot pick {n} steps out of {total}"
            )));
        }
        let steps = (1..=n)
            .map(|k| ((k * total) as f64 / n as f64).floor() as usize)
            .collect();
        Self::new(lambda, steps, total)
    }

    pub fn validate(&self, total: usize) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "guidance lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.steps.is_empty() {
            return Err(Error::Config("guidance steps must be non-empty".into()));
        }
        if self.steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "guidance steps must increase strictly: {:?}",
                self.steps
            )));
        }
        if self.steps[0] < 1 || *self.steps.last().unwrap() > total {
            return Err(Error::Config(format!(
                "guidance steps {:?} outside 1..={total}",
                self.steps
            )));
        }
        Ok(())
    }

    /// `(t, t_prev)` pairs from noisiest to cleanest, ending at 0.
    pub fn denoise_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::with_capacity(self.steps.len());
        for (k, &t) in self.steps.iter().enumerate().rev() {
            pairs.push((t, if k == 0 { 0 } else { self.steps[k - 1] }));
        }
        pairs
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape("q_sample", x0, eps)?;
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t)?;
    mix(x0, ab.sqrt(), eps, (1.0 - ab).sqrt())
}

fn mix(a: &Tensor, ka: f64, b: &Tensor, kb: f64) -> Result<Tensor> {
    if a.requires_grad() || b.requires_grad() {
        return a.scale(ka as f32)?.add(&b.scale(kb as f32)?);
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (ka * x as f64 + kb * y as f64) as f32)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `(xt - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)`.
pub fn predict_x0(
    xt: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape("predict_x0", xt, eps_hat)?;
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t)?;
    let inv = 1.0 / ab.sqrt();
    mix(xt, inv, eps_hat, -(1.0 - ab).sqrt() * inv)
}

/// Noise estimate whose implied x0 is `predict_x0` clamped to `[lo, hi]`.
/// Unchanged (up to rounding) wherever the prediction is already in range.
pub fn clamp_eps(
    xt: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    lo: f32,
    hi: f32,
) -> Result<Tensor> {
    if !(lo < hi) {
        return Err(Error::Config(format!("empty clamp range [{lo}, {hi}]")));
    }
    let x0 = predict_x0(xt, t, eps_hat, sched)?.map(|v| v.clamp(lo, hi));
    let ab = sched.alpha_bar(t)?;
    let inv = 1.0 / (1.0 - ab).sqrt();
    mix(xt, inv, &x0, -ab.sqrt() * inv)
}

/// Mean squared error between true and predicted noise.
pub fn recon_loss(eps_true: &Tensor, eps_pred: &Tensor) -> Result<Tensor> {
    same_shape("recon_loss", eps_true, eps_pred)?;
    eps_pred.sub(eps_true)?.mean_square()
}

/// `(1 + lambda) eps_c - lambda eps_uc`.
pub fn cfg_combine(eps_c: &Tensor, eps_uc: &Tensor, lambda: f32) -> Result<Tensor> {
    same_shape("cfg_combine", eps_c, eps_uc)?;
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!(
            "guidance lambda must be >= 0, got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return Ok(eps_c.clone());
    }
    mix(eps_c, 1.0 + lambda as f64, eps_uc, -(lambda as f64))
}

fn check_order(t_prev: usize, t: usize) -> Result<()> {
    if t_prev >= t {
        return Err(Error::InvalidAttr {
            op: "ddim",
            detail: format!("expected t_prev < t, got {t_prev} >= {t}"),
        });
    }
    Ok(())
}

/// Deterministic reverse step from `t` to `t_prev` (`t_prev = 0` is the clean output).
pub fn ddim_step(
    xt: &Tensor,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_order(t_prev, t)?;
    same_shape("ddim_step", xt, eps_hat)?;
    sched.check_step(t)?;
    let ab_t = sched.alpha_bar(t)?;
    let ab_p = sched.alpha_bar(t_prev)?;
    // x_prev = sqrt(ab_p) * (xt - sqrt(1-ab_t) e) / sqrt(ab_t) + sqrt(1-ab_p) e
    let kx = (ab_p / ab_t).sqrt();
    let ke = (1.0 - ab_p).sqrt() - kx * (1.0 - ab_t).sqrt();
    mix(xt, kx, eps_hat, ke)
}

/// Exact inverse of [`ddim_step`] for a fixed `eps_hat`.
pub fn ddim_invert_step(
    xt_prev: &Tensor,
    t_prev: usize,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_order(t_prev, t)?;
    same_shape("ddim_invert_step", xt_prev, eps_hat)?;
    sched.check_step(t)?;
    let ab_t = sched.alpha_bar(t)?;
    let ab_p = sched.alpha_bar(t_prev)?;
    let kx = (ab_t / ab_p).sqrt();
    let ke = (1.0 - ab_t).sqrt() - kx * (1.0 - ab_p).sqrt();
    mix(xt_prev, kx, eps_hat, ke)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, relative_error, Tape};
    use crate::SeedTree;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(seed: u64, n: usize) -> Tensor {
        let mut rng = SeedTree::new(seed).rng("test", 0);
        Tensor::from_vec((0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(1, 0.02, 0.02).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.98).abs() < 1e-12);
    }

    #[test]
    fn thousand_step_product() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        let ab = s.alpha_bar(1000).unwrap();
        assert!(((ab - prod) / prod).abs() < 1e-6);
        assert!((ab - 4.0e-5).abs() < 0.1e-5, "{ab}");
        assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn scaled_short_schedule_reaches_noise() {
        let s = NoiseSchedule::scaled_linear(100).unwrap();
        assert!(s.alpha_bar(100).unwrap() < 1e-3);
        assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(10, 0.0, 0.2).is_err());
        assert!(build_schedule(10, 0.3, 0.2).is_err());
        assert!(build_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_limits_and_errors() {
        let s = NoiseSchedule::scaled_linear(100).unwrap();
        let eps = gaussian(1, 6);
        let zero = Tensor::zeros(&[6]);
        let ab = s.alpha_bar(40).unwrap();
        let out = q_sample(&zero, 40, &eps, &s).unwrap();
        assert_eq!(out, eps.map(|e| ((1.0 - ab).sqrt() * e as f64) as f32));
        assert!(q_sample(&zero, 0, &eps, &s).is_err());
        assert!(q_sample(&zero, 101, &eps, &s).is_err());
        assert!(q_sample(&Tensor::zeros(&[5]), 3, &eps, &s).is_err());
    }

    /// ab_1 = 1 - beta_1 is as close to the noiseless limit as a valid schedule gets.
    #[test]
    fn near_noiseless_limit() {
        let s = build_schedule(2, 1e-12, 1e-12).unwrap();
        let x0 = gaussian(3, 8);
        assert!(
            q_sample(&x0, 1, &gaussian(4, 8), &s)
                .unwrap()
                .max_abs_diff(&x0)
                < 1e-5
        );
        assert!(
            predict_x0(&x0, 1, &gaussian(4, 8), &s)
                .unwrap()
                .max_abs_diff(&x0)
                < 1e-5
        );
    }

    #[test]
    fn q_sample_monte_carlo_moments() {
        let s = NoiseSchedule::scaled_linear(100).unwrap();
        let t = 30;
        let ab = s.alpha_bar(t).unwrap();
        let n = 100_000;
        let x0 = Tensor::full(&[n], 0.7);
        let out = q_sample(&x0, t, &gaussian(9, n), &s).unwrap();
        let mean = out.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = out
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64;
        let sd = (1.0 - ab).sqrt();
        let se_mean = sd / (n as f64).sqrt();
        let se_sd = sd / (2.0 * (n - 1) as f64).sqrt();
        assert!(
            (mean - ab.sqrt() * 0.7).abs() < 3.0 * se_mean,
            "mean {mean}"
        );
        assert!((var.sqrt() - sd).abs() < 3.0 * se_sd, "sd {}", var.sqrt());
    }

    #[test]
    fn predict_x0_zero_noise_rescales() {
        let s = NoiseSchedule::scaled_linear(100).unwrap();
        let xt = gaussian(2, 5);
        let out = predict_x0(&xt, 50, &Tensor::zeros(&[5]), &s).unwrap();
        let k = 1.0 / s.alpha_bar(50).unwrap().sqrt();
        assert!(out.max_abs_diff(&xt.map(|v| (v as f64 * k) as f32)) < 1e-6);
    }

    #[test]
    fn recon_loss_values_and_gradient() {
        let zero = Tensor::zeros(&[2]);
        let one = Tensor::full(&[2], 1.0);
        assert_eq!(recon_loss(&one, &one).unwrap().item(), 0.0);
        assert_eq!(recon_loss(&zero, &one).unwrap().item(), 1.0);
        let truth = gaussian(5, 7);
        let pred = gaussian(6, 7);
        let tape = Tape::new();
        let leaf = tape.leaf(&pred);
        let g = recon_loss(&truth, &leaf)
            .unwrap()
            .backward()
            .unwrap()
            .get(&leaf)
            .unwrap();
        let closed = pred.sub(&truth).unwrap().scale(2.0 / 7.0).unwrap();
        assert!(g.max_abs_diff(&closed) < 1e-6);
        let fd = finite_difference_grad(|p| recon_loss(&truth, p), &pred, 1e-3).unwrap();
        assert!(relative_error(&g, &fd) < 1e-3);
        assert!(recon_loss(&zero, &gaussian(1, 3)).is_err());
    }

    #[test]
    fn cfg_combine_cases() {
        let c = gaussian(1, 4);
        let u = gaussian(2, 4);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
        assert!(cfg_combine(&c, &c, 3.5).unwrap().max_abs_diff(&c) < 1e-6);
        let out = cfg_combine(
            &Tensor::from_vec(vec![2.0]),
            &Tensor::from_vec(vec![1.0]),
            1.0,
        )
        .unwrap();
        assert_eq!(out.data(), &[3.0]);
        assert!(cfg_combine(&c, &u, -1.0).is_err());
    }

    #[test]
    fn ddim_final_step_is_x0_prediction() {
        let s = NoiseSchedule::scaled_linear(100).unwrap();
        let xt = gaussian(1, 6);
        let e = gaussian(2, 6);
        let a = ddim_step(&xt, 33, 0, &e, &s).unwrap();
        assert!(a.max_abs_diff(&predict_x0(&xt, 33, &e, &s).unwrap()) < 1e-6);
        assert!(ddim_step(&xt, 33, 33, &e, &s).is_err());
        assert!(ddim_invert_step(&xt, 40, 33, &e, &s).is_err());
    }

    #[test]
    fn ddim_step_with_true_noise_lands_on_q_sample() {
        let s = NoiseSchedule::scaled_linear(100).unwrap();
        let x0 = gaussian(1, 32);
        let e = gaussian(2, 32);
        let xt = q_sample(&x0, 67, &e, &s).unwrap();
        let xp = ddim_step(&xt, 67, 33, &e, &s).unwrap();
        assert!(xp.max_abs_diff(&q_sample(&x0, 33, &e, &s).unwrap()) <= 1e-4);
    }

    #[test]
    fn invert_with_zero_noise_rescales() {
        let s = NoiseSchedule::scaled_linear(100).unwrap();
        let x = gaussian(1, 3 * 4);
        let x = x.reshape(&[3, 4]).unwrap();
        let out = ddim_invert_step(&x, 20, 60, &Tensor::zeros(&[3, 4]), &s).unwrap();
        let k = (s.alpha_bar(60).unwrap() / s.alpha_bar(20).unwrap()).sqrt();
        assert_eq!(out.shape(), &[3, 4]);
        assert!(out.max_abs_diff(&x.map(|v| (v as f64 * k) as f32)) < 1e-6);
    }

    #[test]
    fn guidance_config_validation() {
        let g = GuidanceConfig::evenly_spaced(1.0, 3, 100).unwrap();
        assert_eq!(g.steps, vec![33, 66, 100]);
        assert_eq!(g.denoise_pairs(), vec![(100, 66), (66, 33), (33, 0)]);
        assert!(GuidanceConfig::new(1.0, vec![], 100).is_err());
        assert!(GuidanceConfig::new(1.0, vec![5, 5], 100).is_err());
        assert!(GuidanceConfig::new(1.0, vec![5, 101], 100).is_err());
        assert!(GuidanceConfig::new(-0.5, vec![5], 100).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn q_sample_predict_x0_round_trip(t in 1usize..=100, seed in any::<u64>()) {
            let s = NoiseSchedule::scaled_linear(100).unwrap();
            let x0 = gaussian(seed, 16);
            let e = gaussian(seed ^ 1, 16);
            let xt = q_sample(&x0, t, &e, &s).unwrap();
            prop_assert!(predict_x0(&xt, t, &e, &s).unwrap().max_abs_diff(&x0) <= 1e-4);
        }

        #[test]
        fn ddim_round_trip(a in 0usize..100, b in 1usize..=100, seed in any::<u64>()) {
            prop_assume!(a < b);
            let s = NoiseSchedule::scaled_linear(100).unwrap();
            let x = gaussian(seed, 16);
            let e = gaussian(seed ^ 7, 16);
            let up = ddim_invert_step(&x, a, b, &e, &s).unwrap();
            let back = ddim_step(&up, b, a, &e, &s).unwrap();
            prop_assert!(back.max_abs_diff(&x) <= 1e-4);
        }

        #[test]
        fn clamp_eps_only_moves_out_of_range_predictions(t in 1usize..=66, seed in any::<u64>()) {
            let s = NoiseSchedule::scaled_linear(100).unwrap();
            let x0 = gaussian(seed, 16);
            let e = gaussian(seed ^ 5, 16);
            let xt = q_sample(&x0, t, &e, &s).unwrap();
            let wide = clamp_eps(&xt, t, &e, &s, -1e3, 1e3).unwrap();
            prop_assert!(wide.max_abs_diff(&e) <= 1e-4);
            let tight = clamp_eps(&xt, t, &e, &s, 0.0, 1.0).unwrap();
            let x0c = predict_x0(&xt, t, &tight, &s).unwrap();
            prop_assert!(x0c.max_abs_diff(&x0.map(|v| v.clamp(0.0, 1.0))) <= 1e-3);
        }

        #[test]
        fn cfg_is_affine_in_lambda(l1 in 0.0f32..2.0, l2 in 0.0f32..2.0, seed in any::<u64>()) {
            let c = gaussian(seed, 8);
            let u = gaussian(seed ^ 3, 8);
            let lhs = cfg_combine(&c, &u, l1).unwrap()
                .add(&cfg_combine(&c, &u, l2).unwrap()).unwrap()
                .sub(&cfg_combine(&c, &u, 0.0).unwrap()).unwrap();
            let rhs = cfg_combine(&c, &u, l1 + l2).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-5);
        }
    }
}
