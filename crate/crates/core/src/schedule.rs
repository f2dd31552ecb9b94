//! Closed-form diffusion constants and the per-step forward/reverse arithmetic.
//!
//! Steps are 1-based: `t` ranges over `1..=T`, with `ᾱ_0 := 1`.
//! Constants are held in `f64` and cast to the tensor element type on use.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    alpha_bars_prev: Vec<f64>,
    sqrt_alpha_bars: Vec<f64>,
    sqrt_one_minus_alpha_bars: Vec<f64>,
    recip_sqrt_alphas: Vec<f64>,
    posterior_variances: Vec<f64>,
    posterior_mean_x0_coef: Vec<f64>,
    posterior_mean_xt_coef: Vec<f64>,
}

impl NoiseSchedule {
    /// `timesteps` evenly spaced variances from `beta_start` to `beta_end`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::param("timesteps", "must be at least 1"));
        }
        if !(beta_start > 0.0) || !beta_start.is_finite() {
            return Err(Error::param("beta_start", format!("{beta_start} is not in (0, 1)")));
        }
        if !(beta_end < 1.0) || !beta_end.is_finite() {
            return Err(Error::param("beta_end", format!("{beta_end} is not in (0, 1)")));
        }
        if beta_start > beta_end {
            return Err(Error::param(
                "beta_start",
                format!("{beta_start} exceeds beta_end {beta_end}"),
            ));
        }
        let betas = if timesteps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (timesteps - 1) as f64;
            (0..timesteps).map(|i| beta_start + span * i as f64).collect()
        };
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut running = 1.0;
        for a in &alphas {
            running *= a;
            alpha_bars.push(running);
        }
        let alpha_bars_prev: Vec<f64> = std::iter::once(1.0)
            .chain(alpha_bars.iter().copied())
            .take(betas.len())
            .collect();
        let posterior_variances = betas
            .iter()
            .zip(&alpha_bars)
            .zip(&alpha_bars_prev)
            .enumerate()
            .map(|(i, ((b, ab), abp))| if i == 0 { *b } else { b * (1.0 - abp) / (1.0 - ab) })
            .collect();
        let posterior_mean_x0_coef = betas
            .iter()
            .zip(&alpha_bars)
            .zip(&alpha_bars_prev)
            .map(|((b, ab), abp)| abp.sqrt() * b / (1.0 - ab))
            .collect();
        let posterior_mean_xt_coef = alphas
            .iter()
            .zip(&alpha_bars)
            .zip(&alpha_bars_prev)
            .map(|((a, ab), abp)| a.sqrt() * (1.0 - abp) / (1.0 - ab))
            .collect();
        Self {
            sqrt_alpha_bars: alpha_bars.iter().map(|v| v.sqrt()).collect(),
            sqrt_one_minus_alpha_bars: alpha_bars.iter().map(|v| (1.0 - v).sqrt()).collect(),
            recip_sqrt_alphas: alphas.iter().map(|v| 1.0 / v.sqrt()).collect(),
            betas,
            alphas,
            alpha_bars,
            alpha_bars_prev,
            posterior_variances,
            posterior_mean_x0_coef,
            posterior_mean_xt_coef,
        }
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.betas.len() {
            return Err(Error::param(
                "t",
                format!("step {t} outside 1..={}", self.betas.len()),
            ));
        }
        Ok(t - 1)
    }

    fn at(&self, v: &[f64], t: usize) -> f64 {
        v[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_variances(&self) -> &[f64] {
        &self.posterior_variances
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.at(&self.betas, t)
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.at(&self.alphas, t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.at(&self.alpha_bars, t)
    }

    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        self.at(&self.alpha_bars_prev, t)
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.at(&self.sqrt_alpha_bars, t)
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.at(&self.sqrt_one_minus_alpha_bars, t)
    }

    pub fn recip_sqrt_alpha(&self, t: usize) -> f64 {
        self.at(&self.recip_sqrt_alphas, t)
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.at(&self.posterior_variances, t)
    }

    /// Coefficients `(c0, ct)` of the posterior mean `c0·x0 + ct·x_t` of `q(x_{t-1} | x_t, x0)`.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        (
            self.at(&self.posterior_mean_x0_coef, t),
            self.at(&self.posterior_mean_xt_coef, t),
        )
    }

    /// `sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·eps` over the whole tensor.
    pub fn q_sample<T: Element>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        let i = self.idx(t)?;
        let (a, b) = (self.sqrt_alpha_bars[i], self.sqrt_one_minus_alpha_bars[i]);
        affine2(x0, a, eps, b)
    }

    /// [`q_sample`](Self::q_sample) with a separate step per leading-axis item.
    pub fn q_sample_batch<T: Element>(
        &self,
        x0: &Tensor<T>,
        ts: &[usize],
        eps: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.per_item(x0, ts, eps, |s, t| Ok((s.sqrt_alpha_bar(t), s.sqrt_one_minus_alpha_bar(t))))
    }

    /// One Markov transition `sqrt(1−β_t)·x_prev + sqrt(β_t)·eps`.
    pub fn forward_step<T: Element>(
        &self,
        x_prev: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let i = self.idx(t)?;
        affine2(x_prev, self.alphas[i].sqrt(), eps, self.betas[i].sqrt())
    }

    /// Mean of the reverse transition given a noise prediction:
    /// `(x_t − β_t/sqrt(1−ᾱ_t)·eps_hat) / sqrt(α_t)`.
    pub fn reverse_step_mean<T: Element>(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        eps_hat: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let i = self.idx(t)?;
        let (a, b) = self.reverse_coefs(i);
        affine2(x_t, a, eps_hat, b)
    }

    pub fn reverse_step_mean_batch<T: Element>(
        &self,
        x_t: &Tensor<T>,
        ts: &[usize],
        eps_hat: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.per_item(x_t, ts, eps_hat, |s, t| Ok(s.reverse_coefs(s.idx(t)?)))
    }

    /// Posterior mean at the clipped clean-image estimate
    /// `clamp((x_t − sqrt(1−ᾱ_t)·eps_hat) / sqrt(ᾱ_t), −1, 1)`.
    ///
    /// Equal to [`reverse_step_mean`](Self::reverse_step_mean) whenever the
    /// estimate already lies in `[−1, 1]`.
    pub fn clipped_reverse_step_mean<T: Element>(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        eps_hat: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let i = self.idx(t)?;
        let x0_hat = affine2(
            x_t,
            1.0 / self.sqrt_alpha_bars[i],
            eps_hat,
            -self.sqrt_one_minus_alpha_bars[i] / self.sqrt_alpha_bars[i],
        )?
        .map(|v| v.max(-T::one()).min(T::one()));
        affine2(&x0_hat, self.posterior_mean_x0_coef[i], x_t, self.posterior_mean_xt_coef[i])
    }

    fn reverse_coefs(&self, i: usize) -> (f64, f64) {
        let r = self.recip_sqrt_alphas[i];
        (r, -r * self.betas[i] / self.sqrt_one_minus_alpha_bars[i])
    }

    /// Log-space interpolation between `β_t` (at `v = 1`) and `β̃_t` (at `v = −1`).
    ///
    /// `v` is clamped to `[−1, 1]`, so the result always lies in `[β̃_t, β_t]`.
    pub fn interpolate_variance<T: Element>(&self, t: usize, v: &Tensor<T>) -> Result<Tensor<T>> {
        let i = self.idx(t)?;
        let (lo, hi) = (self.posterior_variances[i], self.betas[i]);
        Ok(v.map(|x| T::from_f64_lossy(interpolate_variance_value(x.as_f64(), lo, hi))))
    }

    /// Log-variance of the interpolation, with its derivative w.r.t. `v`.
    pub fn interpolate_log_variance_with_grad(&self, t: usize, v: f64) -> (f64, f64) {
        let (lo, hi) = (self.posterior_variance(t).ln(), self.beta(t).ln());
        let logvar = interpolate_log_variance(v, lo, hi);
        let grad = if v > -1.0 && v < 1.0 { 0.5 * (hi - lo) } else { 0.0 };
        (logvar, grad)
    }

    fn per_item<T: Element>(
        &self,
        x: &Tensor<T>,
        ts: &[usize],
        y: &Tensor<T>,
        coefs: impl Fn(&Self, usize) -> Result<(f64, f64)>,
    ) -> Result<Tensor<T>> {
        x.ensure_same_shape(y)?;
        if x.shape().first() != Some(&ts.len()) {
            return Err(Error::Shape(format!(
                "{} steps for leading axis of {:?}",
                ts.len(),
                x.shape()
            )));
        }
        let mut out = Tensor::zeros(x.shape());
        for (n, &t) in ts.iter().enumerate() {
            self.idx(t)?;
            let (a, b) = coefs(self, t)?;
            let (a, b) = (T::from_f64_lossy(a), T::from_f64_lossy(b));
            for ((o, &xv), &yv) in out.item_mut(n).iter_mut().zip(x.item(n)).zip(y.item(n)) {
                *o = a * xv + b * yv;
            }
        }
        Ok(out)
    }
}

fn interpolate_log_variance(v: f64, log_lo: f64, log_hi: f64) -> f64 {
    let frac = (v.clamp(-1.0, 1.0) + 1.0) / 2.0;
    frac * log_hi + (1.0 - frac) * log_lo
}

/// Endpoints return the bounds themselves rather than `exp(ln(·))` of them.
fn interpolate_variance_value(v: f64, lo: f64, hi: f64) -> f64 {
    if v >= 1.0 {
        hi
    } else if v <= -1.0 {
        lo
    } else {
        interpolate_log_variance(v, lo.ln(), hi.ln()).exp()
    }
}

fn affine2<T: Element>(x: &Tensor<T>, a: f64, y: &Tensor<T>, b: f64) -> Result<Tensor<T>> {
    let (a, b) = (T::from_f64_lossy(a), T::from_f64_lossy(b));
    x.zip_map(y, |xv, yv| a * xv + b * yv)
}
