//! Hybrid objective: noise-prediction MSE plus a variational-bound term that
//! trains the variance logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Element, Tensor};
use crate::schedule::NoiseSchedule;
use crate::unet::DenoiserOutput;

/// Half-width of one 8-bit intensity bin on the `[-1, 1]` scale.
const BIN_HALF_WIDTH: f64 = 1.0 / 255.0;
/// Inputs beyond this magnitude fall in a tail bin extending to infinity.
const TAIL_EDGE: f64 = 0.999;
const MIN_MASS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_simple: f64,
    pub l_vlb: f64,
    pub lambda_vlb: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn new(l_simple: f64, l_vlb: f64, lambda_vlb: f64) -> Self {
        Self {
            l_simple,
            l_vlb,
            lambda_vlb,
            total: l_simple + lambda_vlb * l_vlb,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_simple.is_finite() && self.l_vlb.is_finite() && self.total.is_finite()
    }
}

/// Mean of `(eps − eps_hat)²` over all elements.
pub fn l2_eps_loss<T: Element>(eps: &Tensor<T>, eps_hat: &Tensor<T>) -> Result<f64> {
    eps.ensure_same_shape(eps_hat)?;
    if eps.is_empty() {
        return Err(Error::Shape("empty tensors".into()));
    }
    let sum: f64 = eps
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(sum / eps.len() as f64)
}

fn kl_scalar(mu1: f64, var1: f64, mu2: f64, var2: f64) -> f64 {
    0.5 * ((var2 / var1).ln() + (var1 + (mu1 - mu2).powi(2)) / var2 - 1.0)
}

/// Elementwise `KL(N(mu1, var1) ‖ N(mu2, var2))` in nats.
pub fn gaussian_kl<T: Element>(
    mu1: &Tensor<T>,
    var1: &Tensor<T>,
    mu2: &Tensor<T>,
    var2: &Tensor<T>,
) -> Result<Tensor<T>> {
    for other in [var1, mu2, var2] {
        mu1.ensure_same_shape(other)?;
    }
    for (name, var) in [("var1", var1), ("var2", var2)] {
        if let Some(v) = var.data().iter().find(|v| !(v.as_f64() > 0.0)) {
            return Err(Error::Domain(format!("{name} contains nonpositive variance {}", v.as_f64())));
        }
    }
    let data = (0..mu1.len())
        .map(|i| {
            let f = |t: &Tensor<T>| t.data()[i].as_f64();
            T::from_f64_lossy(kl_scalar(f(mu1), f(var1), f(mu2), f(var2)))
        })
        .collect();
    Tensor::from_vec(mu1.shape(), data)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `Φ(z)`, accurate in the lower tail.
fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Negative log of the probability mass a Gaussian puts on `x`'s 8-bit bin,
/// with the outermost bins extended to ±∞. Returns the value and its
/// derivative w.r.t. the log standard deviation.
pub fn discretized_gaussian_nll(x: f64, mean: f64, log_scale: f64) -> (f64, f64) {
    let inv_std = (-log_scale).exp();
    let centered = x - mean;
    let plus = inv_std * (centered + BIN_HALF_WIDTH);
    let minus = inv_std * (centered - BIN_HALF_WIDTH);
    // d/ds Φ(e^{-s}·a) = −φ(z)·z with z = e^{-s}·a
    let (mass, dmass) = if x < -TAIL_EDGE {
        (std_normal_cdf(plus), -std_normal_pdf(plus) * plus)
    } else if x > TAIL_EDGE {
        (std_normal_cdf(-minus), std_normal_pdf(minus) * minus)
    } else {
        (
            std_normal_cdf(plus) - std_normal_cdf(minus),
            -std_normal_pdf(plus) * plus + std_normal_pdf(minus) * minus,
        )
    };
    if mass > MIN_MASS {
        (-mass.ln(), -dmass / mass)
    } else {
        (-MIN_MASS.ln(), 0.0)
    }
}

/// Per-element bound term and its derivative w.r.t. `v`.
///
/// `mean_eps` fixes the model mean; it receives no gradient.
#[allow(clippy::too_many_arguments)]
fn vlb_element(
    schedule: &NoiseSchedule,
    t: usize,
    x0: f64,
    x_t: f64,
    mean_eps: f64,
    v: f64,
) -> (f64, f64) {
    let (logvar, dlogvar_dv) = schedule.interpolate_log_variance_with_grad(t, v);
    let r = schedule.recip_sqrt_alpha(t);
    let model_mean = r * (x_t - schedule.beta(t) / schedule.sqrt_one_minus_alpha_bar(t) * mean_eps);
    if t == 1 {
        let (nll, dnll_ds) = discretized_gaussian_nll(x0, model_mean, 0.5 * logvar);
        return (nll, 0.5 * dnll_ds * dlogvar_dv);
    }
    let (c0, ct) = schedule.posterior_mean_coefs(t);
    let true_mean = c0 * x0 + ct * x_t;
    let true_var = schedule.posterior_variance(t);
    let var = logvar.exp();
    let kl = 0.5 * (logvar - true_var.ln() + (true_var + (true_mean - model_mean).powi(2)) / var - 1.0);
    let dkl_dlogvar = 0.5 * (1.0 - (true_var + (true_mean - model_mean).powi(2)) / var);
    (kl, dkl_dlogvar * dlogvar_dv)
}

fn check_batch<T: Element>(x0: &Tensor<T>, t: &[usize], others: &[&Tensor<T>], schedule: &NoiseSchedule) -> Result<()> {
    for o in others {
        x0.ensure_same_shape(o)?;
    }
    if x0.shape().first() != Some(&t.len()) || x0.is_empty() {
        return Err(Error::Shape(format!("{} steps for batch of shape {:?}", t.len(), x0.shape())));
    }
    if let Some(&bad) = t.iter().find(|&&s| s == 0 || s > schedule.timesteps()) {
        return Err(Error::param("t", format!("{bad} outside 1..={}", schedule.timesteps())));
    }
    Ok(())
}

/// Bound term averaged over pixels and batch, with `∂/∂v` per element.
fn vlb_with_grad<T: Element>(
    schedule: &NoiseSchedule,
    x0: &Tensor<T>,
    x_t: &Tensor<T>,
    t: &[usize],
    mean_eps: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(f64, Vec<f64>)> {
    check_batch(x0, t, &[x_t, mean_eps, v], schedule)?;
    let n = x0.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(x0.len());
    for (item, &step) in t.iter().enumerate() {
        let parts = (x0.item(item), x_t.item(item), mean_eps.item(item), v.item(item));
        for i in 0..parts.0.len() {
            let (term, d) = vlb_element(
                schedule,
                step,
                parts.0[i].as_f64(),
                parts.1[i].as_f64(),
                parts.2[i].as_f64(),
                parts.3[i].as_f64(),
            );
            total += term;
            grad.push(d / n);
        }
    }
    Ok((total / n, grad))
}

/// KL between the true posterior and the model's reverse transition for
/// `t > 1`, and the discretized likelihood of `x0` at `t = 1`; nats per
/// pixel, averaged over the batch.
pub fn vlb_term<T: Element>(
    schedule: &NoiseSchedule,
    x0: &Tensor<T>,
    x_t: &Tensor<T>,
    t: &[usize],
    out: &DenoiserOutput<T>,
) -> Result<f64> {
    Ok(vlb_with_grad(schedule, x0, x_t, t, &out.eps_hat, &out.v)?.0)
}

/// Loss terms for a batch noised as `x_t = q_sample(x0, t, eps)`.
pub fn hybrid_loss<T: Element>(
    schedule: &NoiseSchedule,
    x0: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    out: &DenoiserOutput<T>,
    lambda_vlb: f64,
) -> Result<LossTerms> {
    Ok(hybrid_loss_with_grad(schedule, x0, t, eps, out, lambda_vlb)?.0)
}

/// [`hybrid_loss`] plus the gradient of `total` w.r.t. the network outputs.
///
/// The bound term sees the predicted noise as a constant, so `eps_hat`
/// receives gradient only from the MSE and `v` only from the bound.
pub fn hybrid_loss_with_grad<T: Element>(
    schedule: &NoiseSchedule,
    x0: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    out: &DenoiserOutput<T>,
    lambda_vlb: f64,
) -> Result<(LossTerms, DenoiserOutput<T>)> {
    hybrid_loss_with_frozen_mean(schedule, x0, t, eps, out, &out.eps_hat, lambda_vlb)
}

/// The objective whose gradient [`hybrid_loss_with_grad`] returns, with the
/// bound's model mean computed from `mean_eps` instead of `out.eps_hat`.
/// Finite-difference checks hold `mean_eps` fixed while perturbing the network.
pub fn hybrid_loss_with_frozen_mean<T: Element>(
    schedule: &NoiseSchedule,
    x0: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    out: &DenoiserOutput<T>,
    mean_eps: &Tensor<T>,
    lambda_vlb: f64,
) -> Result<(LossTerms, DenoiserOutput<T>)> {
    if !(lambda_vlb >= 0.0) {
        return Err(Error::param("lambda_vlb", format!("{lambda_vlb} must be nonnegative")));
    }
    check_batch(x0, t, &[eps, &out.eps_hat, &out.v, mean_eps], schedule)?;
    let x_t = schedule.q_sample_batch(x0, t, eps)?;
    let l_simple = l2_eps_loss(eps, &out.eps_hat)?;
    let (l_vlb, dv) = vlb_with_grad(schedule, x0, &x_t, t, mean_eps, &out.v)?;
    let n = eps.len() as f64;
    let d_eps = eps
        .data()
        .iter()
        .zip(out.eps_hat.data())
        .map(|(e, h)| T::from_f64_lossy(2.0 * (h.as_f64() - e.as_f64()) / n))
        .collect();
    let d_v = dv.into_iter().map(|d| T::from_f64_lossy(lambda_vlb * d)).collect();
    let grad = DenoiserOutput {
        eps_hat: Tensor::from_vec(eps.shape(), d_eps)?,
        v: Tensor::from_vec(eps.shape(), d_v)?,
    };
    Ok((LossTerms::new(l_simple, l_vlb, lambda_vlb), grad))
}
