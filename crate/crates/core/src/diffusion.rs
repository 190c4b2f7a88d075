//! Forward kernels and the Gaussian posterior of the residual-shifting chain.
//!
//! All coefficients are evaluated in `f64`; images of either precision are
//! promoted per element.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scheduler::Schedule;
use crate::tensor::TensorImage;

/// Aligned HR/LR pair at equal size with the cached residual `e₀ = lr − hr`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair<S> {
    hr: TensorImage<S>,
    lr: TensorImage<S>,
    residual: TensorImage<S>,
}

impl<S: Scalar> ImagePair<S> {
    pub fn new(hr: TensorImage<S>, lr: TensorImage<S>) -> Result<Self> {
        let residual = residual(&hr, &lr)?;
        Ok(ImagePair { hr, lr, residual })
    }

    pub fn hr(&self) -> &TensorImage<S> {
        &self.hr
    }

    pub fn lr(&self) -> &TensorImage<S> {
        &self.lr
    }

    pub fn residual(&self) -> &TensorImage<S> {
        &self.residual
    }

    pub fn cast<T: Scalar>(&self) -> ImagePair<T> {
        ImagePair {
            hr: self.hr.cast(),
            lr: self.lr.cast(),
            residual: self.residual.cast(),
        }
    }
}

/// Isotropic Gaussian: `N(mean, variance·I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams<S> {
    pub mean: TensorImage<S>,
    pub variance: f64,
}

pub fn residual<S: Scalar>(hr: &TensorImage<S>, lr: &TensorImage<S>) -> Result<TensorImage<S>> {
    lr.zip_map(hr, |l, h| l - h)
}

/// Affine combination `a·x + b·y + c·z` evaluated in `f64`.
fn affine3<S: Scalar>(
    x: &TensorImage<S>,
    a: f64,
    y: &TensorImage<S>,
    b: f64,
    z: &TensorImage<S>,
    c: f64,
    what: &str,
) -> Result<TensorImage<S>> {
    x.check_same_shape(y, what)?;
    x.check_same_shape(z, what)?;
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(z.data())
        .map(|((&xv, &yv), &zv)| S::lit(a * xv.as_f64() + b * yv.as_f64() + c * zv.as_f64()))
        .collect::<Vec<_>>();
    let (ch, h, w) = x.dims();
    let out = TensorImage::from_raw(h, w, ch, data);
    if !out.all_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(out)
}

/// One forward transition: `x_t = x_{t−1} + α_t·e₀ + √(γ²α_t)·ε`.
pub fn forward_step<S: Scalar>(
    x_prev: &TensorImage<S>,
    e0: &TensorImage<S>,
    t: usize,
    schedule: &Schedule,
    noise: &TensorImage<S>,
) -> Result<TensorImage<S>> {
    schedule.check_step(t)?;
    let alpha = schedule.alpha(t);
    let gamma = schedule.gamma();
    affine3(
        x_prev,
        1.0,
        e0,
        alpha,
        noise,
        (gamma * gamma * alpha).sqrt(),
        "forward_step",
    )
}

/// Closed-form marginal sample: `x_t = hr + β_t·e₀ + γ√β_t·ε`.
pub fn forward_marginal<S: Scalar>(
    hr: &TensorImage<S>,
    e0: &TensorImage<S>,
    t: usize,
    schedule: &Schedule,
    noise: &TensorImage<S>,
) -> Result<TensorImage<S>> {
    schedule.check_step(t)?;
    let beta = schedule.beta(t);
    affine3(
        hr,
        1.0,
        e0,
        beta,
        noise,
        schedule.gamma() * beta.sqrt(),
        "forward_marginal",
    )
}

/// Parameters of `q(x_t | hr, lr)`: mean `hr + β_t·e₀`, variance `γ²β_t`.
pub fn marginal_params<S: Scalar>(
    hr: &TensorImage<S>,
    e0: &TensorImage<S>,
    t: usize,
    schedule: &Schedule,
) -> Result<GaussianParams<S>> {
    schedule.check_step(t)?;
    let beta = schedule.beta(t);
    let mean = hr.zip_map(e0, |h, e| S::lit(h.as_f64() + beta * e.as_f64()))?;
    let gamma = schedule.gamma();
    Ok(GaussianParams {
        mean,
        variance: gamma * gamma * beta,
    })
}

fn check_betas(beta_t: f64, beta_prev: f64) -> Result<()> {
    if !(0.0 <= beta_prev && beta_prev < beta_t) {
        return Err(Error::arg(format!(
            "posterior needs 0 <= beta_prev < beta_t, got beta_prev={beta_prev} beta_t={beta_t}"
        )));
    }
    Ok(())
}

/// Posterior `q(x_prev | x_t, x̂₀)` for any pair of levels `β_prev < β_t`.
///
/// Mean `(β_prev/β_t)·x_t + (Δβ/β_t)·x̂₀`, variance `γ²·Δβ·β_prev/β_t` with
/// `Δβ = β_t − β_prev`. With consecutive training steps `Δβ = α_t`.
pub fn posterior_params<S: Scalar>(
    x_t: &TensorImage<S>,
    x0_hat: &TensorImage<S>,
    beta_t: f64,
    beta_prev: f64,
    gamma: f64,
) -> Result<GaussianParams<S>> {
    check_betas(beta_t, beta_prev)?;
    let delta = beta_t - beta_prev;
    let keep = beta_prev / beta_t;
    let take = delta / beta_t;
    let mean = x_t.zip_map(x0_hat, |xt, x0| {
        S::lit(keep * xt.as_f64() + take * x0.as_f64())
    })?;
    Ok(GaussianParams {
        mean,
        variance: gamma * gamma * delta * beta_prev / beta_t,
    })
}

/// One ancestral step: posterior mean plus `√variance · ε`.
pub fn reverse_step<S: Scalar>(
    x_t: &TensorImage<S>,
    x0_hat: &TensorImage<S>,
    beta_t: f64,
    beta_prev: f64,
    gamma: f64,
    noise: &TensorImage<S>,
) -> Result<TensorImage<S>> {
    let post = posterior_params(x_t, x0_hat, beta_t, beta_prev, gamma)?;
    post.mean.check_same_shape(noise, "reverse_step noise")?;
    let std = post.variance.sqrt();
    if std == 0.0 {
        return Ok(post.mean);
    }
    post.mean
        .zip_map(noise, |m, n| S::lit(m.as_f64() + std * n.as_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_image, stream_rng};
    use crate::scheduler::{build_schedule, ScheduleConfig};
    use proptest::prelude::*;

    fn px(v: f64) -> TensorImage<f64> {
        TensorImage::filled(1, 1, v)
    }

    fn schedule() -> Schedule {
        build_schedule(&ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn residual_examples() {
        let hr = TensorImage::<f64>::from_fn(3, 3, |y, x| (y * 3 + x) as f64 * 0.1);
        assert!(residual(&hr, &hr).unwrap().data().iter().all(|&v| v == 0.0));
        let ones = residual(&TensorImage::zeros(2, 2), &TensorImage::filled(2, 2, 1.0)).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));
        let r = residual(&px(0.3), &px(0.8)).unwrap();
        assert!((r.data()[0] - 0.5).abs() < 1e-15);
        assert!(residual(&px(0.0), &TensorImage::zeros(2, 1)).is_err());
    }

    #[test]
    fn forward_step_by_hand() {
        // alpha_1 = 0.04, gamma = 2: 0.04 + 0.4 * 0.5
        let custom = Schedule::from_betas(&[0.04, 0.5, 0.9], 2.0).unwrap();
        let out = forward_step(&px(0.0), &px(1.0), 1, &custom, &px(0.5)).unwrap();
        assert!((out.data()[0] - 0.24).abs() < 1e-15);

        let s = schedule();

        let x = TensorImage::<f64>::from_fn(2, 2, |y, x| (y + x) as f64);
        let zeros = TensorImage::zeros(2, 2);
        assert_eq!(forward_step(&x, &zeros, 5, &s, &zeros).unwrap(), x);
        assert!(matches!(
            forward_step(&x, &zeros, 0, &s, &zeros),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(forward_step(&x, &zeros, 16, &s, &zeros).is_err());
        assert!(forward_step(&x, &px(0.0), 1, &s, &zeros).is_err());
    }

    #[test]
    fn forward_marginal_examples() {
        let s = schedule();
        let out = forward_marginal(&px(1.0), &px(-1.0), 15, &s, &px(0.0)).unwrap();
        assert!((out.data()[0] - 1.0e-4).abs() < 1e-12);

        let hr = TensorImage::<f64>::from_fn(4, 4, |y, x| 0.1 * (y as f64) - 0.05 * x as f64);
        let e0 = TensorImage::<f64>::from_fn(4, 4, |y, x| ((y * 4 + x) as f64).sin());
        let zeros = TensorImage::zeros(4, 4);
        let x1 = forward_marginal(&hr, &e0, 1, &s, &zeros).unwrap();
        for i in 0..16 {
            let bound = 4e-4 * e0.data()[i].abs() + 1e-15;
            assert!((x1.data()[i] - hr.data()[i]).abs() <= bound);
        }
        for t in 1..=15 {
            assert_eq!(forward_marginal(&hr, &zeros, t, &s, &zeros).unwrap(), hr);
        }
    }

    #[test]
    fn marginal_params_examples() {
        let s = schedule();
        let p = marginal_params(&px(0.0), &px(1.0), 15, &s).unwrap();
        assert!((p.variance - 3.9996).abs() < 1e-12);
        let hr = px(0.7);
        for t in 1..=15 {
            assert_eq!(marginal_params(&hr, &px(0.0), t, &s).unwrap().mean, hr);
        }
        assert!(marginal_params(&hr, &px(0.0), 0, &s).is_err());
    }

    #[test]
    fn posterior_examples() {
        let p = posterior_params(&px(3.0), &px(-1.0), 0.7, 0.0, 2.0).unwrap();
        assert_eq!(p.mean.data()[0], -1.0);
        assert_eq!(p.variance, 0.0);

        let (xt, x0) = (1.3, -0.4);
        let p = posterior_params(&px(xt), &px(x0), 0.5, 0.2, 2.0).unwrap();
        assert!((p.mean.data()[0] - (0.4 * xt + 0.6 * x0)).abs() < 1e-15);
        assert!((p.variance - 0.48).abs() < 1e-15);

        let c = px(0.42);
        let p = posterior_params(&c, &c, 0.9, 0.3, 2.0).unwrap();
        assert!((p.mean.data()[0] - 0.42).abs() < 1e-15);

        assert!(posterior_params(&c, &c, 0.3, 0.3, 2.0).is_err());
        assert!(posterior_params(&c, &c, 0.3, 0.5, 2.0).is_err());
    }

    #[test]
    fn reverse_step_examples() {
        let (xt, x0) = (1.3, -0.4);
        let mean = reverse_step(&px(xt), &px(x0), 0.5, 0.2, 2.0, &px(0.0)).unwrap();
        assert!((mean.data()[0] - (0.4 * xt + 0.6 * x0)).abs() < 1e-15);
        let noisy = reverse_step(&px(xt), &px(x0), 0.5, 0.2, 2.0, &px(1.0)).unwrap();
        assert!((noisy.data()[0] - (0.4 * xt + 0.6 * x0 + 0.48f64.sqrt())).abs() < 1e-15);
        let last = reverse_step(&px(xt), &px(x0), 0.5, 0.0, 2.0, &px(123.0)).unwrap();
        assert_eq!(last.data()[0], x0);
    }

    #[test]
    fn telescoped_shift_equals_beta_t_times_residual() {
        let s = schedule();
        let e0 = 0.37;
        let shifted: f64 = s.alphas().iter().map(|a| a * e0).sum();
        assert!((shifted - s.beta_final() * e0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn constant_shift_equivariance(c in -5.0f64..5.0, seed in 0u64..1000, t in 1usize..=15) {
            let s = schedule();
            let mut rng = stream_rng(seed, 0);
            let hr: TensorImage<f64> = gaussian_image(3, 3, 1, &mut rng);
            let lr: TensorImage<f64> = gaussian_image(3, 3, 1, &mut rng);
            let noise: TensorImage<f64> = gaussian_image(3, 3, 1, &mut rng);
            let hr2 = hr.map(|v| v + c);
            let lr2 = lr.map(|v| v + c);
            let e0 = residual(&hr, &lr).unwrap();
            let e0b = residual(&hr2, &lr2).unwrap();
            prop_assert!(e0.max_abs_diff(&e0b).unwrap() < 1e-12);

            let a = forward_marginal(&hr, &e0, t, &s, &noise).unwrap();
            let b = forward_marginal(&hr2, &e0b, t, &s, &noise).unwrap();
            prop_assert!(a.map(|v| v + c).max_abs_diff(&b).unwrap() < 1e-12);

            let a = forward_step(&hr, &e0, t, &s, &noise).unwrap();
            let b = forward_step(&hr2, &e0b, t, &s, &noise).unwrap();
            prop_assert!(a.map(|v| v + c).max_abs_diff(&b).unwrap() < 1e-12);

            let bp = s.beta(t - 1);
            let a = reverse_step(&lr, &hr, s.beta(t), bp, 2.0, &noise).unwrap();
            let b = reverse_step(&lr2, &hr2, s.beta(t), bp, 2.0, &noise).unwrap();
            prop_assert!(a.map(|v| v + c).max_abs_diff(&b).unwrap() < 1e-12);
        }
    }
}
