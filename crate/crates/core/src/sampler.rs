//! Few-step ancestral sampling from the LR-centred prior.

use crate::diffusion::reverse_step;
use crate::error::{Error, Result};
use crate::rng::{gaussian_like, stream_rng, NoiseRng};
use crate::scalar::Scalar;
use crate::scheduler::SubSchedule;
use crate::tensor::TensorImage;

/// Estimate of the clean HR image from `(x_t, x_lr, t)`.
pub trait Denoiser<S: Scalar> {
    fn denoise(
        &self,
        x_t: &TensorImage<S>,
        x_lr: &TensorImage<S>,
        t: usize,
    ) -> Result<TensorImage<S>>;
}

impl<S: Scalar, F> Denoiser<S> for F
where
    F: Fn(&TensorImage<S>, &TensorImage<S>, usize) -> Result<TensorImage<S>>,
{
    fn denoise(
        &self,
        x_t: &TensorImage<S>,
        x_lr: &TensorImage<S>,
        t: usize,
    ) -> Result<TensorImage<S>> {
        self(x_t, x_lr, t)
    }
}

/// Test oracle that always answers with the true HR image.
#[derive(Debug, Clone)]
pub struct OracleDenoiser<S> {
    hr: TensorImage<S>,
}

pub fn oracle_denoiser<S: Scalar>(hr: TensorImage<S>) -> OracleDenoiser<S> {
    OracleDenoiser { hr }
}

impl<S: Scalar> Denoiser<S> for OracleDenoiser<S> {
    fn denoise(
        &self,
        _x_t: &TensorImage<S>,
        _x_lr: &TensorImage<S>,
        _t: usize,
    ) -> Result<TensorImage<S>> {
        Ok(self.hr.clone())
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub sub: SubSchedule,
    pub gamma: f64,
    pub seed: u64,
    /// Use ε = 0 in the final step.
    pub deterministic_last_step: bool,
}

impl SamplerConfig {
    pub fn new(sub: SubSchedule, gamma: f64, seed: u64) -> Self {
        SamplerConfig {
            sub,
            gamma,
            seed,
            deterministic_last_step: true,
        }
    }
}

/// `x_T = x_lr + γ√β_T · ε`.
pub fn init_sample<S: Scalar>(
    x_lr: &TensorImage<S>,
    beta_final: f64,
    gamma: f64,
    rng: &mut NoiseRng,
) -> TensorImage<S> {
    let std = gamma * beta_final.sqrt();
    let noise = gaussian_like(x_lr, rng);
    x_lr.zip_map(&noise, |l, n| S::lit(l.as_f64() + std * n.as_f64()))
        .expect("noise has the shape of x_lr")
}

/// Runs the K-step reverse chain for one slice.
pub fn run_sampler<S: Scalar, D: Denoiser<S> + ?Sized>(
    x_lr: &TensorImage<S>,
    denoiser: &D,
    config: &SamplerConfig,
) -> Result<TensorImage<S>> {
    run_sampler_stream(x_lr, denoiser, config, 0)
}

/// As [`run_sampler`], drawing noise from stream `stream` of the seed so
/// that slices can be sampled independently.
pub fn run_sampler_stream<S: Scalar, D: Denoiser<S> + ?Sized>(
    x_lr: &TensorImage<S>,
    denoiser: &D,
    config: &SamplerConfig,
    stream: u64,
) -> Result<TensorImage<S>> {
    let sub = &config.sub;
    if sub.is_empty() {
        return Err(Error::arg("sub-schedule is empty"));
    }
    let mut rng = stream_rng(config.seed, stream);
    let mut x = init_sample(x_lr, sub.beta_final(), config.gamma, &mut rng);
    for k in (1..=sub.len()).rev() {
        let t = sub.tau(k);
        let x0_hat = denoiser.denoise(&x, x_lr, t)?;
        if !x0_hat.same_shape(&x) {
            return Err(Error::shape(format!(
                "denoiser returned {:?} for input {:?} at step k={k}",
                x0_hat.dims(),
                x.dims()
            )));
        }
        if !x0_hat.all_finite() {
            return Err(Error::NonFinite(format!(
                "denoiser output at step k={k} (t={t})"
            )));
        }
        let noise = if k == 1 && config.deterministic_last_step {
            TensorImage::from_raw(
                x.height(),
                x.width(),
                x.channels(),
                vec![S::zero(); x.len()],
            )
        } else {
            gaussian_like(&x, &mut rng)
        };
        x = reverse_step(
            &x,
            &x0_hat,
            sub.beta_at(k),
            sub.beta_at(k - 1),
            config.gamma,
            &noise,
        )
        .map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} at step k={k}")),
            other => other,
        })?;
    }
    Ok(x)
}
