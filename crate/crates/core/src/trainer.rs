//! Training loop: uniform timestep, closed-form marginal, denoiser forward,
//! λ-weighted fidelity plus perceptual proxy, clipped RAdam update.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;

use crate::diffusion::{forward_marginal, ImagePair};
use crate::error::{Error, Result};
use crate::loss::loss_nodes;
use crate::nn::{build_forward, check_params, Array, Graph, NetConfig, ParamSet};
use crate::optim::{clip_global_norm, optimizer_step, OptimizerState};
use crate::report::fmt_num;
use crate::rng::{gaussian_like, stream_rng, NoiseRng};
use crate::scalar::Scalar;
use crate::scheduler::Schedule;
use crate::tensor::TensorImage;

pub const CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub steps: usize,
    pub lr_max: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1_opt: f64,
    pub beta2_opt: f64,
    pub f64_mode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 10.0,
            steps: 15,
            lr_max: 3e-5,
            warmup_steps: 5000,
            total_steps: 20000,
            batch_size: 16,
            seed: 0,
            beta1_opt: 0.9,
            beta2_opt: 0.999,
            f64_mode: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.steps < 2 {
            return Err(Error::config("T must be at least 2"));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::config(format!(
                "lr_max must be positive, got {}",
                self.lr_max
            )));
        }
        Ok(())
    }
}

/// Linear warm-up to `lr_max`, then half-cosine decay to zero at `total_steps`.
pub fn lr_at_step(step: usize, config: &TrainConfig) -> f64 {
    let step = step.min(config.total_steps);
    let warm = config.warmup_steps;
    if step < warm {
        return config.lr_max * step as f64 / warm as f64;
    }
    let span = (config.total_steps - warm) as f64;
    let progress = (step - warm) as f64 / span;
    config.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `t ~ Uniform{1, …, T}`.
pub fn sample_timestep(rng: &mut NoiseRng, steps: usize) -> usize {
    rng.gen_range(1..=steps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub fidelity: f64,
    pub perceptual: f64,
}

/// Loss of one training example and its gradient with respect to every parameter.
pub fn loss_and_grads<S: Scalar>(
    params: &ParamSet<S>,
    net: &NetConfig,
    x_t: &TensorImage<S>,
    x_lr: &TensorImage<S>,
    hr: &TensorImage<S>,
    t: usize,
    lambda: f64,
) -> Result<(LossParts, ParamSet<S>)> {
    let mut g = Graph::new(true);
    let pred = build_forward(&mut g, params, net, x_t, x_lr, t)?;
    let target = g.input(Array::from_image(hr));
    let nodes = loss_nodes(&mut g, pred, target, lambda)?;
    let parts = LossParts {
        total: g.value(nodes.total).item().as_f64(),
        fidelity: g.value(nodes.fidelity).item().as_f64(),
        perceptual: g.value(nodes.perceptual).item().as_f64(),
    };
    if !parts.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss at t={t}")));
    }
    let grads = g.backward(nodes.total)?;
    Ok((parts, g.param_grads(&grads, params)))
}

/// Loss only, for finite-difference checks and validation.
pub fn loss_value<S: Scalar>(
    params: &ParamSet<S>,
    net: &NetConfig,
    x_t: &TensorImage<S>,
    x_lr: &TensorImage<S>,
    hr: &TensorImage<S>,
    t: usize,
    lambda: f64,
) -> Result<LossParts> {
    let mut g = Graph::new(false);
    let pred = build_forward(&mut g, params, net, x_t, x_lr, t)?;
    let target = g.input(Array::from_image(hr));
    let nodes = loss_nodes(&mut g, pred, target, lambda)?;
    Ok(LossParts {
        total: g.value(nodes.total).item().as_f64(),
        fidelity: g.value(nodes.fidelity).item().as_f64(),
        perceptual: g.value(nodes.perceptual).item().as_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub fidelity: f64,
    pub perceptual: f64,
    pub grad_norm: f64,
}

/// One optimizer step on a batch. Timesteps and noise are drawn from `rng`
/// in batch order; per-example passes may run in parallel and gradients are
/// summed in batch order.
pub fn train_step<S: Scalar>(
    batch: &[ImagePair<S>],
    params: &mut ParamSet<S>,
    state: &mut OptimizerState<S>,
    schedule: &Schedule,
    net: &NetConfig,
    config: &TrainConfig,
    rng: &mut NoiseRng,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::arg("empty training batch"));
    }
    if schedule.steps() != config.steps {
        return Err(Error::config(format!(
            "schedule has T={} but the training config says T={}",
            schedule.steps(),
            config.steps
        )));
    }
    let mut inputs = Vec::with_capacity(batch.len());
    for pair in batch {
        let t = sample_timestep(rng, config.steps);
        let noise = gaussian_like(pair.hr(), rng);
        let x_t = forward_marginal(pair.hr(), pair.residual(), t, schedule, &noise)?;
        inputs.push((x_t, t));
    }
    let results: Vec<Result<(LossParts, ParamSet<S>)>> = inputs
        .par_iter()
        .zip(batch.par_iter())
        .map(|((x_t, t), pair)| {
            loss_and_grads(params, net, x_t, pair.lr(), pair.hr(), *t, config.lambda)
        })
        .collect();

    let n = batch.len() as f64;
    let mut total = params.zeros_like();
    let (mut loss, mut fidelity, mut perceptual) = (0.0, 0.0, 0.0);
    for r in results {
        let (parts, g) = r?;
        total.add_assign(&g)?;
        loss += parts.total;
        fidelity += parts.fidelity;
        perceptual += parts.perceptual;
    }
    total.scale(S::lit(1.0 / n));
    let grad_norm = clip_global_norm(&mut total, CLIP_NORM);
    let lr = lr_at_step(state.step as usize + 1, config);
    optimizer_step(params, &total, state, lr)?;
    Ok(StepStats {
        step: state.step,
        lr,
        loss: loss / n,
        fidelity: fidelity / n,
        perceptual: perceptual / n,
        grad_norm,
    })
}

pub const LOG_HEADER: &str = "step,lr,loss,fidelity,perceptual";

pub fn log_line(s: &StepStats) -> String {
    format!(
        "{},{},{},{},{}",
        s.step,
        fmt_num(s.lr),
        fmt_num(s.loss),
        fmt_num(s.fidelity),
        fmt_num(s.perceptual)
    )
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub params: ParamSet<S>,
    pub state: OptimizerState<S>,
    pub history: Vec<StepStats>,
}

/// Runs `config.total_steps` steps from `params`, drawing each batch
/// uniformly with replacement. Writes one CSV row per step to `log` if given.
pub fn train<S: Scalar>(
    pairs: &[ImagePair<S>],
    params: ParamSet<S>,
    schedule: &Schedule,
    net: &NetConfig,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    check_params(&params, net)?;
    if pairs.is_empty() {
        return Err(Error::arg("no training pairs"));
    }
    let mut params = params;
    let mut state = OptimizerState::new(&params, config.beta1_opt, config.beta2_opt)?;
    let mut batch_rng = stream_rng(config.seed, 1);
    let mut noise_rng = stream_rng(config.seed, 2);
    if let Some(w) = log.as_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    let mut history = Vec::with_capacity(config.total_steps);
    for _ in 0..config.total_steps {
        let batch: Vec<ImagePair<S>> = (0..config.batch_size)
            .map(|_| pairs[batch_rng.gen_range(0..pairs.len())].clone())
            .collect();
        let stats = train_step(
            &batch,
            &mut params,
            &mut state,
            schedule,
            net,
            config,
            &mut noise_rng,
        )?;
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", log_line(&stats))?;
        }
        history.push(stats);
    }
    Ok(TrainOutcome {
        params,
        state,
        history,
    })
}
