//! Geometric shifting schedule `{β_t}` and few-step sub-schedules.
//!
//! `√β_t = √β₁ · exp[((t−1)/(T−1))^p · ln √(β_T/β₁)]` for `t = 1..=T`, with
//! `β₀ = 0` prepended so that the last reverse step collapses onto the
//! denoiser estimate.

use crate::error::{Error, Result};

/// Parameters of the shifting schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    /// Number of training timesteps.
    pub steps: usize,
    /// Kernel scale γ.
    pub gamma: f64,
    /// Growth-rate exponent; smaller values front-load the noise.
    pub p: f64,
    pub beta_1: f64,
    pub beta_t: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let gamma = 2.0;
        ScheduleConfig {
            steps: 15,
            gamma,
            p: 0.3,
            beta_1: (0.04 / gamma) * (0.04 / gamma),
            beta_t: 0.9999,
        }
    }
}

impl ScheduleConfig {
    /// Default endpoints with `β₁ = (0.04/γ)²` for the given γ.
    pub fn with_gamma(steps: usize, gamma: f64, p: f64, beta_t: f64) -> Self {
        ScheduleConfig {
            steps,
            gamma,
            p,
            beta_1: (0.04 / gamma).powi(2),
            beta_t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::config(format!(
                "T must be at least 2, got {}",
                self.steps
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.p > 0.0 && self.p.is_finite()) {
            return Err(Error::config(format!("p must be positive, got {}", self.p)));
        }
        if !(0.0 < self.beta_1 && self.beta_1 < self.beta_t && self.beta_t < 1.0) {
            return Err(Error::config(format!(
                "need 0 < beta_1 < beta_T < 1, got beta_1={} beta_T={}",
                self.beta_1, self.beta_t
            )));
        }
        // the first marginal must stay close to the clean image
        if self.gamma * self.beta_1.sqrt() > 0.05 + 1e-12 {
            return Err(Error::config(format!(
                "gamma*sqrt(beta_1) = {} exceeds 0.05",
                self.gamma * self.beta_1.sqrt()
            )));
        }
        Ok(())
    }
}

/// Immutable shifting schedule. `betas[0] = 0`; `alphas[t] = β_t − β_{t−1}`
/// for `t = 1..=T` (index 0 is unused and holds 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    gamma: f64,
}

impl Schedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        build_schedule(config)
    }

    /// Schedule from an explicit `[β₁, …, β_T]` sequence (β₀ = 0 is prepended).
    pub fn from_betas(betas: &[f64], gamma: f64) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::config("need at least two betas"));
        }
        if !(gamma > 0.0) {
            return Err(Error::config(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        let mut all = Vec::with_capacity(betas.len() + 1);
        all.push(0.0);
        all.extend_from_slice(betas);
        if all.windows(2).any(|w| !(w[0] < w[1])) || *all.last().unwrap() >= 1.0 {
            return Err(Error::config("betas must increase strictly within (0, 1)"));
        }
        let mut alphas = vec![0.0; all.len()];
        for t in 1..all.len() {
            alphas[t] = all[t] - all[t - 1];
        }
        Ok(Schedule {
            betas: all,
            alphas,
            gamma,
        })
    }

    /// Number of training steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// β_t for `t = 0..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    /// α_t for `t = 1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1, "alpha is defined for t >= 1");
        self.alphas[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Increments for `t = 1..=T`.
    pub fn alphas(&self) -> &[f64] {
        &self.alphas[1..]
    }

    pub fn beta_final(&self) -> f64 {
        self.betas[self.steps()]
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            })
        }
    }

    /// CSV dump with columns `t,beta,alpha,sqrt_beta` for `t = 0..=T`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,sqrt_beta\n");
        for t in 0..=self.steps() {
            let alpha = if t == 0 { 0.0 } else { self.alphas[t] };
            out.push_str(&format!(
                "{t},{},{},{}\n",
                crate::report::fmt_num(self.betas[t]),
                crate::report::fmt_num(alpha),
                crate::report::fmt_num(self.betas[t].sqrt())
            ));
        }
        out
    }
}

pub fn build_schedule(config: &ScheduleConfig) -> Result<Schedule> {
    config.validate()?;
    let steps = config.steps;
    let sqrt_b1 = config.beta_1.sqrt();
    let log_ratio = (config.beta_t / config.beta_1).sqrt().ln();
    let mut betas = Vec::with_capacity(steps + 1);
    betas.push(0.0);
    for t in 1..=steps {
        let frac = (t - 1) as f64 / (steps - 1) as f64;
        let sqrt_beta = sqrt_b1 * (frac.powf(config.p) * log_ratio).exp();
        betas.push(sqrt_beta * sqrt_beta);
    }
    let mut alphas = vec![0.0; steps + 1];
    for t in 1..=steps {
        alphas[t] = betas[t] - betas[t - 1];
        if alphas[t] <= 0.0 {
            return Err(Error::config(format!(
                "schedule is not strictly increasing at t={t}"
            )));
        }
    }
    Ok(Schedule {
        betas,
        alphas,
        gamma: config.gamma,
    })
}

/// How inference timesteps are picked from the training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SubScheduleRule {
    /// `τ_k = round_half_up(k·T/K)`.
    #[default]
    UniformT,
    /// `τ_k` nearest to a geometric progression in `√β` between `√β₁` and `√β_T`.
    GeometricSqrtBeta,
}

/// K-step subset of the training timesteps used for sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SubSchedule {
    taus: Vec<usize>,
    /// `[0, β_{τ₁}, …, β_{τ_K}]`.
    betas_at_taus: Vec<f64>,
}

impl SubSchedule {
    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn betas_at_taus(&self) -> &[f64] {
        &self.betas_at_taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// β at the k-th level, `k = 0..=K` (level 0 is β₀ = 0).
    pub fn beta_at(&self, k: usize) -> f64 {
        self.betas_at_taus[k]
    }

    /// Timestep at level `k = 1..=K`.
    pub fn tau(&self, k: usize) -> usize {
        self.taus[k - 1]
    }

    /// `Δβ_k = β_{τ_k} − β_{τ_{k−1}}` for `k = 1..=K`.
    pub fn delta_betas(&self) -> Vec<f64> {
        self.betas_at_taus.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn beta_final(&self) -> f64 {
        *self.betas_at_taus.last().expect("nonempty sub-schedule")
    }
}

pub fn sub_schedule(schedule: &Schedule, k: usize) -> Result<SubSchedule> {
    sub_schedule_with(schedule, k, SubScheduleRule::UniformT)
}

pub fn sub_schedule_with(
    schedule: &Schedule,
    k: usize,
    rule: SubScheduleRule,
) -> Result<SubSchedule> {
    let steps = schedule.steps();
    if k == 0 || k > steps {
        return Err(Error::arg(format!("K must be in 1..={steps}, got {k}")));
    }
    let mut taus: Vec<usize> = match rule {
        // floor(kT/K + 1/2) in exact integer arithmetic
        SubScheduleRule::UniformT => (1..=k).map(|i| (2 * i * steps + k) / (2 * k)).collect(),
        SubScheduleRule::GeometricSqrtBeta => {
            let lo = schedule.beta(1).sqrt();
            let hi = schedule.beta_final().sqrt();
            (1..=k)
                .map(|i| {
                    let target = lo * (hi / lo).powf(i as f64 / k as f64);
                    (1..=steps)
                        .min_by(|&a, &b| {
                            let da = (schedule.beta(a).sqrt() - target).abs();
                            let db = (schedule.beta(b).sqrt() - target).abs();
                            da.total_cmp(&db)
                        })
                        .unwrap_or(steps)
                })
                .collect()
        }
    };
    *taus.last_mut().expect("k >= 1") = steps;
    taus.dedup();
    let mut betas_at_taus = Vec::with_capacity(taus.len() + 1);
    betas_at_taus.push(0.0);
    betas_at_taus.extend(taus.iter().map(|&t| schedule.beta(t)));
    Ok(SubSchedule {
        taus,
        betas_at_taus,
    })
}
