//! Rectified Adam.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;

/// Moment accumulators mirroring a [`ParamSet`], plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<S> {
    pub m: ParamSet<S>,
    pub v: ParamSet<S>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &ParamSet<S>, beta1: f64, beta2: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || beta2 == 0.0 {
            return Err(Error::config(format!(
                "optimizer decays must lie in [0, 1) with beta2 > 0, got {beta1}, {beta2}"
            )));
        }
        Ok(OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1,
            beta2,
            eps: 1e-8,
        })
    }

    /// `ρ_∞ = 2/(1 − β₂) − 1`.
    pub fn rho_inf(&self) -> f64 {
        rho_inf(self.beta2)
    }
}

pub fn rho_inf(beta2: f64) -> f64 {
    2.0 / (1.0 - beta2) - 1.0
}

/// Length of the approximated simple moving average at step `t ≥ 1`.
pub fn rho_t(beta2: f64, t: u64) -> f64 {
    let b2t = beta2.powi(t as i32);
    rho_inf(beta2) - 2.0 * t as f64 * b2t / (1.0 - b2t)
}

/// Variance rectification factor, or `None` while `ρ_t ≤ 4`.
pub fn rectification(beta2: f64, t: u64) -> Option<f64> {
    let rho = rho_t(beta2, t);
    let inf = rho_inf(beta2);
    (rho > 4.0)
        .then(|| ((rho - 4.0) * (rho - 2.0) * inf / ((inf - 4.0) * (inf - 2.0) * rho)).sqrt())
}

/// One update in place. Non-finite gradients leave params and state untouched.
pub fn optimizer_step<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &ParamSet<S>,
    state: &mut OptimizerState<S>,
    lr: f64,
) -> Result<()> {
    params.check_aligned(grads)?;
    params.check_aligned(&state.m)?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {name} at optimizer step {}",
            state.step + 1
        )));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::arg(format!(
            "learning rate must be finite and nonnegative, got {lr}"
        )));
    }
    let t = state.step + 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bias1 = 1.0 - b1.powi(t as i32);
    let bias2 = 1.0 - b2.powi(t as i32);
    let rect = rectification(b2, t);
    let eps = state.eps;

    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let g = grads.get(name).expect("aligned").data();
        let m = state.m.get_mut(name).expect("aligned").data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = S::lit(b1 * mi.as_f64() + (1.0 - b1) * gi.as_f64());
        }
        let v = state.v.get_mut(name).expect("aligned").data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            let gi = gi.as_f64();
            *vi = S::lit(b2 * vi.as_f64() + (1.0 - b2) * gi * gi);
        }
        let m = state.m.get(name).expect("aligned").data();
        let v = state.v.get(name).expect("aligned").data();
        let p = params.get_mut(name).expect("aligned").data_mut();
        for ((pi, &mi), &vi) in p.iter_mut().zip(m).zip(v) {
            let m_hat = mi.as_f64() / bias1;
            let delta = match rect {
                Some(r) => r * m_hat / ((vi.as_f64() / bias2).sqrt() + eps),
                None => m_hat,
            };
            *pi = S::lit(pi.as_f64() - lr * delta);
        }
    }
    state.step = t;
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut ParamSet<S>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale(S::lit(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Array;

    fn single(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Array::scalar(v));
        p
    }

    /// Scalar rectified update written out directly.
    struct Reference {
        m: f64,
        v: f64,
        t: i32,
    }

    impl Reference {
        fn step(&mut self, theta: f64, g: f64, lr: f64) -> f64 {
            let (b1, b2) = (0.9f64, 0.999f64);
            self.t += 1;
            self.m = b1 * self.m + (1.0 - b1) * g;
            self.v = b2 * self.v + (1.0 - b2) * g * g;
            let m_hat = self.m / (1.0 - b1.powi(self.t));
            let rho_inf = 2.0 / (1.0 - b2) - 1.0;
            let rho = rho_inf - 2.0 * self.t as f64 * b2.powi(self.t) / (1.0 - b2.powi(self.t));
            if rho > 4.0 {
                let v_hat = (self.v / (1.0 - b2.powi(self.t))).sqrt();
                let r = ((rho - 4.0) * (rho - 2.0) * rho_inf
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
                    .sqrt();
                theta - lr * r * m_hat / (v_hat + 1e-8)
            } else {
                theta - lr * m_hat
            }
        }
    }

    #[test]
    fn rho_inf_value() {
        assert!((rho_inf(0.999) - 1999.0).abs() < 1e-9);
    }

    #[test]
    fn first_steps_are_unrectified() {
        assert!(rectification(0.999, 1).is_none());
        assert!(rectification(0.999, 100).is_some());
        let first = (1..100)
            .find(|&t| rectification(0.999, t).is_some())
            .unwrap();
        assert!(rho_t(0.999, first) > 4.0 && rho_t(0.999, first - 1) <= 4.0);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = single(0.7);
        let g = single(0.0);
        let mut st = OptimizerState::new(&p, 0.9, 0.999).unwrap();
        for _ in 0..50 {
            optimizer_step(&mut p, &g, &mut st, 0.1).unwrap();
        }
        assert_eq!(p.scalar_at("w", 0), Some(0.7));
        assert_eq!(st.step, 50);
    }

    #[test]
    fn constant_gradient_matches_reference_and_decreases() {
        let mut p = single(0.0);
        let g = single(1.0);
        let mut st = OptimizerState::new(&p, 0.9, 0.999).unwrap();
        let mut reference = Reference {
            m: 0.0,
            v: 0.0,
            t: 0,
        };
        let mut theta = 0.0;
        let mut prev = 0.0;
        for _ in 0..30 {
            optimizer_step(&mut p, &g, &mut st, 0.1).unwrap();
            theta = reference.step(theta, 1.0, 0.1);
            let now = p.scalar_at("w", 0).unwrap();
            assert!(now < prev);
            assert!((now - theta).abs() <= 1e-12 * theta.abs().max(1.0));
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut p = single(1.0);
        let mut st = OptimizerState::new(&p, 0.9, 0.999).unwrap();
        let err = optimizer_step(&mut p, &single(f64::NAN), &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(st.step, 0);
        assert_eq!(p.scalar_at("w", 0), Some(1.0));
        assert_eq!(st.m.scalar_at("w", 0), Some(0.0));
    }

    #[test]
    fn misaligned_grads_are_rejected() {
        let mut p = single(1.0);
        let mut st = OptimizerState::new(&p, 0.9, 0.999).unwrap();
        let mut other = ParamSet::new();
        other.insert("u", Array::scalar(1.0));
        assert!(optimizer_step(&mut p, &other, &mut st, 0.1).is_err());
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = ParamSet::<f64>::new();
        g.insert("a", Array::new(vec![2], vec![3.0, 4.0]).unwrap());
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 2.0), g.global_norm());
    }
}
