//! Adam and the reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const DEFAULT_LR: f64 = 1e-3;
pub const LR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update from the gradient buffers, which are zeroed
/// afterwards. Nothing is modified if any gradient is non-finite.
pub fn adam_step(params: &mut ParamStore, lr: f64, cfg: AdamConfig) -> Result<()> {
    if let Some((_, p)) = params.iter().find(|(_, p)| !p.grad.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter `{}`", p.name)));
    }
    let step = params.step_count() + 1;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for p in params.iter_mut() {
        let g = p.grad.data();
        let m = p.adam_m.data_mut();
        for (m, &g) in m.iter_mut().zip(g) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        }
        let v = p.adam_v.data_mut();
        for (v, &g) in v.iter_mut().zip(g) {
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        }
        let (m, v) = (p.adam_m.data(), p.adam_v.data());
        for ((w, &m), &v) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    params.set_step_count(step);
    params.zero_grads();
    Ok(())
}

/// Applies the plateau rule to a dev-BLEU history: the learning rate is
/// multiplied by `factor` once the last `patience` evaluations all failed to
/// beat the best score seen before them.
///
/// This is the stateless form; [`LrScheduler`] tracks the same rule
/// incrementally and resets its counter after each reduction.
pub fn anneal(lr: f64, history: &[f64], factor: f64, patience: usize) -> f64 {
    let mut sched = LrScheduler::new(lr, factor, patience);
    for &b in history {
        sched.observe(b);
    }
    sched.lr()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl LrScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        LrScheduler {
            lr,
            factor,
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records one dev evaluation and returns the (possibly reduced) rate.
    pub fn observe(&mut self, dev_bleu: f64) -> f64 {
        match self.best {
            Some(b) if dev_bleu <= b => {
                self.stale += 1;
                if self.stale >= self.patience.max(1) {
                    self.lr = (self.lr * self.factor).max(LR_FLOOR);
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(dev_bleu);
                self.stale = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row(vec![w, -w, 0.5])).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: &[f64]) {
        let p = s.iter_mut().next().unwrap();
        p.grad.data_mut().copy_from_slice(g);
    }

    #[test]
    fn zero_gradient_leaves_values_and_moments() {
        let mut s = scalar_store(0.3);
        let before = s.iter().next().unwrap().1.clone();
        adam_step(&mut s, 1e-3, AdamConfig::default()).unwrap();
        let after = s.iter().next().unwrap().1;
        assert_eq!(before.value, after.value);
        assert_eq!(before.adam_m, after.adam_m);
        assert_eq!(before.adam_v, after.adam_v);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_matches_straight_line_formula() {
        let mut s = scalar_store(0.3);
        let g = [0.2, -4.0, 1e-9];
        set_grad(&mut s, &g);
        adam_step(&mut s, 1e-3, AdamConfig::default()).unwrap();
        let w0 = [0.3, -0.3, 0.5];
        for i in 0..3 {
            let m = 0.1 * g[i];
            let v = 0.001 * g[i] * g[i];
            let m_hat = m / (1.0 - 0.9);
            let v_hat = v / (1.0 - 0.999);
            let expected = w0[i] - 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
            let got = s.iter().next().unwrap().1.value.data()[i];
            assert!((got - expected).abs() < 1e-15, "{i}: {got} vs {expected}");
            // ≈ −lr·g/(|g| + eps/√(1−β2))
            let approx = w0[i] - 1e-3 * g[i] / (g[i].abs() + 1e-8);
            assert!((got - approx).abs() < 1e-12);
        }
        assert!(s.iter().next().unwrap().1.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let mut s = scalar_store(1.0);
        let mut prev = 1.0;
        for _ in 0..200 {
            set_grad(&mut s, &[0.7, 0.0, 0.0]);
            adam_step(&mut s, 1e-2, AdamConfig::default()).unwrap();
            let w = s.iter().next().unwrap().1.value.data()[0];
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut s = scalar_store(1.0);
        set_grad(&mut s, &[f64::NAN, 0.0, 0.0]);
        let err = adam_step(&mut s, 1e-3, AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(s.step_count(), 0);
        assert_eq!(s.iter().next().unwrap().1.value.data(), &[1.0, -1.0, 0.5]);
    }

    #[test]
    fn improving_history_keeps_rate() {
        assert_eq!(anneal(1e-3, &[0.1, 0.2, 0.3, 0.4, 0.5], 0.5, 3), 1e-3);
    }

    #[test]
    fn three_flat_evaluations_halve_once() {
        // first evaluation sets the best; the next three do not beat it
        assert_eq!(anneal(1e-3, &[0.2, 0.2, 0.2, 0.2], 0.5, 3), 5e-4);
        assert_eq!(anneal(1e-3, &[0.2, 0.2, 0.2], 0.5, 3), 1e-3);
        assert_eq!(anneal(1e-3, &[0.2, 0.1, 0.3, 0.1, 0.1], 0.5, 3), 1e-3);
    }

    #[test]
    fn rate_never_drops_below_floor() {
        let flat = vec![0.0; 400];
        assert_eq!(anneal(1e-3, &flat, 0.5, 3), LR_FLOOR);
        let mut sched = LrScheduler::new(1e-3, 0.1, 1);
        for _ in 0..100 {
            assert!(sched.observe(0.0) >= LR_FLOOR);
        }
    }
}
