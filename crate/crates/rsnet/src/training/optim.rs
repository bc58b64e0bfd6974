//! AdamW with decoupled weight decay and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decay applied directly to parameters (θ ← θ − lr·λ·θ), never through
    /// the moment estimates.
    pub weight_decay: f64,
    /// Gradients are rescaled so their global L2 norm never exceeds this.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 5.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be ≥ 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be ≥ 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip norm must be positive, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

/// Optimizer state: first/second moment accumulators shaped like the
/// parameters, plus the step counter driving bias correction.
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let m = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        let v = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Ok(AdamW { cfg, step: 0, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Consume the gradients accumulated in the store and update every
    /// parameter in place. A non-finite gradient aborts, naming the
    /// offending parameter; decoupled decay applies even where the gradient
    /// is zero.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        if ids.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer state covers {} parameters, store has {}",
                self.m.len(),
                ids.len()
            )));
        }
        let mut sq_norm = 0.0;
        for &id in &ids {
            let tensor = store.get(id);
            let grad = tensor
                .grad()
                .ok_or_else(|| Error::Config(format!("parameter `{}` has no gradient buffer", store.name(id))))?;
            if grad.len() != self.m[id.idx()].len() {
                return Err(Error::Config(format!(
                    "optimizer state for `{}` has stale shape",
                    store.name(id)
                )));
            }
            for &g in grad {
                if !g.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient in parameter `{}`",
                        store.name(id)
                    )));
                }
                sq_norm += g * g;
            }
        }
        let norm = sq_norm.sqrt();
        let clip_scale = if norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };

        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.cfg.beta1.powi(t);
        let bias2 = 1.0 - self.cfg.beta2.powi(t);
        for &id in &ids {
            let m = &mut self.m[id.idx()];
            let v = &mut self.v[id.idx()];
            let tensor = store.get_mut(id);
            // split borrow: read grads into the moments first
            for (j, &g) in tensor.grad().expect("checked above").iter().enumerate() {
                let g = g * clip_scale;
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g * g;
            }
            for (j, p) in tensor.values_mut().iter_mut().enumerate() {
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *p -= self.cfg.lr * (m_hat / (v_hat.sqrt() + self.cfg.eps));
                *p -= self.cfg.lr * self.cfg.weight_decay * *p;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn one_param_store(values: Vec<f64>) -> ParamStore {
        let mut store = ParamStore::new();
        let n = values.len();
        store.add("theta", Tensor::new(vec![n], values).unwrap()).unwrap();
        store
    }

    fn set_grad(store: &mut ParamStore, name: &str, g: &[f64]) {
        let id = store.find(name).unwrap();
        store.get_mut(id).zero_grad();
        store.get_mut(id).accumulate_grad(g);
    }

    #[test]
    fn zero_gradient_and_zero_decay_leave_parameters_unchanged() {
        let mut store = one_param_store(vec![1.5, -2.0, 0.25]);
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &store).unwrap();
        set_grad(&mut store, "theta", &[0.0, 0.0, 0.0]);
        opt.step(&mut store).unwrap();
        let id = store.find("theta").unwrap();
        assert_eq!(store.get(id).values(), &[1.5, -2.0, 0.25]);
    }

    /// Closed-form single step: with λ = 0 the first update is exactly
    /// −lr · g / (|g| + ε), i.e. ≈ −lr · sign(g).
    #[test]
    fn first_step_matches_the_bias_corrected_closed_form() {
        for &g in &[0.7, -3.0, 1e-4] {
            let mut store = one_param_store(vec![2.0]);
            let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
            let mut opt = AdamW::new(cfg, &store).unwrap();
            set_grad(&mut store, "theta", &[g]);
            opt.step(&mut store).unwrap();
            let id = store.find("theta").unwrap();
            let got = store.get(id).values()[0];
            let want = 2.0 - cfg.lr * (g / (g.abs() + cfg.eps));
            assert!((got - want).abs() <= 1e-15, "g = {g}: got {got}, want {want}");
            assert!((got - (2.0 - cfg.lr * g.signum())).abs() <= 1e-6);
        }
    }

    #[test]
    fn decay_with_zero_grads_shrinks_parameters_geometrically() {
        let mut store = one_param_store(vec![4.0, -2.0]);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &store).unwrap();
        let mut want = [4.0, -2.0];
        for _ in 0..3 {
            set_grad(&mut store, "theta", &[0.0, 0.0]);
            opt.step(&mut store).unwrap();
            for w in &mut want {
                *w -= cfg.lr * cfg.weight_decay * *w;
            }
        }
        let id = store.find("theta").unwrap();
        assert_eq!(store.get(id).values(), &want);
    }

    #[test]
    fn non_finite_gradients_abort_naming_the_parameter() {
        let mut store = one_param_store(vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &store).unwrap();
        set_grad(&mut store, "theta", &[f64::NAN]);
        let err = opt.step(&mut store).unwrap_err();
        assert!(err.to_string().contains("theta"), "got: {err}");
        // parameters untouched after the abort
        let id = store.find("theta").unwrap();
        assert_eq!(store.get(id).values(), &[1.0]);
    }

    #[test]
    fn clipping_equals_stepping_with_prescaled_gradients() {
        let grads = [3.0, -4.0]; // norm 5
        let clip = 2.5; // scale by exactly 0.5
        let cfg = AdamWConfig { clip_norm: clip, ..AdamWConfig::default() };
        let mut clipped = one_param_store(vec![1.0, 1.0]);
        let mut opt_a = AdamW::new(cfg, &clipped).unwrap();
        set_grad(&mut clipped, "theta", &grads);
        opt_a.step(&mut clipped).unwrap();

        let cfg_wide = AdamWConfig { clip_norm: 1e12, ..cfg };
        let mut prescaled = one_param_store(vec![1.0, 1.0]);
        let mut opt_b = AdamW::new(cfg_wide, &prescaled).unwrap();
        set_grad(&mut prescaled, "theta", &[1.5, -2.0]);
        opt_b.step(&mut prescaled).unwrap();

        let a = clipped.find("theta").unwrap();
        let b = prescaled.find("theta").unwrap();
        assert_eq!(clipped.get(a).values(), prescaled.get(b).values());
    }

    #[test]
    fn gradients_below_the_clip_norm_pass_through_unscaled() {
        let cfg = AdamWConfig { clip_norm: 100.0, weight_decay: 0.0, ..AdamWConfig::default() };
        let mut store = one_param_store(vec![0.0]);
        let mut opt = AdamW::new(cfg, &store).unwrap();
        set_grad(&mut store, "theta", &[2.0]);
        opt.step(&mut store).unwrap();
        let id = store.find("theta").unwrap();
        let want = -cfg.lr * (2.0 / (2.0 + cfg.eps));
        assert!((store.get(id).values()[0] - want).abs() <= 1e-15);
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        assert!(AdamWConfig { lr: -1.0, ..AdamWConfig::default() }.validate().is_err());
        assert!(AdamWConfig { beta1: 1.0, ..AdamWConfig::default() }.validate().is_err());
        assert!(AdamWConfig { eps: 0.0, ..AdamWConfig::default() }.validate().is_err());
        assert!(AdamWConfig { clip_norm: 0.0, ..AdamWConfig::default() }.validate().is_err());
        assert!(AdamWConfig { weight_decay: -0.1, ..AdamWConfig::default() }.validate().is_err());
        assert!(AdamWConfig::default().validate().is_ok());
    }
}
