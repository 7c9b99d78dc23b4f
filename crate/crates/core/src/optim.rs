use alloc::format;
use alloc::string::ToString;
use alloc::vec;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Adam with the max-of-second-moment (AMSGrad) correction.
    AdamAmsgrad,
    /// SGD with classical momentum.
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn adam_amsgrad(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamAmsgrad,
            learning_rate,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }

    pub fn sgd_momentum(learning_rate: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".to_string()));
        }
        Ok(())
    }
}

/// Applies one update to every trainable entry of `store` from its gradient
/// buffer. Fails if any trainable entry has not received a gradient since
/// the last [`ParameterStore::zero_grad`].
pub fn optimizer_step<T: Real>(store: &mut ParameterStore<T>, config: &OptimizerConfig) -> Result<()> {
    config.validate()?;
    if let Some(e) = store.entries().find(|e| e.trainable && !e.has_grad) {
        return Err(Error::MissingGradient(e.name.clone()));
    }
    let lr = T::lit(config.learning_rate);
    for e in store.entries_mut().filter(|e| e.trainable) {
        let n = e.value.len();
        let st = &mut e.state;
        st.step += 1;
        match config.kind {
            OptimizerKind::SgdMomentum => {
                if st.velocity.len() != n {
                    st.velocity = vec![T::zero(); n];
                }
                let m = T::lit(config.momentum);
                for ((p, v), &g) in e.value.data_mut().iter_mut().zip(&mut st.velocity).zip(e.grad.data()) {
                    *v = m * *v - lr * g;
                    *p += *v;
                }
            }
            OptimizerKind::AdamAmsgrad => {
                if st.first_moment.len() != n {
                    st.first_moment = vec![T::zero(); n];
                    st.second_moment = vec![T::zero(); n];
                    st.max_second_moment = vec![T::zero(); n];
                }
                let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
                let t = st.step as i32;
                let bc1 = T::one() - b1.powi(t);
                let bc2_sqrt = (T::one() - b2.powi(t)).sqrt();
                let eps = T::lit(config.epsilon);
                for i in 0..n {
                    let g = e.grad.data()[i];
                    let m = b1 * st.first_moment[i] + (T::one() - b1) * g;
                    let v = b2 * st.second_moment[i] + (T::one() - b2) * g * g;
                    let vmax = st.max_second_moment[i].max(v);
                    st.first_moment[i] = m;
                    st.second_moment[i] = v;
                    st.max_second_moment[i] = vmax;
                    let denom = vmax.sqrt() / bc2_sqrt + eps;
                    e.value.data_mut()[i] -= lr * (m / bc1) / denom;
                }
            }
        }
        if !e.value.is_finite() {
            return Err(Error::NonFinite { op: "optimizer_step" });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(p: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new(0);
        s.add_param("p", Tensor::scalar(p)).unwrap();
        s
    }

    fn step_with_grad(s: &mut ParameterStore<f64>, g: f64, cfg: &OptimizerConfig) {
        s.zero_grad();
        let id = s.id("p").unwrap();
        s.accumulate_grad(id, &[g]).unwrap();
        optimizer_step(s, cfg).unwrap();
    }

    #[test]
    fn sgd_without_momentum() {
        let mut s = scalar_store(0.0);
        step_with_grad(&mut s, 1.0, &OptimizerConfig::sgd_momentum(0.1, 0.0));
        assert!((s.get("p").unwrap().data()[0] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        // v1 = -0.1, p1 = -0.1; v2 = 0.9 * -0.1 - 0.1 = -0.19, p2 = -0.29
        let mut s = scalar_store(0.0);
        let cfg = OptimizerConfig::sgd_momentum(0.1, 0.9);
        step_with_grad(&mut s, 1.0, &cfg);
        step_with_grad(&mut s, 1.0, &cfg);
        assert!((s.get("p").unwrap().data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn amsgrad_single_step_matches_hand_formula() {
        let (p0, g, lr, b1, b2, eps): (f64, f64, f64, f64, f64, f64) = (0.5, 0.3, 1e-3, 0.9, 0.999, 1e-7);
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let denom = v.sqrt() / (1.0 - b2).sqrt() + eps;
        let expected = p0 - lr * m_hat / denom;

        let mut s = scalar_store(p0);
        step_with_grad(&mut s, g, &OptimizerConfig::adam_amsgrad(lr));
        assert!((s.get("p").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn amsgrad_keeps_max_second_moment() {
        let mut s = scalar_store(0.0);
        let cfg = OptimizerConfig::adam_amsgrad(1e-3);
        step_with_grad(&mut s, 10.0, &cfg);
        step_with_grad(&mut s, 0.0, &cfg);
        let st = &s.entry(s.id("p").unwrap()).state;
        assert!(st.max_second_moment[0] > st.second_moment[0]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = scalar_store(0.0);
        let err = optimizer_step(&mut s, &OptimizerConfig::sgd_momentum(0.1, 0.9)).unwrap_err();
        assert_eq!(err, Error::MissingGradient("p".into()));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(OptimizerConfig::sgd_momentum(0.0, 0.9).validate().is_err());
        assert!(OptimizerConfig::sgd_momentum(0.1, 1.0).validate().is_err());
        let mut c = OptimizerConfig::adam_amsgrad(0.1);
        c.beta2 = 1.0;
        assert!(c.validate().is_err());
    }
}
