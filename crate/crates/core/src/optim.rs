//! SGD and bias-corrected Adam over a [`ParamStore`].

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

/// Optimizer hyperparameters, independent of any particular store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimSettings {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        OptimSettings { kind: OptimKind::Adam, lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0 && self.eps > 0.0) {
            return Err(CoreError::InvalidConfig("optimizer hyperparameters out of range".into()));
        }
        Ok(())
    }
}

/// Optimizer state. Moment buffers exist iff `kind == Adam`, and are keyed
/// by the trainable parameter names of the store the state was built for.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub settings: OptimSettings,
    moments: Option<BTreeMap<String, (Vec<f64>, Vec<f64>)>>,
}

impl OptimState {
    /// Build state for the trainable parameters of `params`.
    pub fn new(settings: OptimSettings, params: &ParamStore) -> OptimState {
        let moments = match settings.kind {
            OptimKind::Sgd => None,
            OptimKind::Adam => {
                let mut m = BTreeMap::new();
                for (name, t) in params.iter() {
                    if t.is_trainable() {
                        m.insert(name.to_string(), (vec![0.0; t.numel()], vec![0.0; t.numel()]));
                    }
                }
                Some(m)
            }
        };
        OptimState { settings, moments }
    }

    pub fn has_moments(&self) -> bool {
        self.moments.is_some()
    }
}

/// theta <- theta - lr * grad for every trainable parameter; bumps the
/// store's step counter. Errors if nothing is trainable.
pub fn sgd_step(params: &mut ParamStore, lr: f64) -> Result<()> {
    let mut touched = false;
    for (_, t) in params.iter_mut() {
        let Some(grad) = t.grad().map(|g| g.to_vec()) else { continue };
        touched = true;
        for (v, g) in t.data_mut().iter_mut().zip(&grad) {
            *v -= lr * g;
        }
    }
    if !touched {
        return Err(CoreError::MissingGrad { name: "<no trainable parameters>".into() });
    }
    params.bump_step();
    Ok(())
}

/// One bias-corrected Adam update over every trainable parameter.
///
/// m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2
/// theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
pub fn adam_step(params: &mut ParamStore, opt: &mut OptimState) -> Result<()> {
    let settings = opt.settings.clone();
    let Some(moments) = opt.moments.as_mut() else {
        return Err(CoreError::InvalidConfig("adam_step called on SGD state".into()));
    };
    let t = params.step() + 1;
    let bc1 = 1.0 - math::powi(settings.beta1, t);
    let bc2 = 1.0 - math::powi(settings.beta2, t);
    let mut touched = false;
    for (name, tensor) in params.iter_mut() {
        let Some(grad) = tensor.grad().map(|g| g.to_vec()) else { continue };
        let Some((m, v)) = moments.get_mut(name) else {
            return Err(CoreError::MissingGrad { name: name.to_string() });
        };
        touched = true;
        for (((x, g), mi), vi) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = settings.beta1 * *mi + (1.0 - settings.beta1) * g;
            *vi = settings.beta2 * *vi + (1.0 - settings.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *x -= settings.lr * mhat / (math::sqrt(vhat) + settings.eps);
        }
    }
    if !touched {
        return Err(CoreError::MissingGrad { name: "<no trainable parameters>".into() });
    }
    params.bump_step();
    Ok(())
}

/// Apply one step with whichever optimizer the state was built for.
pub fn apply_step(params: &mut ParamStore, opt: &mut OptimState) -> Result<()> {
    match opt.settings.kind {
        OptimKind::Sgd => sgd_step(params, opt.settings.lr),
        OptimKind::Adam => adam_step(params, opt),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut t = Tensor::from_vec(&[1], vec![value]).unwrap();
        t.mark_trainable();
        t.accumulate_grad(&[grad]);
        s.insert("w", t).unwrap();
        s
    }

    #[test]
    fn sgd_hand_computed() {
        let mut s = scalar_store(1.0, 2.0);
        sgd_step(&mut s, 0.1).unwrap();
        assert!(math::abs(s.get("w").unwrap().data()[0] - 0.8) < 1e-15);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn sgd_zero_grad_is_identity() {
        let mut s = scalar_store(1.0, 0.0);
        sgd_step(&mut s, 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn sgd_two_steps_equal_one_summed_step_for_fixed_grad() {
        let mut a = scalar_store(1.0, 2.0);
        sgd_step(&mut a, 0.1).unwrap();
        a.get_mut("w").unwrap().zero_grad();
        a.get_mut("w").unwrap().accumulate_grad(&[2.0]);
        sgd_step(&mut a, 0.1).unwrap();

        let mut b = scalar_store(1.0, 2.0);
        sgd_step(&mut b, 0.2).unwrap();
        assert!(math::abs(a.get("w").unwrap().data()[0] - b.get("w").unwrap().data()[0]) < 1e-15);
    }

    #[test]
    fn sgd_without_grads_is_a_state_error() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(sgd_step(&mut s, 0.1), Err(CoreError::MissingGrad { .. })));
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // First step: mhat = g, vhat = g^2, update = -lr * g/(|g|+eps) ~ -lr*sign(g).
        for &g in &[3.0, -0.5] {
            let mut s = scalar_store(0.0, g);
            let mut opt = OptimState::new(
                OptimSettings { kind: OptimKind::Adam, lr: 0.01, ..Default::default() },
                &s,
            );
            adam_step(&mut s, &mut opt).unwrap();
            let got = s.get("w").unwrap().data()[0];
            let want = -0.01 * g.signum();
            assert!(math::abs(got - want) < 1e-6, "got {got}, want {want}");
        }
    }

    #[test]
    fn adam_zero_grads_never_move_params() {
        let mut s = scalar_store(0.7, 0.0);
        let mut opt = OptimState::new(OptimSettings::default(), &s);
        for _ in 0..5 {
            adam_step(&mut s, &mut opt).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn adam_three_step_trace_matches_independent_recurrence() {
        let grads = [0.3, -1.1, 0.7];
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);

        let mut s = scalar_store(1.0, grads[0]);
        let mut opt = OptimState::new(
            OptimSettings { kind: OptimKind::Adam, lr, beta1: b1, beta2: b2, eps },
            &s,
        );

        // Hand-rolled scalar recurrence.
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mut bc1 = 1.0;
            let mut bc2 = 1.0;
            for _ in 0..t {
                bc1 *= b1;
                bc2 *= b2;
            }
            let mhat = m / (1.0 - bc1);
            let vhat = v / (1.0 - bc2);
            theta -= lr * mhat / (vhat.sqrt() + eps);
        }

        for (i, &g) in grads.iter().enumerate() {
            if i > 0 {
                let w = s.get_mut("w").unwrap();
                w.zero_grad();
                w.accumulate_grad(&[g]);
            }
            adam_step(&mut s, &mut opt).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data()[0], theta);
    }

    #[test]
    fn optimizer_steps_are_deterministic() {
        let run = || {
            let mut s = scalar_store(1.0, 0.25);
            let mut opt = OptimState::new(OptimSettings::default(), &s);
            adam_step(&mut s, &mut opt).unwrap();
            s.get("w").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
