//! Central-difference gradient checker.
//!
//! The checker is the independent oracle for every analytic backward pass
//! in this crate: it perturbs each parameter scalar in turn, re-evaluates a
//! loss closure, and compares the finite-difference slope against the
//! gradient buffers populated by the implementation under test.

use crate::math;
use crate::params::ParamStore;

/// Relative error with an absolute floor for near-zero gradients:
/// |a - b| / max(1, |a|, |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    math::abs(a - b) / math::abs(a).max(math::abs(b)).max(1.0)
}

/// Compare analytic gradients against central finite differences.
///
/// `loss` must be a deterministic function of the parameter values.
/// `analytic` holds the gradients to check (only trainable parameters whose
/// name satisfies `filter` participate). Returns the maximum relative error
/// over all checked scalars; 0.0 if nothing matched the filter.
pub fn grad_check<L, F>(params: &ParamStore, analytic: &ParamStore, h: f64, filter: F, mut loss: L) -> f64
where
    L: FnMut(&ParamStore) -> f64,
    F: Fn(&str) -> bool,
{
    let mut work = params.clone();
    let names: alloc::vec::Vec<alloc::string::String> = params
        .iter()
        .filter(|(name, t)| filter(name) && t.is_trainable())
        .map(|(name, _)| alloc::string::String::from(name))
        .collect();
    let mut worst = 0.0f64;
    for name in &names {
        let n = params.get(name).unwrap().numel();
        for idx in 0..n {
            let orig = params.get(name).unwrap().data()[idx];
            work.get_mut(name).unwrap().data_mut()[idx] = orig + h;
            let up = loss(&work);
            work.get_mut(name).unwrap().data_mut()[idx] = orig - h;
            let down = loss(&work);
            work.get_mut(name).unwrap().data_mut()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic.get(name).and_then(|t| t.grad()).map_or(0.0, |g| g[idx]);
            worst = worst.max(rel_err(an, fd));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    /// Linear model, squared loss: the analytic gradient is known in
    /// closed form and central differences are exact for quadratics.
    #[test]
    fn linear_model_squared_loss_is_nearly_exact() {
        let x = [0.3, -1.2, 2.0];
        let target = 0.7;
        let mut params = ParamStore::new();
        let mut w = Tensor::from_vec(&[3], vec![0.1, 0.2, -0.4]).unwrap();
        w.mark_trainable();
        params.insert("w", w).unwrap();

        let predict = |p: &ParamStore| -> f64 {
            p.get("w").unwrap().data().iter().zip(&x).map(|(a, b)| a * b).sum()
        };
        let loss = |p: &ParamStore| {
            let e = predict(p) - target;
            0.5 * e * e
        };

        let mut analytic = params.clone();
        let err = predict(&params) - target;
        let grad: vec::Vec<f64> = x.iter().map(|&xi| err * xi).collect();
        analytic.get_mut("w").unwrap().accumulate_grad(&grad);

        let worst = grad_check(&params, &analytic, 1e-5, |_| true, loss);
        assert!(worst < 1e-8, "worst rel err {worst}");
    }

    #[test]
    fn constant_loss_gives_zero_both_ways() {
        let mut params = ParamStore::new();
        let mut w = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        w.mark_trainable();
        params.insert("w", w).unwrap();
        let analytic = params.clone();
        let worst = grad_check(&params, &analytic, 1e-5, |_| true, |_| 42.0);
        assert_eq!(worst, 0.0);
    }
}
