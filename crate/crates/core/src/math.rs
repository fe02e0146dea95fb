//! Thin wrappers over `libm` so the kernel stays `no_std`.
//!
//! Routing every transcendental through `libm` also makes results
//! bit-identical across platforms, which the reproducibility contract
//! relies on.

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

/// Integer power by repeated multiplication; used for optimizer bias
/// correction where exponents stay small.
#[inline]
pub fn powi(base: f64, n: u64) -> f64 {
    let mut out = 1.0;
    for _ in 0..n {
        out *= base;
    }
    out
}

#[inline]
pub fn is_finite(x: f64) -> bool {
    x.is_finite()
}

/// Large negative stand-in for log(0); keeps log-space arithmetic total.
pub const LOG_ZERO: f64 = -1e30;

/// Values at or below this are treated as log(0).
pub const LOG_ZERO_EDGE: f64 = -1e29;

/// log(exp(a) + exp(b)) with the [`LOG_ZERO`] sentinel preserved.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a <= LOG_ZERO_EDGE {
        return b;
    }
    if b <= LOG_ZERO_EDGE {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + libm::log1p(libm::exp(lo - hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_add_matches_direct_sum() {
        let a = ln(0.3);
        let b = ln(0.45);
        assert!(abs(exp(log_add(a, b)) - 0.75) < 1e-12);
    }

    #[test]
    fn log_add_absorbs_sentinel() {
        assert_eq!(log_add(LOG_ZERO, -1.5), -1.5);
        assert_eq!(log_add(-1.5, LOG_ZERO), -1.5);
        assert_eq!(log_add(LOG_ZERO, LOG_ZERO), LOG_ZERO);
    }

    #[test]
    fn powi_small_exponents() {
        assert_eq!(powi(2.0, 0), 1.0);
        assert_eq!(powi(2.0, 10), 1024.0);
    }
}
