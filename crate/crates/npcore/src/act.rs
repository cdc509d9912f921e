// SPDX-License-Identifier: Apache-2.0

use crate::error::{invalid, Result};

/// `sigma(x) = max(x, alpha*x)^p`, positively homogeneous of degree `p`.
///
/// `alpha` must not exceed 1 so that `max(x, alpha*x)` is `x` on the positive
/// half-line and `alpha*x` on the negative one.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Activation {
    pub p: u32,
    pub alpha: f64,
}

impl Activation {
    pub fn new(p: u32, alpha: f64) -> Result<Self> {
        if p == 0 {
            return Err(invalid("activation degree p must be >= 1"));
        }
        if !alpha.is_finite() || alpha > 1.0 {
            return Err(invalid("activation slope alpha must be finite and <= 1"));
        }
        Ok(Activation { p, alpha })
    }

    pub const fn relu() -> Self {
        Activation { p: 1, alpha: 0.0 }
    }

    pub const fn linear() -> Self {
        Activation { p: 1, alpha: 1.0 }
    }

    pub const fn square() -> Self {
        Activation { p: 2, alpha: 1.0 }
    }

    pub const fn leaky(alpha: f64) -> Self {
        Activation { p: 1, alpha }
    }

    pub fn is_linear(&self) -> bool {
        self.p == 1 && self.alpha == 1.0
    }

    /// True when `sigma` is a polynomial (alpha = 1), i.e. smooth everywhere.
    pub fn is_smooth(&self) -> bool {
        self.alpha == 1.0 || self.p >= 2
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        let m = if x > 0.0 { x } else { self.alpha * x };
        match self.p {
            1 => m,
            2 => m * m,
            p => libm::pow(m, p as f64),
        }
    }

    /// Derivative with the convention `sigma'(0) = 0` at the kink. The identity
    /// (p = 1, alpha = 1) has no kink and returns 1 everywhere.
    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        let slope = if x > 0.0 {
            1.0
        } else if x < 0.0 {
            self.alpha
        } else if self.is_linear() {
            return 1.0;
        } else {
            0.0
        };
        let m = if x > 0.0 { x } else { self.alpha * x };
        let pm = match self.p {
            1 => 1.0,
            2 => 2.0 * m,
            p => p as f64 * libm::pow(m, (p - 1) as f64),
        };
        pm * slope
    }
}

pub fn act_apply(a: Activation, x: f64) -> f64 {
    a.apply(x)
}

pub fn act_deriv(a: Activation, x: f64) -> f64 {
    a.deriv(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spot_values() {
        assert_eq!(act_apply(Activation { p: 2, alpha: 0.0 }, -1.0), 0.0);
        assert_eq!(act_apply(Activation::linear(), 7.0), 7.0);
        assert_eq!(act_apply(Activation::square(), 3.0), 9.0);
        assert_eq!(act_apply(Activation::square(), -3.0), 9.0);
        assert_eq!(act_apply(Activation::leaky(0.5), -2.0), -1.0);
    }

    #[test]
    fn derivative_convention() {
        assert_eq!(act_deriv(Activation::relu(), 0.0), 0.0);
        assert_eq!(act_deriv(Activation::leaky(0.5), 0.0), 0.0);
        assert_eq!(act_deriv(Activation::linear(), 0.0), 1.0);
        assert_eq!(act_deriv(Activation { p: 2, alpha: 0.0 }, 0.0), 0.0);
        assert_eq!(act_deriv(Activation::leaky(0.5), -3.0), 0.5);
        assert_eq!(act_deriv(Activation::square(), -3.0), -6.0);
        assert_eq!(act_deriv(Activation { p: 3, alpha: 0.5 }, -2.0), 3.0 * 1.0 * 0.5);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Activation::new(0, 0.0).is_err());
        assert!(Activation::new(1, 1.5).is_err());
        assert!(Activation::new(1, f64::NAN).is_err());
    }

    #[test]
    fn derivative_matches_difference_quotient() {
        for a in [Activation::relu(), Activation::leaky(0.3), Activation { p: 3, alpha: -0.5 }, Activation::square()] {
            for x in [-1.7, -0.2, 0.4, 2.5] {
                let h = 1e-6;
                let fd = (a.apply(x + h) - a.apply(x - h)) / (2.0 * h);
                assert!((fd - a.deriv(x)).abs() < 1e-6, "{a:?} at {x}");
            }
        }
    }
}
