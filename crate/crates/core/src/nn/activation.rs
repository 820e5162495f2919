//! Activation functions and their derivatives.
//!
//! Mish is `x * tanh(softplus(x))`. Its first and second derivatives are
//! evaluated in closed form with `δ = e^{2x} + 2e^x + 2`:
//!
//! ```text
//! Ψ'(x)  = e^x ω / δ²,   ω = 4(x+1) + 4e^{2x} + e^{3x} + e^x(4x+6)
//! Ψ''(x) = 4e^x (2e^{3x} + 6e^{2x} + 8e^x + 4 + 2x + 2xe^x - 3xe^{2x} - 2xe^{3x}) / δ³
//! ```
//!
//! Beyond `|x| > 30` the asymptotic forms are used: `Ψ(x) = x` on the
//! right, `Ψ(x) = x e^x` on the left.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Inputs with magnitude above this use the asymptotic Mish forms.
pub const MISH_SATURATION: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Mish,
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
}

impl ActivationKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Mish => mish_scalar(x),
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Softplus => softplus(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Mish => mish_grad_scalar(x),
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::Softplus => sigmoid(x),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn mish_scalar(x: f64) -> f64 {
    if x > MISH_SATURATION {
        x
    } else if x < -MISH_SATURATION {
        x * x.exp()
    } else {
        // tanh(ln(1 + e^x)) = n / (n + 2) with n = e^x (e^x + 2)
        let e = x.exp();
        let n = e * (e + 2.0);
        x * n / (n + 2.0)
    }
}

pub fn mish_grad_scalar(x: f64) -> f64 {
    if x > MISH_SATURATION {
        1.0
    } else if x < -MISH_SATURATION {
        x.exp() * (1.0 + x)
    } else {
        let e = x.exp();
        let e2 = e * e;
        let omega = 4.0 * (x + 1.0) + 4.0 * e2 + e2 * e + e * (4.0 * x + 6.0);
        let delta = e2 + 2.0 * e + 2.0;
        e * omega / (delta * delta)
    }
}

pub fn mish_grad2_scalar(x: f64) -> f64 {
    if x > MISH_SATURATION {
        0.0
    } else if x < -MISH_SATURATION {
        x.exp() * (2.0 + x)
    } else {
        let e = x.exp();
        let e2 = e * e;
        let e3 = e2 * e;
        let num = 2.0 * e3 + 6.0 * e2 + 8.0 * e + 4.0 + 2.0 * x + 2.0 * x * e
            - 3.0 * x * e2
            - 2.0 * x * e3;
        let delta = e2 + 2.0 * e + 2.0;
        4.0 * e * num / (delta * delta * delta)
    }
}

pub fn mish(x: &Tensor) -> Tensor {
    x.map(mish_scalar)
}

pub fn mish_grad(x: &Tensor) -> Tensor {
    x.map(mish_grad_scalar)
}

pub fn mish_grad2(x: &Tensor) -> Tensor {
    x.map(mish_grad2_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn mish_known_values() {
        assert_eq!(mish_scalar(0.0), 0.0);
        // 1 * tanh(ln(1 + e)) evaluated at 40 digits: 0.86509838826731...
        assert_abs_diff_eq!(mish_scalar(1.0), 0.865_098_388_267_310_3, epsilon = 1e-12);
    }

    #[test]
    fn mish_grad_at_zero_is_three_fifths() {
        // tanh(ln 2) = 3/5 and the x-term vanishes.
        assert_abs_diff_eq!(mish_grad_scalar(0.0), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(central(mish_scalar, 0.0, 1e-6), 0.6, epsilon = 1e-9);
    }

    #[test]
    fn mish_grad2_at_zero() {
        // 4 * (2 + 6 + 8 + 4) / 5^3
        assert_abs_diff_eq!(mish_grad2_scalar(0.0), 0.64, epsilon = 1e-15);
    }

    #[test]
    fn saturation_limits() {
        assert_abs_diff_eq!(mish_grad_scalar(30.0), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(mish_grad2_scalar(30.0), 0.0, epsilon = 1e-5);
        assert_abs_diff_eq!(mish_scalar(30.0), 30.0, epsilon = 1e-6);
        assert!(mish_scalar(-30.0) < 0.0 && mish_scalar(-30.0) > -1e-6);
        assert!(mish_grad_scalar(1e6).is_finite() && mish_scalar(-1e6).is_finite());
    }

    #[test]
    fn guard_switch_is_continuous() {
        for edge in [-MISH_SATURATION, MISH_SATURATION] {
            let (lo, hi) = (edge - 1e-9, edge + 1e-9);
            assert_abs_diff_eq!(mish_scalar(lo), mish_scalar(hi), epsilon = 1e-8);
            assert_abs_diff_eq!(mish_grad_scalar(lo), mish_grad_scalar(hi), epsilon = 1e-8);
            assert_abs_diff_eq!(mish_grad2_scalar(lo), mish_grad2_scalar(hi), epsilon = 1e-8);
        }
    }

    #[test]
    fn derivatives_of_other_activations() {
        for kind in [
            ActivationKind::Sigmoid,
            ActivationKind::Tanh,
            ActivationKind::Softplus,
            ActivationKind::Relu,
        ] {
            for x in [-2.3, -0.4, 0.7, 1.9] {
                let fd = central(|v| kind.apply(v), x, 1e-6);
                assert_abs_diff_eq!(kind.derivative(x), fd, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert_abs_diff_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn activation_kind_serde_names() {
        let s = serde_json::to_string(&ActivationKind::Mish).unwrap();
        assert_eq!(s, "\"mish\"");
    }
}
