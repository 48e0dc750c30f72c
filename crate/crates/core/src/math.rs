//! Scalar type selection and the handful of transcendental functions the
//! crate needs, routed through `libm` so they work without `std`.

/// Scalar used by every tensor. `f64` unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Scalar used by every tensor. `f64` unless the `f32` feature is enabled.
#[cfg(feature = "f32")]
pub type Real = f32;

#[cfg(not(feature = "f32"))]
mod imp {
    pub use libm::{ceil, cos, exp, log as ln, pow as powf, sin, sqrt, tanh};
}

#[cfg(feature = "f32")]
mod imp {
    pub use libm::{ceilf as ceil, cosf as cos, expf as exp, logf as ln, powf, sinf as sin, sqrtf as sqrt, tanhf as tanh};
}

#[inline]
pub fn exp(x: Real) -> Real {
    imp::exp(x)
}

#[inline]
pub fn ln(x: Real) -> Real {
    imp::ln(x)
}

#[inline]
pub fn sqrt(x: Real) -> Real {
    imp::sqrt(x)
}

#[inline]
pub fn tanh(x: Real) -> Real {
    imp::tanh(x)
}

#[inline]
pub fn sin(x: Real) -> Real {
    imp::sin(x)
}

#[inline]
pub fn cos(x: Real) -> Real {
    imp::cos(x)
}

#[inline]
pub fn ceil(x: Real) -> Real {
    imp::ceil(x)
}

#[inline]
pub fn powf(x: Real, y: Real) -> Real {
    imp::powf(x, y)
}

/// Logistic sigmoid, evaluated so that large negative inputs do not overflow.
#[inline]
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

pub const LN_2: Real = core::f64::consts::LN_2 as Real;
