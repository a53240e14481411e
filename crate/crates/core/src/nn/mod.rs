//! Small dense networks with hand-written reverse-mode gradients.
//!
//! Nothing here builds a computation graph. Each network has a fixed topology, so the backward
//! pass is written out directly over the stored forward activations.

pub mod adam;
pub mod basis;
pub mod dense;
pub mod gradcheck;
pub mod io;

pub use adam::Adam;
pub use basis::RandomBasis;
pub use dense::{Activation, DenseNet, GradientRecord, Trace};
pub use gradcheck::{check_gradient, numeric_gradient};

use crate::real::Real;

/// `log(1 + e^x)` without overflow for large `|x|`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softplus and its derivative from a single exponential.
#[inline]
pub fn softplus_with_slope(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let sp = x.max(0.0) + e.ln_1p();
    let slope = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (sp, slope)
}

pub fn softplus_real<T: Real>(x: T) -> T {
    let (v, d) = softplus_with_slope(x.val());
    T::chain(v, &[d], &[x])
}

pub fn tanh_real<T: Real>(x: T) -> T {
    let t = x.val().tanh();
    T::chain(t, &[1.0 - t * t], &[x])
}
