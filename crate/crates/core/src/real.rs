//! Scalar abstraction shared by the plain and the differentiated code paths.
//!
//! Task dynamics and belief recursions are written once, generic over [`Real`]. Running them
//! with `f64` gives values; running them with [`Dual`] additionally carries the derivative with
//! respect to up to [`MAX_DUAL`] inference coordinates (forward mode).

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Maximum number of simultaneously differentiated parameters.
pub const MAX_DUAL: usize = 4;

pub trait Real:
    Copy
    + Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    /// Whether derivative information is carried. Callers skip gradient-only work otherwise.
    const TRACKS_GRADIENT: bool;

    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    /// Replace the value, keeping the derivative part.
    fn with_value(self, v: f64) -> Self;

    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    /// Build `y` from an externally differentiated function: `y.val() = value` and
    /// `dy = sum_j partials[j] * d(inputs[j])`. `partials` may be empty when gradients are
    /// not tracked.
    fn chain(value: f64, partials: &[f64], inputs: &[Self]) -> Self;

    fn scale(self, k: f64) -> Self {
        self * Self::cst(k)
    }

    fn square(self) -> Self {
        self * self
    }
}

impl Real for f64 {
    const TRACKS_GRADIENT: bool = false;

    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn val(self) -> f64 {
        self
    }
    #[inline]
    fn with_value(self, v: f64) -> Self {
        v
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn chain(value: f64, _partials: &[f64], _inputs: &[Self]) -> Self {
        value
    }
}

/// First-order dual number with a fixed-width gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: [f64; MAX_DUAL],
}

impl Dual {
    pub fn constant(v: f64) -> Self {
        Dual {
            v,
            d: [0.0; MAX_DUAL],
        }
    }

    /// Independent variable seeded in gradient slot `slot`.
    pub fn variable(v: f64, slot: usize) -> Self {
        let mut d = [0.0; MAX_DUAL];
        d[slot] = 1.0;
        Dual { v, d }
    }

    #[inline]
    fn map(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x *= dv;
        }
        Dual { v, d }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        let mut d = self.d;
        for (x, y) in d.iter_mut().zip(o.d) {
            *x += y;
        }
        Dual { v: self.v + o.v, d }
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        *self = *self + o;
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        let mut d = self.d;
        for (x, y) in d.iter_mut().zip(o.d) {
            *x -= y;
        }
        Dual { v: self.v - o.v, d }
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        let mut d = [0.0; MAX_DUAL];
        for (i, x) in d.iter_mut().enumerate() {
            *x = self.d[i] * o.v + self.v * o.d[i];
        }
        Dual { v: self.v * o.v, d }
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut d = [0.0; MAX_DUAL];
        for (i, x) in d.iter_mut().enumerate() {
            *x = (self.d[i] - v * o.d[i]) * inv;
        }
        Dual { v, d }
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        self.map(-self.v, -1.0)
    }
}

impl Real for Dual {
    const TRACKS_GRADIENT: bool = true;

    #[inline]
    fn cst(v: f64) -> Self {
        Dual::constant(v)
    }
    #[inline]
    fn val(self) -> f64 {
        self.v
    }
    #[inline]
    fn with_value(self, v: f64) -> Self {
        Dual { v, d: self.d }
    }
    fn sin(self) -> Self {
        self.map(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.map(self.v.cos(), -self.v.sin())
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.map(e, e)
    }
    fn ln(self) -> Self {
        self.map(self.v.ln(), 1.0 / self.v)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.map(s, 0.5 / s)
    }
    fn chain(value: f64, partials: &[f64], inputs: &[Self]) -> Self {
        let mut d = [0.0; MAX_DUAL];
        for (p, x) in partials.iter().zip(inputs) {
            if *p != 0.0 {
                for (acc, dx) in d.iter_mut().zip(x.d) {
                    *acc += p * dx;
                }
            }
        }
        Dual { v: value, d }
    }
}
