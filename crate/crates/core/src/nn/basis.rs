use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{softplus_real, softplus_with_slope};
use crate::error::{IrcError, Result};
use crate::real::Real;

/// A bank of `n_b` frozen shallow networks, each mapping the input through one softplus hidden
/// layer to a scalar feature.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomBasis {
    input_dim: usize,
    hidden: usize,
    n_b: usize,
    /// `[feature][unit][input]`
    w1: Vec<f64>,
    /// `[feature][unit]`
    b1: Vec<f64>,
    /// `[feature][unit]`
    w2: Vec<f64>,
}

impl RandomBasis {
    /// Input weights `N(0, 1/input_dim)`, hidden biases `N(0, 1)`, output weights `N(0, 1/hidden)`.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, n_b: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if input_dim == 0 || n_b == 0 || hidden == 0 {
            return Err(IrcError::Config(format!(
                "random basis needs positive sizes, got input {input_dim}, features {n_b}, hidden {hidden}"
            )));
        }
        let win = Normal::new(0.0, (1.0 / input_dim as f64).sqrt()).expect("positive std");
        let wout = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("positive std");
        let w1 = (0..n_b * hidden * input_dim).map(|_| win.sample(rng)).collect();
        let b1 = (0..n_b * hidden).map(|_| StandardNormal.sample(rng)).collect();
        let w2 = (0..n_b * hidden).map(|_| wout.sample(rng)).collect();
        Ok(RandomBasis { input_dim, hidden, n_b, w1, b1, w2 })
    }

    pub fn from_parts(input_dim: usize, n_b: usize, hidden: usize, w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>) -> Result<Self> {
        let checks = [
            ("basis input weights", n_b * hidden * input_dim, w1.len()),
            ("basis hidden biases", n_b * hidden, b1.len()),
            ("basis output weights", n_b * hidden, w2.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(IrcError::DimensionMismatch { what, expected, got });
            }
        }
        if w1.iter().chain(&b1).chain(&w2).any(|v| !v.is_finite()) {
            return Err(IrcError::NonFinite("random basis weights".into()));
        }
        Ok(RandomBasis { input_dim, hidden, n_b, w1, b1, w2 })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn hidden(&self) -> usize {
        self.hidden
    }
    pub fn n_features(&self) -> usize {
        self.n_b
    }
    pub fn parts(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.w1, &self.b1, &self.w2)
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(IrcError::DimensionMismatch {
                what: "basis input",
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(self.eval_real(x))
    }

    pub fn eval_real<T: Real>(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.input_dim, "basis input");
        let mut out = self.eval_suffixes(x, &[&[]]);
        out.pop().unwrap()
    }

    /// Features of `prefix ++ suffix` for each constant suffix. The prefix contribution to the
    /// hidden pre-activations is computed once and shared.
    pub fn eval_suffixes<T: Real>(&self, prefix: &[T], suffixes: &[&[f64]]) -> Vec<Vec<T>> {
        let p = prefix.len();
        let d = self.input_dim;
        let mut out: Vec<Vec<T>> = suffixes.iter().map(|_| Vec::with_capacity(self.n_b)).collect();
        let mut acc = vec![T::cst(0.0); suffixes.len()];
        for f in 0..self.n_b {
            acc.fill(T::cst(0.0));
            for u in 0..self.hidden {
                let k = f * self.hidden + u;
                let w = &self.w1[k * d..(k + 1) * d];
                let mut shared = T::cst(0.0);
                for (wi, xi) in w[..p].iter().zip(prefix) {
                    shared += xi.scale(*wi);
                }
                for (s, suffix) in suffixes.iter().enumerate() {
                    debug_assert_eq!(p + suffix.len(), d);
                    let c = self.b1[k] + w[p..].iter().zip(*suffix).map(|(a, b)| a * b).sum::<f64>();
                    let z = shared + T::cst(c);
                    acc[s] += softplus_real(z).scale(self.w2[k]);
                }
            }
            for (o, a) in out.iter_mut().zip(&acc) {
                o.push(*a);
            }
        }
        out
    }

    /// Plain-valued [`Self::eval_suffixes`] that also returns, per suffix, the Jacobian of the
    /// features with respect to the prefix (`[feature][prefix]`, row-major).
    pub fn eval_suffixes_with_jacobian(&self, prefix: &[f64], suffixes: &[&[f64]]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let p = prefix.len();
        let d = self.input_dim;
        let mut out: Vec<(Vec<f64>, Vec<f64>)> = suffixes
            .iter()
            .map(|_| (Vec::with_capacity(self.n_b), vec![0.0; self.n_b * p]))
            .collect();
        let mut acc = vec![0.0; suffixes.len()];
        for f in 0..self.n_b {
            acc.fill(0.0);
            for u in 0..self.hidden {
                let k = f * self.hidden + u;
                let w = &self.w1[k * d..(k + 1) * d];
                let shared = self.b1[k] + w[..p].iter().zip(prefix).map(|(a, b)| a * b).sum::<f64>();
                for (s, suffix) in suffixes.iter().enumerate() {
                    let z = shared + w[p..].iter().zip(*suffix).map(|(a, b)| a * b).sum::<f64>();
                    let (v, slope) = softplus_with_slope(z);
                    acc[s] += v * self.w2[k];
                    let c = slope * self.w2[k];
                    for (j, wj) in out[s].1[f * p..(f + 1) * p].iter_mut().zip(&w[..p]) {
                        *j += c * wj;
                    }
                }
            }
            for (o, a) in out.iter_mut().zip(&acc) {
                o.0.push(*a);
            }
        }
        out
    }

    /// Gradient of `upstream . features(x)` with respect to `x`.
    pub fn input_gradient(&self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        let d = self.input_dim;
        let mut g = vec![0.0; d];
        for f in 0..self.n_b {
            if upstream[f] == 0.0 {
                continue;
            }
            for u in 0..self.hidden {
                let k = f * self.hidden + u;
                let w = &self.w1[k * d..(k + 1) * d];
                let z = self.b1[k] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                let s = softplus_with_slope(z).1 * self.w2[k] * upstream[f];
                for (gi, wi) in g.iter_mut().zip(w) {
                    *gi += s * wi;
                }
            }
        }
        g
    }
}
