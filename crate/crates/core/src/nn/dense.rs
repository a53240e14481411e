use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{softplus_with_slope, Real};
use crate::error::{IrcError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Softplus,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Softplus => softplus_with_slope(z).0,
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at pre-activation `z`, given the activation output `y`.
    #[inline]
    fn slope(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Softplus => softplus_with_slope(z).1,
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Softplus => "softplus",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "softplus" => Some(Activation::Softplus),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Softplus => 1,
            Activation::Tanh => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Softplus),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Fully connected network. Parameters live in one flat vector: every layer's weight matrix
/// (row-major, `out x in`) in order, followed by every layer's bias vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    hidden: Activation,
    output: Activation,
    params: Vec<f64>,
    w_off: Vec<usize>,
    b_off: Vec<usize>,
}

/// Output value together with gradients of `upstream . output`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRecord {
    pub value: Vec<f64>,
    pub grad_params: Vec<f64>,
    pub grad_input: Vec<f64>,
}

/// Stored forward pass. `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
#[derive(Clone, Debug)]
pub struct Trace {
    pub pre: Vec<Vec<f64>>,
    pub acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }
}

impl DenseNet {
    /// Zero-initialised network.
    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(IrcError::Config(format!(
                "network needs at least two non-empty layers, got {sizes:?}"
            )));
        }
        let mut w_off = Vec::with_capacity(sizes.len() - 1);
        let mut off = 0;
        for w in sizes.windows(2) {
            w_off.push(off);
            off += w[0] * w[1];
        }
        let mut b_off = Vec::with_capacity(sizes.len() - 1);
        for &n in &sizes[1..] {
            b_off.push(off);
            off += n;
        }
        Ok(DenseNet {
            sizes: sizes.to_vec(),
            hidden,
            output,
            params: vec![0.0; off],
            w_off,
            b_off,
        })
    }

    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes, hidden, output)?;
        for l in 0..net.n_layers() {
            let fan_in = net.sizes[l];
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
            let (start, len) = (net.w_off[l], fan_in * net.sizes[l + 1]);
            for w in &mut net.params[start..start + len] {
                *w = normal.sample(rng);
            }
        }
        Ok(net)
    }

    /// Multiply the weights of one layer by `s`.
    pub fn scale_layer(&mut self, layer: usize, s: f64) {
        let (start, len) = (self.w_off[layer], self.sizes[layer] * self.sizes[layer + 1]);
        for w in &mut self.params[start..start + len] {
            *w *= s;
        }
    }

    pub fn from_params(sizes: &[usize], hidden: Activation, output: Activation, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes, hidden, output)?;
        if params.len() != net.params.len() {
            return Err(IrcError::DimensionMismatch {
                what: "network parameters",
                expected: net.params.len(),
                got: params.len(),
            });
        }
        if let Some(bad) = params.iter().position(|p| !p.is_finite()) {
            return Err(IrcError::NonFinite(format!("network parameter {bad}")));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }
    pub fn output_activation(&self) -> Activation {
        self.output
    }
    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }
    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }
    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }
    pub fn n_params(&self) -> usize {
        self.params.len()
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn weight_index(&self, layer: usize, row: usize, col: usize) -> usize {
        self.w_off[layer] + row * self.sizes[layer] + col
    }

    pub fn bias_index(&self, layer: usize, row: usize) -> usize {
        self.b_off[layer] + row
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            self.output
        } else {
            self.hidden
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(IrcError::DimensionMismatch {
                what: "network input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn layer(&self, l: usize, x: &[f64], pre: &mut Vec<f64>, out: &mut Vec<f64>) {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = &self.params[self.w_off[l]..self.w_off[l] + n_in * n_out];
        let b = &self.params[self.b_off[l]..self.b_off[l] + n_out];
        let act = self.activation(l);
        pre.clear();
        out.clear();
        for (row, bias) in w.chunks_exact(n_in).zip(b) {
            let z = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            pre.push(z);
            out.push(act.apply(z));
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut pre = Vec::new();
        let mut out = Vec::new();
        for l in 0..self.n_layers() {
            self.layer(l, &cur, &mut pre, &mut out);
            std::mem::swap(&mut cur, &mut out);
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut acts = vec![x.to_vec()];
        let mut pres = Vec::with_capacity(self.n_layers());
        for l in 0..self.n_layers() {
            let (mut pre, mut out) = (Vec::new(), Vec::new());
            self.layer(l, &acts[l], &mut pre, &mut out);
            pres.push(pre);
            acts.push(out);
        }
        Ok(Trace { pre: pres, acts })
    }

    /// Reverse pass for `upstream . output`. Parameter gradients are *added* into
    /// `grad_params` when given; the input gradient is returned.
    pub fn backward_trace(&self, trace: &Trace, upstream: &[f64], mut grad_params: Option<&mut [f64]>) -> Vec<f64> {
        debug_assert_eq!(upstream.len(), self.output_dim());
        let last = self.n_layers() - 1;
        let act = self.activation(last);
        let mut delta: Vec<f64> = upstream
            .iter()
            .zip(&trace.pre[last])
            .zip(&trace.acts[last + 1])
            .map(|((u, &z), &y)| u * act.slope(z, y))
            .collect();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let x = &trace.acts[l];
            if let Some(g) = grad_params.as_deref_mut() {
                let gw = &mut g[self.w_off[l]..self.w_off[l] + n_in * n_out];
                for (row, d) in gw.chunks_exact_mut(n_in).zip(&delta) {
                    if *d != 0.0 {
                        for (gi, xi) in row.iter_mut().zip(x) {
                            *gi += d * xi;
                        }
                    }
                }
                for (gb, d) in g[self.b_off[l]..self.b_off[l] + n_out].iter_mut().zip(&delta) {
                    *gb += d;
                }
            }
            let w = &self.params[self.w_off[l]..self.w_off[l] + n_in * n_out];
            let mut back = vec![0.0; n_in];
            for (row, d) in w.chunks_exact(n_in).zip(&delta) {
                if *d != 0.0 {
                    for (bi, wi) in back.iter_mut().zip(row) {
                        *bi += d * wi;
                    }
                }
            }
            if l > 0 {
                let act = self.activation(l - 1);
                for ((b, &z), &y) in back.iter_mut().zip(&trace.pre[l - 1]).zip(&trace.acts[l]) {
                    *b *= act.slope(z, y);
                }
            }
            delta = back;
        }
        delta
    }

    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<GradientRecord> {
        if upstream.len() != self.output_dim() {
            return Err(IrcError::DimensionMismatch {
                what: "upstream gradient",
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let trace = self.forward_trace(x)?;
        let mut grad_params = vec![0.0; self.n_params()];
        let grad_input = self.backward_trace(&trace, upstream, Some(&mut grad_params));
        Ok(GradientRecord {
            value: trace.output().to_vec(),
            grad_params,
            grad_input,
        })
    }

    /// Forward pass on differentiated inputs. Derivatives flow through the input Jacobian,
    /// obtained with one reverse pass per output.
    pub fn forward_real<T: Real>(&self, x: &[T]) -> Result<Vec<T>> {
        let xv: Vec<f64> = x.iter().map(|v| v.val()).collect();
        if !T::TRACKS_GRADIENT {
            return Ok(self.forward(&xv)?.into_iter().map(T::cst).collect());
        }
        let trace = self.forward_trace(&xv)?;
        let mut e = vec![0.0; self.output_dim()];
        let mut out = Vec::with_capacity(self.output_dim());
        for k in 0..self.output_dim() {
            e.fill(0.0);
            e[k] = 1.0;
            let jac_row = self.backward_trace(&trace, &e, None);
            out.push(T::chain(trace.output()[k], &jac_row, x));
        }
        Ok(out)
    }

    /// `target <- tau * self + (1 - tau) * target`.
    pub fn soft_update_into(&self, target: &mut DenseNet, tau: f64) {
        assert_eq!(self.sizes, target.sizes, "soft update between different shapes");
        if tau == 1.0 {
            target.params.copy_from_slice(&self.params);
            return;
        }
        for (t, s) in target.params.iter_mut().zip(&self.params) {
            *t = tau * s + (1.0 - tau) * *t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradient, numeric_gradient};
    use crate::real::Dual;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_input<R: Rng>(r: &mut R, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.random_range(-2.0..2.0)).collect()
    }

    fn randomize_biases<R: Rng>(net: &mut DenseNet, r: &mut R) {
        for l in 0..net.n_layers() {
            for i in 0..net.sizes()[l + 1] {
                let k = net.bias_index(l, i);
                net.params_mut()[k] = r.random_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn zero_net_hidden_is_ln2() {
        let net = DenseNet::zeros(&[3, 4, 2], Activation::Softplus, Activation::Identity).unwrap();
        let t = net.forward_trace(&[1.0, -2.0, 0.5]).unwrap();
        assert!(t.acts[1].iter().all(|h| (h - 2f64.ln()).abs() < 1e-15));
        assert_eq!(t.output(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut net = DenseNet::zeros(&[3, 3], Activation::Softplus, Activation::Identity).unwrap();
        for i in 0..3 {
            let k = net.weight_index(0, i, i);
            net.params_mut()[k] = 1.0;
        }
        assert_eq!(net.forward(&[0.3, -1.0, 7.0]).unwrap(), vec![0.3, -1.0, 7.0]);
    }

    #[test]
    fn linear_input_gradient_is_w_transpose() {
        let mut r = rng_from_seed(1);
        let net = DenseNet::init(&[4, 3], Activation::Softplus, Activation::Identity, &mut r).unwrap();
        let up = [0.5, -1.0, 2.0];
        let g = net.backward(&[1.0, 2.0, 3.0, 4.0], &up).unwrap();
        for j in 0..4 {
            let expect: f64 = (0..3).map(|i| net.params()[net.weight_index(0, i, j)] * up[i]).sum();
            assert_eq!(g.grad_input[j], expect);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng_from_seed(2);
        let net = DenseNet::init(&[5, 8, 8, 2], Activation::Softplus, Activation::Tanh, &mut r).unwrap();
        let g = net.backward(&random_input(&mut r, 5), &[0.0, 0.0]).unwrap();
        assert!(g.grad_params.iter().all(|v| *v == 0.0));
        assert!(g.grad_input.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let net = DenseNet::zeros(&[2, 1], Activation::Softplus, Activation::Identity).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(IrcError::DimensionMismatch { .. })));
        assert!(net.backward(&[1.0, 2.0], &[1.0, 1.0]).is_err());
        assert!(DenseNet::zeros(&[2], Activation::Softplus, Activation::Identity).is_err());
    }

    #[test]
    fn backward_matches_finite_differences_on_100_probes() {
        let mut r = rng_from_seed(3);
        let shapes: [(&[usize], Activation); 3] = [
            (&[23, 64, 64, 64, 2], Activation::Tanh),
            (&[25, 64, 64, 64, 1], Activation::Identity),
            (&[5, 16, 1], Activation::Identity),
        ];
        let mut worst = 0.0f64;
        for probe in 0..100 {
            let (sizes, out) = shapes[probe % shapes.len()];
            let mut net = DenseNet::init(sizes, Activation::Softplus, out, &mut r).unwrap();
            randomize_biases(&mut net, &mut r);
            let x = random_input(&mut r, sizes[0]);
            let up: Vec<f64> = random_input(&mut r, *sizes.last().unwrap());
            let g = net.backward(&x, &up).unwrap();
            let f_in = |z: &[f64]| net.forward(z).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
            worst = worst.max(check_gradient(f_in, &g.grad_input, &x));
            // A random subset of parameters keeps the probe cheap.
            let idx = rand::seq::index::sample(&mut r, net.n_params(), 12).into_vec();
            let base = net.params().to_vec();
            let sub: Vec<f64> = idx.iter().map(|&i| base[i]).collect();
            let f_par = |p: &[f64]| {
                let mut q = base.clone();
                for (k, &i) in idx.iter().enumerate() {
                    q[i] = p[k];
                }
                let n = DenseNet::from_params(sizes, Activation::Softplus, out, q).unwrap();
                n.forward(&x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
            };
            let an: Vec<f64> = idx.iter().map(|&i| g.grad_params[i]).collect();
            worst = worst.max(check_gradient(f_par, &an, &sub));
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn forward_real_carries_input_jacobian() {
        let mut r = rng_from_seed(4);
        let net = DenseNet::init(&[3, 16, 16, 2], Activation::Softplus, Activation::Tanh, &mut r).unwrap();
        let x = [0.2, -0.7, 1.1];
        let xd: Vec<Dual> = x.iter().enumerate().map(|(i, &v)| Dual::variable(v, i)).collect();
        let y = net.forward_real(&xd).unwrap();
        for k in 0..2 {
            let num = numeric_gradient(|z: &[f64]| net.forward(z).unwrap()[k], &x);
            for i in 0..3 {
                assert!((num[i] - y[k].d[i]).abs() < 1e-8);
            }
            assert_eq!(y[k].v, net.forward(&x).unwrap()[k]);
        }
    }

    #[test]
    fn soft_update_with_unit_rate_copies() {
        let mut r = rng_from_seed(5);
        let a = DenseNet::init(&[4, 8, 1], Activation::Softplus, Activation::Identity, &mut r).unwrap();
        let mut b = DenseNet::init(&[4, 8, 1], Activation::Softplus, Activation::Identity, &mut r).unwrap();
        a.soft_update_into(&mut b, 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut r = rng_from_seed(6);
        let net = DenseNet::init(&[6, 32, 32, 1], Activation::Softplus, Activation::Identity, &mut r).unwrap();
        let x = random_input(&mut r, 6);
        let a = net.forward(&x).unwrap();
        let b = net.clone().forward(&x).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }
}
