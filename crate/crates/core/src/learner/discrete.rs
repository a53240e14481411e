//! Fitted-Q iteration over a factorized random basis, for the 1D task.
//!
//! `Q(b, a, theta) = phi(features(b) ++ onehot(a))^T W psi(theta_norm)`. With targets held
//! fixed, fitting `W` is a ridge regression whose normal equations have Kronecker structure:
//! `A(V) = sum_j Phi_j^T Phi_j V psi_j psi_j^T + lambda V`, one term per sampled theta.
//! They are solved matrix-free by conjugate gradients, preconditioned with a Kronecker-factored
//! approximation of the same operator.

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{rollout, Policy};
use crate::belief::{belief_features, feature_len, predict_1d, GaussianBelief};
use crate::error::{IrcError, Result};
use crate::nn::RandomBasis;
use crate::params::{sample_params, ParamSpace};
use crate::real::Real;
use crate::rng::{self, IrcRng};
use crate::task::{Action, DiscreteAction, ModelParams, ParamLayout, RewardSpec, TaskConfig, TaskId};

const ONEHOT: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FqiHyper {
    pub n_phi: usize,
    pub n_psi: usize,
    pub basis_hidden: usize,
    pub ridge: f64,
    /// Inverse temperature of the softmax behaviour policy.
    pub beta: f64,
    pub rounds: usize,
    pub thetas_per_round: usize,
    pub episodes_per_theta: usize,
    /// Beliefs drawn directly from a box in belief space, per theta, to cover states the
    /// current policy rarely visits.
    pub synthetic_beliefs_per_theta: usize,
    pub synthetic_mean_range: f64,
    pub synthetic_var_range: [f64; 2],
    pub fqi_iters: usize,
    pub cg_iters: usize,
    /// Stop once the largest weight change of an iteration falls below this.
    pub tol: f64,
    pub max_beliefs: usize,
    pub seed: u64,
}

impl Default for FqiHyper {
    fn default() -> Self {
        FqiHyper {
            n_phi: 256,
            n_psi: 64,
            basis_hidden: 16,
            ridge: 1e-3,
            beta: 8.0,
            rounds: 5,
            thetas_per_round: 40,
            episodes_per_theta: 4,
            synthetic_beliefs_per_theta: 20,
            synthetic_mean_range: 6.5,
            synthetic_var_range: [0.05, 4.0],
            fqi_iters: 15,
            cg_iters: 30,
            tol: 1e-4,
            max_beliefs: 10_000,
            seed: 0,
        }
    }
}

impl FqiHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IrcError::Config(m.to_string()));
        if self.n_phi == 0 || self.n_psi == 0 || self.basis_hidden == 0 {
            return bad("basis sizes must be positive");
        }
        if !(self.ridge > 0.0) {
            return bad("ridge must be positive");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if self.rounds == 0 || self.thetas_per_round == 0 || self.fqi_iters == 0 || self.cg_iters == 0 {
            return bad("rounds, thetas_per_round, fqi_iters and cg_iters must be positive");
        }
        let [lo, hi] = self.synthetic_var_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad("synthetic_var_range needs 0 < lo <= hi");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QEnsembleLinear {
    pub space: ParamSpace,
    pub phi: RandomBasis,
    pub psi: RandomBasis,
    /// `n_phi x n_psi`, row-major.
    pub w: Vec<f64>,
    pub beta: f64,
    /// Multiplies the belief mean before it enters `phi`, so positions are measured in
    /// target radii rather than world units.
    pub mean_scale: f64,
}

impl QEnsembleLinear {
    pub fn new(space: &ParamSpace, feat_dim: usize, hyper: &FqiHyper, rng: &mut IrcRng) -> Result<Self> {
        let phi = RandomBasis::new(feat_dim + 3, hyper.n_phi, hyper.basis_hidden, rng)?;
        let psi = RandomBasis::new(space.len(), hyper.n_psi, hyper.basis_hidden, rng)?;
        Ok(QEnsembleLinear {
            space: space.clone(),
            phi,
            psi,
            w: vec![0.0; hyper.n_phi * hyper.n_psi],
            beta: hyper.beta,
            mean_scale: 1.0,
        })
    }

    pub fn n_phi(&self) -> usize {
        self.phi.n_features()
    }

    pub fn n_psi(&self) -> usize {
        self.psi.n_features()
    }

    /// `W psi(theta_norm)`, shared by every belief evaluated under the same parameters.
    pub fn weighted_psi<T: Real>(&self, theta_norm: &[T]) -> Vec<T> {
        let psi = self.psi.eval_real(theta_norm);
        weighted(&self.w, &psi)
    }

    /// Q for every action. With derivatives tracked, the basis is evaluated on plain values
    /// together with its input Jacobian, and the result is spliced back in with one chain step
    /// per action rather than carrying duals through every hidden unit.
    pub fn q_from_weighted_psi<T: Real>(&self, feat: &[T], wpsi: &[T]) -> [T; 3] {
        let sufs: [&[f64]; 3] = [&ONEHOT[0], &ONEHOT[1], &ONEHOT[2]];
        if T::TRACKS_GRADIENT {
            let plain: Vec<f64> = feat.iter().map(|v| v.val()).collect();
            let wv: Vec<f64> = wpsi.iter().map(|v| v.val()).collect();
            let p = feat.len();
            let inputs: Vec<T> = feat.iter().chain(wpsi).copied().collect();
            let mut partials = vec![0.0; p + wv.len()];
            let sets = self.phi.eval_suffixes_with_jacobian(&self.phi_input(&plain), &sufs);
            let mut q = [T::cst(0.0); 3];
            for (qa, (vals, jac)) in q.iter_mut().zip(&sets) {
                partials[..p].fill(0.0);
                let mut value = 0.0;
                for (k, (v, w)) in vals.iter().zip(&wv).enumerate() {
                    value += v * w;
                    for (pj, jk) in partials[..p].iter_mut().zip(&jac[k * p..(k + 1) * p]) {
                        *pj += jk * w;
                    }
                }
                partials[0] *= self.mean_scale;
                partials[p..].copy_from_slice(vals);
                *qa = T::chain(value, &partials, &inputs);
            }
            return q;
        }
        let phis = self.phi.eval_suffixes(&self.phi_input(feat), &sufs);
        let mut q = [T::cst(0.0); 3];
        for (qa, ph) in q.iter_mut().zip(&phis) {
            for (p, c) in ph.iter().zip(wpsi) {
                *qa += *p * *c;
            }
        }
        q
    }

    fn phi_input<T: Real>(&self, feat: &[T]) -> Vec<T> {
        let mut x = feat.to_vec();
        x[0] = x[0].scale(self.mean_scale);
        x
    }

    pub fn q_values(&self, b: &GaussianBelief, theta_norm: &[f64]) -> [f64; 3] {
        self.q_from_weighted_psi(&belief_features(b), &self.weighted_psi(theta_norm))
    }

    pub fn greedy(&self, b: &GaussianBelief, theta_norm: &[f64]) -> DiscreteAction {
        argmax_action(&self.q_values(b, theta_norm))
    }
}

impl Policy for QEnsembleLinear {
    fn act(&self, b: &GaussianBelief, theta_norm: &[f64], rng: &mut IrcRng) -> Result<Action> {
        let p = softmax_policy(self, b, theta_norm, self.beta);
        Ok(Action::Discrete(sample_discrete(&p, rng)))
    }
}

fn weighted<T: Real>(w: &[f64], psi: &[T]) -> Vec<T> {
    w.chunks_exact(psi.len())
        .map(|row| {
            let mut acc = T::cst(0.0);
            for (wi, p) in row.iter().zip(psi) {
                acc += p.scale(*wi);
            }
            acc
        })
        .collect()
}

pub fn argmax_action(q: &[f64; 3]) -> DiscreteAction {
    let mut best = 0;
    for a in 1..3 {
        if q[a] > q[best] {
            best = a;
        }
    }
    DiscreteAction::ALL[best]
}

/// `pi(a) ∝ exp(beta q_a)`, with max-subtraction.
pub fn softmax(q: &[f64], beta: f64) -> Vec<f64> {
    let m = q.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(beta * b));
    let e: Vec<f64> = q.iter().map(|&x| (beta * x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn softmax_policy(q: &QEnsembleLinear, b: &GaussianBelief, theta_norm: &[f64], beta: f64) -> [f64; 3] {
    let p = softmax(&q.q_values(b, theta_norm), beta);
    [p[0], p[1], p[2]]
}

/// `log softmax(beta q)[a]` on differentiated action values.
pub fn log_softmax_real<T: Real>(q: &[T], beta: f64, a: usize) -> T {
    let m = q.iter().fold(f64::NEG_INFINITY, |acc, x| acc.max(beta * x.val()));
    let mut s = T::cst(0.0);
    for x in q {
        s += (x.scale(beta) - T::cst(m)).exp();
    }
    q[a].scale(beta) - T::cst(m) - s.ln()
}

pub fn sample_discrete<R: Rng + ?Sized>(p: &[f64; 3], rng: &mut R) -> DiscreteAction {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return DiscreteAction::ALL[i];
        }
    }
    DiscreteAction::ALL[2]
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Expected reward of stopping under a 1D Gaussian belief.
pub fn expected_stop_reward(mu: f64, var: f64, r: &RewardSpec) -> f64 {
    let sd = var.max(0.0).sqrt();
    if sd == 0.0 {
        return if mu.abs() <= r.radius { r.hit_reward } else { 0.0 };
    }
    r.hit_reward * (normal_cdf((r.radius - mu) / sd) - normal_cdf((-r.radius - mu) / sd))
}

/// Expected immediate reward of each action under a 1D belief.
pub fn expected_rewards(b: &GaussianBelief, r: &RewardSpec) -> [f64; 3] {
    [-r.action_cost, -r.action_cost, expected_stop_reward(b.mean[0], b.cov[0], r)]
}

/// Cached regression problem: rows are (belief, action) pairs grouped by sampled theta.
#[derive(Clone, Debug)]
pub struct FqiData {
    n_phi: usize,
    groups: Vec<Group>,
}

#[derive(Clone, Debug)]
struct Group {
    psi: Vec<f64>,
    /// Row-major `rows x n_phi`.
    phi: Vec<f32>,
    reward: Vec<f64>,
    /// Index into `next_phi` blocks of three, or `None` at termination.
    next: Vec<Option<usize>>,
    next_phi: Vec<f32>,
    target: Vec<f64>,
}

impl Group {
    fn rows(&self) -> usize {
        self.reward.len()
    }
}

fn to_f32(v: &[f64], out: &mut Vec<f32>) {
    out.extend(v.iter().map(|&x| x as f32));
}

impl FqiData {
    pub fn new(n_phi: usize) -> Self {
        FqiData { n_phi, groups: Vec::new() }
    }

    pub fn n_rows(&self) -> usize {
        self.groups.iter().map(Group::rows).sum()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Start a group of rows sharing one parameter vector; returns its index.
    pub fn add_group(&mut self, psi: Vec<f64>) -> usize {
        self.groups.push(Group {
            psi,
            phi: Vec::new(),
            reward: Vec::new(),
            next: Vec::new(),
            next_phi: Vec::new(),
            target: Vec::new(),
        });
        self.groups.len() - 1
    }

    /// Add the three rows of a belief: features now, per-action rewards and, for non-terminal
    /// actions, the features of the successor belief.
    pub fn add_belief(&mut self, q: &QEnsembleLinear, group: usize, feat: &[f64], rewards: [f64; 3], next: [Option<&[f64]>; 3]) {
        let sufs: [&[f64]; 3] = [&ONEHOT[0], &ONEHOT[1], &ONEHOT[2]];
        let now = q.phi.eval_suffixes(&q.phi_input(feat), &sufs);
        let g = &mut self.groups[group];
        for a in 0..3 {
            to_f32(&now[a], &mut g.phi);
            g.reward.push(rewards[a]);
            g.target.push(rewards[a]);
            match next[a] {
                Some(f) => {
                    let idx = g.next_phi.len() / (3 * self.n_phi);
                    for ph in q.phi.eval_suffixes(&q.phi_input(f), &sufs) {
                        to_f32(&ph, &mut g.next_phi);
                    }
                    g.next.push(Some(idx));
                }
                None => g.next.push(None),
            }
        }
    }

    /// Drop the oldest groups until at most `max_rows` remain.
    pub fn truncate_oldest(&mut self, max_rows: usize) {
        while self.n_rows() > max_rows && self.groups.len() > 1 {
            self.groups.remove(0);
        }
    }

    /// `y = r + gamma * max_a' Q(b', a')`, or `y = r` at termination. The bootstrapped value is
    /// clipped to `bounds`, which keeps extrapolation at unvisited successor beliefs from feeding
    /// back into the fit.
    pub fn update_targets(&mut self, w: &[f64], gamma: f64, bounds: [f64; 2]) {
        let n = self.n_phi;
        for g in &mut self.groups {
            let wpsi = weighted(w, &g.psi);
            for r in 0..g.reward.len() {
                g.target[r] = g.reward[r]
                    + match g.next[r] {
                        None => 0.0,
                        Some(k) => {
                            let block = &g.next_phi[k * 3 * n..(k + 1) * 3 * n];
                            let best = block
                                .chunks_exact(n)
                                .map(|ph| ph.iter().zip(&wpsi).map(|(a, b)| *a as f64 * b).sum::<f64>())
                                .fold(f64::NEG_INFINITY, f64::max);
                            gamma * best.clamp(bounds[0], bounds[1])
                        }
                    };
            }
        }
    }

    /// `sum (phi^T W psi - y)^2 + lambda |W|^2`.
    pub fn ridge_objective(&self, w: &[f64], lambda: f64) -> f64 {
        let n = self.n_phi;
        let mut sse = 0.0;
        for g in &self.groups {
            let wpsi = weighted(w, &g.psi);
            for (ph, y) in g.phi.chunks_exact(n).zip(&g.target) {
                let q: f64 = ph.iter().zip(&wpsi).map(|(a, b)| *a as f64 * b).sum();
                sse += (q - y) * (q - y);
            }
        }
        sse + lambda * w.iter().map(|x| x * x).sum::<f64>()
    }

    fn apply(&self, v: &[f64], lambda: f64, out: &mut [f64]) {
        let n = self.n_phi;
        let m = v.len() / n;
        for (o, x) in out.iter_mut().zip(v) {
            *o = lambda * x;
        }
        let mut t = vec![0.0; n];
        for g in &self.groups {
            let u = weighted(v, &g.psi);
            t.fill(0.0);
            for ph in g.phi.chunks_exact(n) {
                let z: f64 = ph.iter().zip(&u).map(|(a, b)| *a as f64 * b).sum();
                for (ti, p) in t.iter_mut().zip(ph) {
                    *ti += z * *p as f64;
                }
            }
            for (k, tk) in t.iter().enumerate() {
                for (o, p) in out[k * m..(k + 1) * m].iter_mut().zip(&g.psi) {
                    *o += tk * p;
                }
            }
        }
    }

    fn rhs(&self, m: usize) -> Vec<f64> {
        let n = self.n_phi;
        let mut rhs = vec![0.0; n * m];
        let mut t = vec![0.0; n];
        for g in &self.groups {
            t.fill(0.0);
            for (ph, y) in g.phi.chunks_exact(n).zip(&g.target) {
                for (tk, p) in t.iter_mut().zip(ph) {
                    *tk += y * *p as f64;
                }
            }
            for k in 0..n {
                for (l, p) in g.psi.iter().enumerate() {
                    rhs[k * m + l] += t[k] * p;
                }
            }
        }
        rhs
    }

    /// Kronecker-factored approximation of the normal operator, `C_phi (x) C_psi`, with the
    /// ridge split between the factors. It depends on the features only, not on the targets.
    pub fn preconditioner(&self, lambda: f64) -> KroneckerPreconditioner {
        let n = self.n_phi;
        let m = self.groups.first().map_or(1, |g| g.psi.len());
        let mut c_phi = DMatrix::<f64>::zeros(n, n);
        let mut c_psi = DMatrix::<f64>::zeros(m, m);
        let total = self.n_rows().max(1) as f64;
        for g in &self.groups {
            if g.rows() == 0 {
                continue;
            }
            let x = DMatrix::from_row_iterator(g.rows(), n, g.phi.iter().map(|&v| v as f64));
            c_phi += x.tr_mul(&x);
            let psi = DVector::from_column_slice(&g.psi);
            c_psi += (&psi * psi.transpose()) * (g.rows() as f64 / total);
        }
        let a = (c_phi.trace() / n as f64).max(1e-300);
        let b = (c_psi.trace() / m as f64).max(1e-300);
        let pi = (a / b).sqrt();
        let s = lambda.max(1e-10 * a * b).sqrt();
        let invert = |c: DMatrix<f64>, d: f64| {
            let k = c.nrows();
            let c = c + DMatrix::identity(k, k) * d;
            c.clone().cholesky().map(|ch| ch.inverse()).unwrap_or_else(|| DMatrix::from_diagonal(&c.diagonal().map(|x| 1.0 / x)))
        };
        KroneckerPreconditioner { phi_inv: invert(c_phi, pi * s), psi_inv: invert(c_psi, s / pi) }
    }

    /// Preconditioned CG on the ridge normal equations, warm-started from `w`.
    /// Returns the ridge objective after each iteration; it never increases.
    pub fn solve_ridge(&self, w: &mut [f64], lambda: f64, iters: usize) -> Vec<f64> {
        self.solve_ridge_with(w, lambda, iters, &self.preconditioner(lambda))
    }

    pub fn solve_ridge_with(&self, w: &mut [f64], lambda: f64, iters: usize, pre: &KroneckerPreconditioner) -> Vec<f64> {
        let m = self.groups.first().map_or(1, |g| g.psi.len());
        let rhs = self.rhs(m);
        let len = w.len();
        let mut ap = vec![0.0; len];
        self.apply(w, lambda, &mut ap);
        let mut r: Vec<f64> = rhs.iter().zip(&ap).map(|(b, a)| b - a).collect();
        let mut z = pre.apply(&r);
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let rhs_norm = rhs.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        let mut trace = Vec::with_capacity(iters);
        for _ in 0..iters {
            if r.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1e-10 * rhs_norm {
                break;
            }
            self.apply(&p, lambda, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if !(pap > 0.0) {
                break;
            }
            let alpha = rz / pap;
            for i in 0..len {
                w[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            z = pre.apply(&r);
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..len {
                p[i] = z[i] + beta * p[i];
            }
            trace.push(self.ridge_objective(w, lambda));
        }
        trace
    }
}

#[derive(Clone, Debug)]
pub struct KroneckerPreconditioner {
    phi_inv: DMatrix<f64>,
    psi_inv: DMatrix<f64>,
}

impl KroneckerPreconditioner {
    /// `phi_inv R psi_inv` for a row-major `n_phi x n_psi` residual.
    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        let (n, m) = (self.phi_inv.nrows(), self.psi_inv.nrows());
        let z = &self.phi_inv * DMatrix::from_row_slice(n, m, r) * &self.psi_inv;
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            out.extend(z.row(i).iter());
        }
        out
    }
}

/// Per-round diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FqiLog {
    pub round: usize,
    pub mean_return: f64,
    pub n_rows: usize,
    pub iterations: usize,
    pub last_weight_change: f64,
    pub objective: f64,
}

fn synthetic_belief<R: Rng + ?Sized>(h: &FqiHyper, rng: &mut R) -> GaussianBelief {
    let mu = rng.random_range(-h.synthetic_mean_range..=h.synthetic_mean_range);
    let [lo, hi] = h.synthetic_var_range;
    let var = if hi > lo { (rng.random_range(lo.ln()..=hi.ln())).exp() } else { lo };
    GaussianBelief { mean: vec![mu], cov: vec![var] }
}

/// Add a belief's rows under model `p`. Moves lead to the predicted belief; stopping ends it.
///
/// Successors are kept inside the sampled region, widened to include `b` itself: beyond it
/// the fit is pure extrapolation, and an optimistic guess there would leak inward through the
/// bootstrapped targets. At the edge a move outward is then worth the same as staying, less
/// the cost.
pub fn add_1d_belief(data: &mut FqiData, q: &QEnsembleLinear, group: usize, b: &GaussianBelief, p: &ModelParams<f64>, cfg: &TaskConfig, h: &FqiHyper) {
    let feat = belief_features(b);
    let reach = h.synthetic_mean_range.max(b.mean[0].abs());
    let var_cap = h.synthetic_var_range[1].max(b.cov[0]);
    let successor = |a| {
        let mut n = predict_1d(b, a, p);
        n.mean[0] = n.mean[0].clamp(-reach, reach);
        n.cov[0] = n.cov[0].min(var_cap);
        belief_features(&n)
    };
    let left = successor(DiscreteAction::Left);
    let right = successor(DiscreteAction::Right);
    data.add_belief(q, group, &feat, expected_rewards(b, &cfg.reward), [Some(&left), Some(&right), None]);
}

/// Range of any achievable discounted return: never hitting and paying the move cost forever,
/// up to stopping on the target at once.
pub fn value_bounds(r: &RewardSpec) -> [f64; 2] {
    [-r.action_cost.max(0.0) / (1.0 - r.discount), r.hit_reward.max(0.0)]
}

pub fn fitted_q_iterations(data: &mut FqiData, q: &mut QEnsembleLinear, reward: &RewardSpec, h: &FqiHyper) -> (usize, f64, f64) {
    let bounds = value_bounds(reward);
    let mut change = f64::INFINITY;
    let mut iters = 0;
    let mut objective = f64::NAN;
    let pre = data.preconditioner(h.ridge);
    for _ in 0..h.fqi_iters {
        iters += 1;
        data.update_targets(&q.w, reward.discount, bounds);
        let before = q.w.clone();
        let trace = data.solve_ridge_with(&mut q.w, h.ridge, h.cg_iters, &pre);
        objective = trace.last().copied().unwrap_or_else(|| data.ridge_objective(&q.w, h.ridge));
        change = q.w.iter().zip(&before).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if change < h.tol {
            break;
        }
    }
    (iters, change, objective)
}

pub fn train_discrete_q(space: &ParamSpace, cfg: &TaskConfig, h: &FqiHyper) -> Result<(QEnsembleLinear, Vec<FqiLog>)> {
    if cfg.task != TaskId::Firefly1d {
        return Err(IrcError::WrongTask(format!("fitted-Q backend needs discrete actions, got {}", cfg.task)));
    }
    space.validate()?;
    cfg.validate()?;
    h.validate()?;
    let layout = ParamLayout::new(space, cfg.task)?;
    let mut q = QEnsembleLinear::new(space, feature_len(1), h, &mut rng::stream(h.seed, 1))?;
    q.mean_scale = 1.0 / cfg.reward.radius;
    let mut data = FqiData::new(h.n_phi);
    let mut logs = Vec::new();
    for round in 0..h.rounds {
        let round_seed = rng::derive_seed(h.seed, 100 + round as u64);
        let thetas = sample_params(space, h.thetas_per_round, round_seed);
        let mut synth_rng = rng::stream(round_seed, 2);
        let (mut ret, mut episodes) = (0.0, 0usize);
        for (j, theta) in thetas.iter().enumerate() {
            let tn = space.normalized_point(theta);
            let p = layout.extract(&theta.0);
            let g = data.add_group(q.psi.eval(&tn)?);
            for e in 0..h.episodes_per_theta {
                let seed = rng::derive_seed(round_seed, (j * h.episodes_per_theta + e) as u64 + 1000);
                let (traj, beliefs) = rollout(&q, theta, space, cfg, &mut rng::rng_from_seed(seed), seed, true)?;
                ret += traj.total_reward();
                episodes += 1;
                let beliefs = beliefs.expect("beliefs recorded");
                for b in &beliefs.0[..traj.len()] {
                    add_1d_belief(&mut data, &q, g, b, &p, cfg, h);
                }
            }
            for _ in 0..h.synthetic_beliefs_per_theta {
                let b = synthetic_belief(h, &mut synth_rng);
                add_1d_belief(&mut data, &q, g, &b, &p, cfg, h);
            }
        }
        data.truncate_oldest(3 * h.max_beliefs);
        let (iterations, change, objective) = fitted_q_iterations(&mut data, &mut q, &cfg.reward, h);
        if q.w.iter().any(|x| !x.is_finite()) {
            return Err(IrcError::Divergence(format!("non-finite Q weights in round {round}")));
        }
        let log = FqiLog {
            round,
            mean_return: ret / episodes.max(1) as f64,
            n_rows: data.n_rows(),
            iterations,
            last_weight_change: change,
            objective,
        };
        info!(
            "round {round}: mean return {:.4}, rows {}, fqi iterations {iterations}, weight change {change:.2e}, objective {objective:.4e}",
            log.mean_return, log.n_rows
        );
        logs.push(log);
    }
    Ok((q, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::real::Dual;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn small_hyper() -> FqiHyper {
        FqiHyper {
            n_phi: 64,
            n_psi: 8,
            ..FqiHyper::default()
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softmax(&[0.3, 0.3, 0.3], 8.0);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let e = std::f64::consts::E;
        let p = softmax(&[1.0, 0.0, 0.0], 1.0);
        assert!((p[0] - e / (e + 2.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (e + 2.0)).abs() < 1e-15);
        let p = softmax(&[1.0, 0.9, 0.0], 1e4);
        assert!(p[0] > 1.0 - 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(q in proptest::array::uniform3(-1e3f64..1e3), beta in 1e-3f64..1e3) {
            let p = softmax(&q, beta);
            prop_assert!(p.iter().all(|x| *x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let lp = log_softmax_real(&q, beta, 1);
            prop_assert!((lp - p[1].ln()).abs() < 1e-9 || p[1] == 0.0);
        }
    }

    #[test]
    fn log_softmax_dual_matches_finite_differences() {
        let q = [Dual::variable(0.3, 0), Dual::variable(-0.1, 1), Dual::variable(0.25, 2)];
        let lp = log_softmax_real(&q, 8.0, 2);
        for k in 0..3 {
            let f = |d: f64| {
                let mut v = [0.3, -0.1, 0.25];
                v[k] += d;
                log_softmax_real(&v, 8.0, 2)
            };
            let num = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((num - lp.d[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn sampled_actions_follow_the_probabilities() {
        let mut r = rng_from_seed(3);
        let p = [0.2, 0.5, 0.3];
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[sample_discrete(&p, &mut r).index()] += 1;
        }
        for a in 0..3 {
            assert!((counts[a] as f64 / 30_000.0 - p[a]).abs() < 0.015);
        }
    }

    #[test]
    fn stop_reward_matches_gaussian_mass() {
        let r = TaskConfig::firefly_1d().reward;
        assert!((expected_stop_reward(0.0, 1e-10, &r) - 1.0).abs() < 1e-12);
        assert_eq!(expected_stop_reward(3.0, 0.0, &r), 0.0);
        // Oracle: midpoint-rule integral of the Gaussian density over the hit interval.
        let (mu, var) = (0.3, 0.4);
        let n = 20_000;
        let h = 2.0 * r.radius / n as f64;
        let mass: f64 = (0..n)
            .map(|i| {
                let x = -r.radius + (i as f64 + 0.5) * h;
                (-(x - mu) * (x - mu) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt() * h
            })
            .sum();
        assert!((expected_stop_reward(mu, var, &r) - mass).abs() < 1e-8);
    }

    fn tabular_data(q: &QEnsembleLinear, tn: &[f64], var: f64, cfg: &TaskConfig) -> (FqiData, Vec<GaussianBelief>) {
        let mut data = FqiData::new(q.n_phi());
        let g = data.add_group(q.psi.eval(tn).unwrap());
        let states: Vec<GaussianBelief> = (-2..=2).map(|m| GaussianBelief { mean: vec![m as f64], cov: vec![var] }).collect();
        for (i, b) in states.iter().enumerate() {
            let left = belief_features(&states[i.saturating_sub(1)]);
            let right = belief_features(&states[(i + 1).min(4)]);
            data.add_belief(q, g, &belief_features(b), expected_rewards(b, &cfg.reward), [Some(&left), Some(&right), None]);
        }
        (data, states)
    }

    #[test]
    fn five_state_chain_matches_value_iteration() {
        let cfg = TaskConfig::firefly_1d();
        let space = ParamSpace::firefly_1d();
        let h = small_hyper();
        let mut q = QEnsembleLinear::new(&space, 2, &h, &mut rng_from_seed(7)).unwrap();
        let tn = space.normalized_point(&space.midpoint());
        let var = 0.1;
        let (mut data, states) = tabular_data(&q, &tn, var, &cfg);
        // Fifteen rows against hundreds of weights: the default ridge would dominate the fit.
        let hyper = FqiHyper { fqi_iters: 200, cg_iters: 200, tol: 1e-9, ridge: 1e-8, ..h };
        fitted_q_iterations(&mut data, &mut q, &cfg.reward, &hyper);
        // Oracle: exact value iteration on the same five-state chain.
        let g = cfg.reward.discount;
        let mut v = [0.0f64; 5];
        let stop: Vec<f64> = states.iter().map(|b| expected_stop_reward(b.mean[0], var, &cfg.reward)).collect();
        let qtab = |v: &[f64; 5], i: usize| {
            [
                -cfg.reward.action_cost + g * v[i.saturating_sub(1)],
                -cfg.reward.action_cost + g * v[(i + 1).min(4)],
                stop[i],
            ]
        };
        for _ in 0..2000 {
            let mut nv = [0.0; 5];
            for i in 0..5 {
                nv[i] = qtab(&v, i).into_iter().fold(f64::NEG_INFINITY, f64::max);
            }
            v = nv;
        }
        for (i, b) in states.iter().enumerate() {
            let exact = argmax_action(&qtab(&v, i));
            assert_eq!(q.greedy(b, &tn), exact, "state {i}: {:?} vs {:?}", q.q_values(b, &tn), qtab(&v, i));
        }
    }

    #[test]
    fn zero_discount_learns_immediate_reward() {
        let mut cfg = TaskConfig::firefly_1d();
        cfg.reward.discount = 1e-9;
        let space = ParamSpace::firefly_1d();
        let h = FqiHyper {
            n_phi: 256,
            n_psi: 16,
            rounds: 1,
            thetas_per_round: 16,
            episodes_per_theta: 1,
            synthetic_beliefs_per_theta: 60,
            synthetic_var_range: [0.05, 1.0],
            synthetic_mean_range: 3.0,
            fqi_iters: 1,
            cg_iters: 50,
            seed: 5,
            ..FqiHyper::default()
        };
        let (q, _) = train_discrete_q(&space, &cfg, &h).unwrap();
        let tn = space.normalized_point(&space.midpoint());
        let b = GaussianBelief { mean: vec![0.0], cov: vec![0.1] };
        let qv = q.q_values(&b, &tn);
        let exact = expected_stop_reward(0.0, 0.1, &cfg.reward);
        assert!((qv[2] - exact).abs() < 0.1, "{qv:?} vs {exact}");
        assert!((qv[0] + cfg.reward.action_cost).abs() < 0.1, "{qv:?}");
    }

    #[test]
    fn ridge_objective_never_increases_during_a_solve() {
        let cfg = TaskConfig::firefly_1d();
        let space = ParamSpace::firefly_1d();
        let h = small_hyper();
        let q = QEnsembleLinear::new(&space, 2, &h, &mut rng_from_seed(2)).unwrap();
        let layout = ParamLayout::new(&space, cfg.task).unwrap();
        let mut data = FqiData::new(h.n_phi);
        let mut r = rng_from_seed(5);
        for theta in sample_params(&space, 6, 1) {
            let g = data.add_group(q.psi.eval(&space.normalized_point(&theta)).unwrap());
            for _ in 0..20 {
                add_1d_belief(&mut data, &q, g, &synthetic_belief(&h, &mut r), &layout.extract(&theta.0), &cfg, &h);
            }
        }
        let mut w: Vec<f64> = (0..q.w.len()).map(|i| 0.01 * ((i * 7 % 13) as f64 - 6.0)).collect();
        data.update_targets(&w, 0.95, [-1.0, 1.0]);
        let start = data.ridge_objective(&w, h.ridge);
        let trace = data.solve_ridge(&mut w, h.ridge, 50);
        let mut prev = start;
        for o in trace {
            assert!(o <= prev + 1e-12 * prev.abs().max(1.0), "{o} > {prev}");
            prev = o;
        }
        assert!(prev < start);
    }

    #[test]
    fn q_values_are_differentiable_in_theta_and_belief() {
        let space = ParamSpace::firefly_1d();
        let h = small_hyper();
        let mut q = QEnsembleLinear::new(&space, 2, &h, &mut rng_from_seed(8)).unwrap();
        for (i, w) in q.w.iter_mut().enumerate() {
            *w = ((i as f64) * 0.618).sin() * 0.1;
        }
        q.mean_scale = 2.0;
        let f = |x: &[f64]| {
            let wpsi = q.weighted_psi(&x[2..]);
            q.q_from_weighted_psi(&x[..2], &wpsi)[1]
        };
        let x = [0.7, -1.2, 0.3, -0.4];
        let xd: Vec<Dual> = x.iter().enumerate().map(|(i, &v)| Dual::variable(v, i)).collect();
        let wpsi = q.weighted_psi(&xd[2..]);
        let qd = q.q_from_weighted_psi(&xd[..2], &wpsi)[1];
        let num = crate::nn::numeric_gradient(f, &x);
        for k in 0..4 {
            assert!((num[k] - qd.d[k]).abs() < 1e-8, "{k}: {} vs {}", num[k], qd.d[k]);
        }
    }
}
