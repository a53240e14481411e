//! Recovering an agent's internal model from its observed states and actions.
//!
//! The observer sees world states and actions but neither the agent's observations nor its
//! beliefs. Observations are replaced by their most probable values given the states (a hard
//! E step), beliefs are rebuilt under a candidate `theta`, and the log-likelihood sums, over
//! steps, the log-probability of each action under the ensemble policy plus the log-density
//! of each state transition under the process noise.

pub mod fisher;
pub mod mle;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use fisher::{confidence_intervals, fisher_information, FisherInfo};
pub use mle::{mle_fit, multi_restart, MleOptions, MleResult, Objective, Preconditioner};

use crate::belief::{advance, belief_features, map_observation, BeliefTrajectory, GaussianBelief};
use crate::error::{IrcError, Result};
use crate::learner::discrete::log_softmax_real;
use crate::learner::{EnsemblePolicy, Trajectory};
use crate::params::{ParamPoint, ParamSpace};
use crate::real::{Dual, Real, MAX_DUAL};
use crate::task::{drift_1d, drift_2d, is_stop, Action, ModelParams, ParamLayout, State2d, TaskConfig, TaskId};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// States `s_0..s_T` and actions `a_0..a_{T-1}` of one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedTrajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
}

impl ObservedTrajectory {
    /// Strip a simulated trajectory down to what an observer sees.
    pub fn from_trajectory(t: &Trajectory) -> Self {
        let mut states: Vec<Vec<f64>> = t.steps.iter().map(|s| s.state.clone()).collect();
        match t.steps.last() {
            Some(last) => states.push(last.next_state.clone()),
            None => states.push(t.initial_reading.clone()),
        }
        ObservedTrajectory {
            states,
            actions: t.steps.iter().map(|s| s.action).collect(),
        }
    }

    /// Number of actions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self, task: TaskId) -> Result<()> {
        if self.states.len() != self.actions.len() + 1 {
            return Err(IrcError::DimensionMismatch {
                what: "trajectory states (actions + 1)",
                expected: self.actions.len() + 1,
                got: self.states.len(),
            });
        }
        for s in &self.states {
            if s.len() != task.state_dim() {
                return Err(IrcError::DimensionMismatch {
                    what: "trajectory state",
                    expected: task.state_dim(),
                    got: s.len(),
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(IrcError::NonFinite("trajectory state".into()));
            }
        }
        for a in &self.actions {
            let ok = matches!((task, a), (TaskId::Firefly1d, Action::Discrete(_)) | (TaskId::Firefly2d, Action::Continuous(_)));
            if !ok {
                return Err(IrcError::WrongTask(format!("action {a:?} in a {} trajectory", task.as_str())));
            }
        }
        Ok(())
    }

    /// Most probable initial target reading: the target position itself.
    pub fn initial_reading(&self) -> Vec<f64> {
        let n = match self.states[0].len() {
            1 => 1,
            _ => 2,
        };
        self.states[0][..n].to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedDataset {
    pub task: TaskConfig,
    pub trajectories: Vec<ObservedTrajectory>,
}

impl ObservedDataset {
    pub fn new(task: TaskConfig, trajectories: Vec<ObservedTrajectory>) -> Result<Self> {
        task.validate()?;
        for t in &trajectories {
            t.validate(task.task)?;
        }
        Ok(ObservedDataset { task, trajectories })
    }

    pub fn from_trajectories(task: &TaskConfig, trajs: &[Trajectory]) -> Result<Self> {
        Self::new(task.clone(), trajs.iter().map(ObservedTrajectory::from_trajectory).collect())
    }

    pub fn n_steps(&self) -> usize {
        self.trajectories.iter().map(ObservedTrajectory::len).sum()
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        ObservedDataset {
            task: self.task.clone(),
            trajectories: self.trajectories[range].to_vec(),
        }
    }
}

/// Beliefs `b_0..b_T` under model `p`. Readings are MAP estimates unless `recorded` supplies the
/// agent's actual initial reading and per-step observations.
pub fn reconstruct_real<T: Real>(
    traj: &ObservedTrajectory,
    p: &ModelParams<T>,
    cfg: &TaskConfig,
    recorded: Option<(&[f64], &[Vec<f64>])>,
) -> Vec<GaussianBelief<T>> {
    let reading = match recorded {
        Some((r, _)) => r.to_vec(),
        None => traj.initial_reading(),
    };
    let mut b = GaussianBelief::<T>::initial(cfg, &reading);
    let mut out = Vec::with_capacity(traj.len() + 1);
    out.push(b.clone());
    for (t, a) in traj.actions.iter().enumerate() {
        let obs = match cfg.task {
            TaskId::Firefly1d => None,
            TaskId::Firefly2d => Some(match recorded {
                Some((_, o)) => o[t].clone(),
                None => map_observation(&State2d::from_slice(&traj.states[t + 1]), cfg.obs_noise_std).to_vec(),
            }),
        };
        b = advance(&b, a, obs.as_deref(), p, cfg);
        out.push(b.clone());
    }
    out
}

fn layout_params(space: &ParamSpace, cfg: &TaskConfig, theta: &ParamPoint) -> Result<ModelParams<f64>> {
    space.check(theta)?;
    Ok(ParamLayout::new(space, cfg.task)?.extract(&theta.0))
}

/// Beliefs an observer attributes to the agent under `theta`, from states alone.
pub fn reconstruct_beliefs(traj: &ObservedTrajectory, theta: &ParamPoint, space: &ParamSpace, cfg: &TaskConfig) -> Result<BeliefTrajectory> {
    traj.validate(cfg.task)?;
    let p = layout_params(space, cfg, theta)?;
    Ok(BeliefTrajectory(reconstruct_real(traj, &p, cfg, None)))
}

/// Reconstruction fed with the agent's own readings instead of MAP estimates.
pub fn reconstruct_with_observations(
    traj: &ObservedTrajectory,
    initial_reading: &[f64],
    observations: &[Vec<f64>],
    theta: &ParamPoint,
    space: &ParamSpace,
    cfg: &TaskConfig,
) -> Result<BeliefTrajectory> {
    traj.validate(cfg.task)?;
    if cfg.task == TaskId::Firefly2d && observations.len() != traj.len() {
        return Err(IrcError::DimensionMismatch {
            what: "recorded observations",
            expected: traj.len(),
            got: observations.len(),
        });
    }
    let p = layout_params(space, cfg, theta)?;
    Ok(BeliefTrajectory(reconstruct_real(traj, &p, cfg, Some((initial_reading, observations)))))
}

/// `ln Phi(z)` and its derivative, stable far into the lower tail.
pub fn log_normal_cdf(z: f64) -> (f64, f64) {
    if z > -30.0 {
        let cdf = 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
        let pdf = (-0.5 * z * z - HALF_LN_2PI).exp();
        (cdf.ln(), pdf / cdf)
    } else {
        // Mills-ratio expansion: Phi(z) ~ pdf(z) / (-z) * (1 - 1/z^2 + 3/z^4).
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2);
        let value = -0.5 * z2 - HALF_LN_2PI - (-z).ln() + series.ln();
        (value, -z / series)
    }
}

fn log_normal_cdf_real<T: Real>(z: T) -> T {
    let (v, d) = log_normal_cdf(z.val());
    T::chain(v, &[d], &[z])
}

/// `ln N(x; mean, sd^2)`.
pub fn log_normal_density<T: Real>(x: f64, mean: T, sd: T) -> T {
    let r = (T::cst(x) - mean) / sd;
    T::cst(-HALF_LN_2PI) - sd.ln() - r.square().scale(0.5)
}

/// Log-likelihood contributions of one trajectory.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TermSums<T> {
    pub action: T,
    pub transition: T,
}

impl<T: Real> TermSums<T> {
    pub fn total(&self) -> T {
        self.action + self.transition
    }
}

struct ThetaContext<T> {
    p: ModelParams<T>,
    theta_norm: Vec<T>,
    wpsi: Vec<T>,
}

/// Log-likelihood of an observed dataset as a function of the inference coordinates.
pub struct Likelihood<'a> {
    policy: &'a EnsemblePolicy,
    data: &'a ObservedDataset,
    layout: ParamLayout,
}

impl<'a> Likelihood<'a> {
    pub fn new(policy: &'a EnsemblePolicy, data: &'a ObservedDataset) -> Result<Self> {
        if policy.task() != data.task.task {
            return Err(IrcError::WrongTask(format!(
                "policy trained for {}, data from {}",
                policy.task().as_str(),
                data.task.task.as_str()
            )));
        }
        let layout = ParamLayout::new(policy.space(), data.task.task)?;
        Ok(Likelihood { policy, data, layout })
    }

    pub fn space(&self) -> &ParamSpace {
        self.policy.space()
    }

    pub fn data(&self) -> &ObservedDataset {
        self.data
    }

    /// Reject coordinates outside the box, allowing for round-off at the edges.
    pub fn check_coords(&self, u: &[f64]) -> Result<()> {
        let space = self.space();
        if u.len() != space.len() {
            return Err(IrcError::DimensionMismatch {
                what: "inference coordinates",
                expected: space.len(),
                got: u.len(),
            });
        }
        for (d, &c) in space.dims.iter().zip(u) {
            let (lo, hi) = d.coord_bounds();
            let slack = 1e-12 * (hi - lo).abs().max(1.0);
            if !(c >= lo - slack && c <= hi + slack) {
                return Err(IrcError::OutOfBounds {
                    name: d.name.clone(),
                    value: d.transform.inverse(c),
                    lower: d.lower,
                    upper: d.upper,
                });
            }
        }
        Ok(())
    }

    fn context<T: Real>(&self, u: &[T]) -> ThetaContext<T> {
        let space = self.space();
        let theta_norm = space.normalize_real(u);
        let wpsi = match self.policy {
            EnsemblePolicy::Discrete(q) => q.weighted_psi(&theta_norm),
            EnsemblePolicy::Continuous(_) => Vec::new(),
        };
        ThetaContext {
            p: self.layout.extract(&space.natural(u)),
            theta_norm,
            wpsi,
        }
    }

    fn action_term<T: Real>(&self, ctx: &ThetaContext<T>, b: &GaussianBelief<T>, a: &Action) -> Result<T> {
        let feat = belief_features(b);
        match (self.policy, a) {
            (EnsemblePolicy::Discrete(q), Action::Discrete(a)) => {
                let qs = q.q_from_weighted_psi(&feat, &ctx.wpsi);
                Ok(log_softmax_real(&qs, q.beta, a.index()))
            }
            (EnsemblePolicy::Continuous(pair), Action::Continuous(a)) => {
                let mut x = feat;
                x.extend_from_slice(&ctx.theta_norm);
                let mean = pair.actor.forward_real(&x)?;
                let sd = pair.behaviour_std;
                let mut lp = T::cst(0.0);
                for (obs, m) in [a.v, a.w].into_iter().zip(mean) {
                    // Behavioural noise is added before clamping, so the box edges carry mass.
                    lp += if obs >= 1.0 {
                        log_normal_cdf_real((m - T::cst(1.0)).scale(1.0 / sd))
                    } else if obs <= -1.0 {
                        log_normal_cdf_real((T::cst(-1.0) - m).scale(1.0 / sd))
                    } else {
                        log_normal_density(obs, m, T::cst(sd))
                    };
                }
                Ok(lp)
            }
            _ => Err(IrcError::WrongTask(format!("action {a:?} does not fit the policy"))),
        }
    }

    fn transition_term<T: Real>(&self, ctx: &ThetaContext<T>, s: &[f64], a: &Action, next: &[f64]) -> T {
        if is_stop(a, &self.data.task) {
            return T::cst(0.0);
        }
        let sd = ctx.p.sigma0;
        match a {
            Action::Discrete(a) => log_normal_density(next[0], drift_1d(T::cst(s[0]), *a, ctx.p.gains[0]), sd),
            Action::Continuous(a) => {
                let s_t: Vec<T> = s.iter().map(|v| T::cst(*v)).collect();
                let m = drift_2d(&s_t, *a, ctx.p.gains, self.data.task.dt);
                // Heading and velocities are deterministic given theta; only position is noisy.
                log_normal_density(next[0], m[0], sd) + log_normal_density(next[1], m[1], sd)
            }
        }
    }

    fn trajectory_terms<T: Real>(&self, ctx: &ThetaContext<T>, traj: &ObservedTrajectory) -> Result<TermSums<T>> {
        let beliefs = reconstruct_real(traj, &ctx.p, &self.data.task, None);
        let mut sums = TermSums { action: T::cst(0.0), transition: T::cst(0.0) };
        for (t, a) in traj.actions.iter().enumerate() {
            sums.action += self.action_term(ctx, &beliefs[t], a)?;
            sums.transition += self.transition_term(ctx, &traj.states[t], a, &traj.states[t + 1]);
        }
        Ok(sums)
    }

    /// Per-trajectory contributions at (possibly differentiated) coordinates `u`.
    pub fn terms_real<T: Real>(&self, u: &[T]) -> Result<Vec<TermSums<T>>> {
        let plain: Vec<f64> = u.iter().map(|v| v.val()).collect();
        self.check_coords(&plain)?;
        let ctx = self.context(u);
        self.data
            .trajectories
            .iter()
            .enumerate()
            .map(|(i, traj)| {
                let s = self.trajectory_terms(&ctx, traj)?;
                let v = s.total().val();
                if !v.is_finite() {
                    return Err(IrcError::Likelihood { trajectory: i, detail: format!("log-likelihood {v}") });
                }
                Ok(s)
            })
            .collect()
    }

    pub fn terms(&self, u: &[f64]) -> Result<Vec<TermSums<f64>>> {
        self.terms_real(u)
    }

    pub fn value(&self, u: &[f64]) -> Result<f64> {
        Ok(self.terms(u)?.iter().map(TermSums::total).sum())
    }

    fn seeded(&self, u: &[f64]) -> Result<Vec<Dual>> {
        let active = self.space().inferable_indices();
        if active.len() > MAX_DUAL {
            return Err(IrcError::Config(format!("at most {MAX_DUAL} inferable dims are supported")));
        }
        Ok(u.iter()
            .enumerate()
            .map(|(i, &v)| match active.iter().position(|&a| a == i) {
                Some(slot) => Dual::variable(v, slot),
                None => Dual::constant(v),
            })
            .collect())
    }

    fn unpack(&self, d: &Dual) -> Vec<f64> {
        let mut g = vec![0.0; self.space().len()];
        for (slot, i) in self.space().inferable_indices().into_iter().enumerate() {
            g[i] = d.d[slot];
        }
        g
    }

    /// Value, gradient and per-trajectory gradients (zero for fixed dims), by forward-mode
    /// differentiation through beliefs, policy and transition densities.
    pub fn value_and_scores(&self, u: &[f64]) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
        let terms = self.terms_real(&self.seeded(u)?)?;
        let mut value = 0.0;
        let mut grad = vec![0.0; u.len()];
        let mut scores = Vec::with_capacity(terms.len());
        for t in &terms {
            let total = t.total();
            value += total.v;
            let g = self.unpack(&total);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
            scores.push(g);
        }
        Ok((value, grad, scores))
    }

    pub fn gradient(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, g, _) = self.value_and_scores(u)?;
        Ok((v, g))
    }

    /// Central differences over the inferable dims (step `1e-5 * max(1, |u_i|)`), shrinking the
    /// stencil at the box edges.
    pub fn gradient_fd(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let value = self.value(u)?;
        let mut g = vec![0.0; u.len()];
        let space = self.space();
        for i in space.inferable_indices() {
            let (lo, hi) = space.dims[i].coord_bounds();
            let h = crate::nn::gradcheck::REL_STEP * u[i].abs().max(1.0);
            let up = (u[i] + h).min(hi);
            let dn = (u[i] - h).max(lo);
            let mut z = u.to_vec();
            z[i] = up;
            let fp = self.value(&z)?;
            z[i] = dn;
            let fm = self.value(&z)?;
            g[i] = (fp - fm) / (up - dn);
        }
        Ok((value, g))
    }
}

/// Probability density of the Gaussian `N(0, 1)`, for tests and reports.
pub fn standard_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::{rollout, ActorCriticPair, DdpgHyper, FqiHyper, QEnsembleLinear};
    use crate::learner::discrete::normal_cdf;
    use crate::nn::gradcheck::relative_error;
    use crate::params::sample_params;
    use crate::rng::rng_from_seed;
    use crate::task::{ContinuousAction, DiscreteAction};

    fn q_policy(seed: u64, scale: f64) -> EnsemblePolicy {
        let h = FqiHyper { n_phi: 32, n_psi: 8, ..FqiHyper::default() };
        let mut q = QEnsembleLinear::new(&ParamSpace::firefly_1d(), 2, &h, &mut rng_from_seed(seed)).unwrap();
        for (i, w) in q.w.iter_mut().enumerate() {
            *w = scale * ((i as f64) * 0.731 + seed as f64).sin();
        }
        q.mean_scale = 2.0;
        EnsemblePolicy::Discrete(q)
    }

    fn ac_policy(seed: u64) -> EnsemblePolicy {
        let h = DdpgHyper { width: 12, hidden_layers: 2, ..DdpgHyper::default() };
        EnsemblePolicy::Continuous(ActorCriticPair::new(&ParamSpace::firefly_2d(), 20, &h, &mut rng_from_seed(seed)).unwrap())
    }

    fn simulate(policy: &EnsemblePolicy, cfg: &TaskConfig, theta: &ParamPoint, n: usize, seed: u64) -> (Vec<Trajectory>, Vec<BeliefTrajectory>) {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|i| {
                let (t, b) = rollout(policy, theta, policy.space(), cfg, &mut rng, i as u64, true).unwrap();
                (t, b.unwrap())
            })
            .unzip()
    }

    fn dataset(policy: &EnsemblePolicy, theta: &ParamPoint, n: usize, seed: u64) -> ObservedDataset {
        let cfg = TaskConfig::default_for(policy.task());
        let (trajs, _) = simulate(policy, &cfg, theta, n, seed);
        ObservedDataset::from_trajectories(&cfg, &trajs).unwrap()
    }

    #[test]
    fn constant_q_gives_uniform_action_term() {
        let pol = q_policy(1, 0.0);
        let theta = ParamPoint(vec![1.0, 0.1]);
        let data = dataset(&pol, &theta, 5, 2);
        let lik = Likelihood::new(&pol, &data).unwrap();
        let terms = lik.terms(&pol.space().to_coords(&theta)).unwrap();
        for (t, tr) in terms.iter().zip(&data.trajectories) {
            assert!((t.action + tr.len() as f64 * 3f64.ln()).abs() < 1e-12);
        }
    }

    /// 1D trajectory moving exactly by the gain each step, then stopping.
    fn noiseless_1d(gain: f64, x0: f64, moves: &[DiscreteAction]) -> ObservedTrajectory {
        let mut states = vec![vec![x0]];
        let mut x = x0;
        for a in moves {
            x += gain * a.direction();
            states.push(vec![x]);
        }
        states.push(vec![x]);
        let mut actions = moves.iter().map(|a| Action::Discrete(*a)).collect::<Vec<_>>();
        actions.push(Action::Discrete(DiscreteAction::Stop));
        ObservedTrajectory { states, actions }
    }

    #[test]
    fn transition_term_at_the_mode_and_its_noise_derivative() {
        let pol = q_policy(1, 0.0);
        let moves = [DiscreteAction::Left, DiscreteAction::Left, DiscreteAction::Right, DiscreteAction::Left];
        let theta = ParamPoint(vec![1.3, 0.2]);
        let data = ObservedDataset::new(
            TaskConfig::firefly_1d(),
            vec![noiseless_1d(1.3, 3.0, &moves), noiseless_1d(1.3, -2.0, &moves[..2])],
        )
        .unwrap();
        let lik = Likelihood::new(&pol, &data).unwrap();
        let u = pol.space().to_coords(&theta);
        let terms = lik.terms(&u).unwrap();
        let per_step = -HALF_LN_2PI - 0.2f64.ln();
        assert!((terms[0].transition - 4.0 * per_step).abs() < 1e-12);
        assert!((terms[1].transition - 2.0 * per_step).abs() < 1e-12);
        // With Q constant only the transition term depends on theta.
        let (_, g) = lik.gradient(&u).unwrap();
        assert!((g[1] + 6.0).abs() < 1e-10, "{g:?}");
        assert!(g[0].abs() < 1e-10);
    }

    /// Straightforward 1D likelihood written without the generic machinery.
    fn naive_1d(pol: &QEnsembleLinear, data: &ObservedDataset, theta: &ParamPoint) -> f64 {
        let (g, s0) = (theta.0[0], theta.0[1]);
        let tn = pol.space.normalized_point(theta);
        let mut total = 0.0;
        for tr in &data.trajectories {
            let mut mu = tr.states[0][0];
            let mut var = data.task.initial_var[0];
            for (t, a) in tr.actions.iter().enumerate() {
                let Action::Discrete(a) = a else { unreachable!() };
                let b = GaussianBelief { mean: vec![mu], cov: vec![var] };
                let q = pol.q_values(&b, &tn);
                let z: f64 = q.iter().map(|x| (pol.beta * x).exp()).sum();
                total += pol.beta * q[a.index()] - z.ln();
                if *a != DiscreteAction::Stop {
                    let m = tr.states[t][0] + g * a.direction();
                    let r = tr.states[t + 1][0] - m;
                    total += -0.5 * (2.0 * PI).ln() - s0.ln() - 0.5 * r * r / (s0 * s0);
                }
                mu += g * a.direction();
                var += s0 * s0;
            }
        }
        total
    }

    #[test]
    fn matches_independent_1d_implementation() {
        let pol = q_policy(3, 0.05);
        let EnsemblePolicy::Discrete(q) = &pol else { unreachable!() };
        for (k, theta) in sample_params(pol.space(), 5, 11).into_iter().enumerate() {
            let data = dataset(&pol, &theta, 1, 100 + k as u64);
            let probe = &sample_params(pol.space(), 5, 12)[k];
            let lik = Likelihood::new(&pol, &data).unwrap();
            let got = lik.value(&pol.space().to_coords(probe)).unwrap();
            let want = naive_1d(q, &data, probe);
            assert!((got - want).abs() < 1e-10 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn matches_independent_2d_assembly() {
        let pol = ac_policy(5);
        let EnsemblePolicy::Continuous(ac) = &pol else { unreachable!() };
        let theta = ParamPoint(vec![1.2, 0.8, 0.1]);
        let data = dataset(&pol, &theta, 5, 6);
        let cfg = &data.task;
        let probe = ParamPoint(vec![1.0, 1.1, 0.15]);
        let tn = pol.space().normalized_point(&probe);
        let sd = ac.behaviour_std;
        let mut want = 0.0;
        for tr in &data.trajectories {
            let beliefs = reconstruct_beliefs(tr, &probe, pol.space(), cfg).unwrap();
            for (t, a) in tr.actions.iter().enumerate() {
                let Action::Continuous(a) = a else { unreachable!() };
                let mut x = belief_features(&beliefs.0[t]);
                x.extend_from_slice(&tn);
                let m = ac.actor.forward(&x).unwrap();
                for (o, mu) in [a.v, a.w].into_iter().zip(m) {
                    want += if o >= 1.0 {
                        normal_cdf((mu - 1.0) / sd).ln()
                    } else if o <= -1.0 {
                        normal_cdf((-1.0 - mu) / sd).ln()
                    } else {
                        -0.5 * (2.0 * PI).ln() - sd.ln() - 0.5 * ((o - mu) / sd).powi(2)
                    };
                }
                if a.v.abs().max(a.w.abs()) >= cfg.stop_threshold {
                    let s = &tr.states[t];
                    let v = probe.0[0] * a.v;
                    let phi = s[2] + probe.0[1] * a.w * cfg.dt;
                    let mx = s[0] - v * phi.cos() * cfg.dt;
                    let my = s[1] - v * phi.sin() * cfg.dt;
                    for r in [tr.states[t + 1][0] - mx, tr.states[t + 1][1] - my] {
                        want += -0.5 * (2.0 * PI).ln() - probe.0[2].ln() - 0.5 * (r / probe.0[2]).powi(2);
                    }
                }
            }
        }
        let lik = Likelihood::new(&pol, &data).unwrap();
        let got = lik.value(&pol.space().to_coords(&probe)).unwrap();
        assert!((got - want).abs() < 1e-10 * want.abs(), "{got} vs {want}");
    }

    #[test]
    fn gradient_agrees_with_finite_differences() {
        for (k, pol) in [q_policy(7, 0.05), ac_policy(8)].iter().enumerate() {
            let space = pol.space();
            let truths = sample_params(space, 3, 20 + k as u64);
            let probes = sample_params(space, 3, 30 + k as u64);
            for (i, (t, p)) in truths.iter().zip(&probes).enumerate() {
                let data = dataset(pol, t, 4, 40 + i as u64);
                let lik = Likelihood::new(pol, &data).unwrap();
                let u = space.to_coords(p);
                let (v, g) = lik.gradient(&u).unwrap();
                let (vf, gf) = lik.gradient_fd(&u).unwrap();
                assert!((v - vf).abs() < 1e-12 * v.abs().max(1.0));
                let err = relative_error(&g, &gf);
                assert!(err < 1e-4, "task {k} probe {i}: {g:?} vs {gf:?} ({err})");
            }
        }
    }

    #[test]
    fn empty_trajectories_have_zero_gradient() {
        let pol = q_policy(1, 0.1);
        let empty = ObservedTrajectory { states: vec![vec![2.0]], actions: vec![] };
        let data = ObservedDataset::new(TaskConfig::firefly_1d(), vec![empty.clone(), empty]).unwrap();
        let lik = Likelihood::new(&pol, &data).unwrap();
        let (v, g) = lik.gradient(&pol.space().to_coords(&pol.space().midpoint())).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn log_likelihood_is_additive_over_trajectories() {
        let pol = q_policy(2, 0.05);
        let data = dataset(&pol, &ParamPoint(vec![0.9, 0.2]), 12, 9);
        let lik = |d: &ObservedDataset| {
            Likelihood::new(&pol, d).unwrap().value(&pol.space().to_coords(&ParamPoint(vec![1.1, 0.15]))).unwrap()
        };
        let whole = lik(&data);
        let parts = lik(&data.subset(0..5)) + lik(&data.subset(5..12));
        assert!((whole - parts).abs() < 1e-9 * whole.abs());
    }

    #[test]
    fn out_of_box_and_non_finite_are_errors() {
        let pol = q_policy(1, 0.05);
        let data = dataset(&pol, &ParamPoint(vec![1.0, 0.1]), 3, 1);
        let lik = Likelihood::new(&pol, &data).unwrap();
        assert!(matches!(lik.value(&[0.0, 5.0]), Err(IrcError::OutOfBounds { .. })));
        let mut far = data.clone();
        far.trajectories[1] = noiseless_1d(1.0, 2.0, &[DiscreteAction::Left]);
        far.trajectories[1].states[1][0] = 1e200;
        let lik = Likelihood::new(&pol, &far).unwrap();
        let r = lik.value(&pol.space().to_coords(&ParamPoint(vec![1.0, 0.1])));
        assert!(matches!(r, Err(IrcError::Likelihood { trajectory: 1, .. })), "{r:?}");
        assert!(Likelihood::new(&ac_policy(1), &data).is_err());
    }

    #[test]
    fn one_d_reconstruction_is_exact_and_linear_in_gain() {
        let pol = q_policy(4, 0.05);
        let cfg = TaskConfig::firefly_1d();
        let theta = ParamPoint(vec![1.2, 0.1]);
        let (trajs, beliefs) = simulate(&pol, &cfg, &theta, 5, 3);
        for (t, b) in trajs.iter().zip(&beliefs) {
            let obs = ObservedTrajectory::from_trajectory(t);
            let r = reconstruct_beliefs(&obs, &theta, pol.space(), &cfg).unwrap();
            assert_eq!(&r, b);
            let bumped = reconstruct_beliefs(&obs, &ParamPoint(vec![1.32, 0.1]), pol.space(), &cfg).unwrap();
            let mut disp = 0.0;
            for (k, a) in obs.actions.iter().enumerate() {
                let Action::Discrete(a) = a else { unreachable!() };
                disp += 1.2 * a.direction();
                let shift = bumped.0[k + 1].mean[0] - r.0[k + 1].mean[0];
                assert!((shift - 0.1 * disp).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_d_reconstruction_with_shared_readings_is_exact() {
        let pol = ac_policy(9);
        let cfg = TaskConfig::firefly_2d();
        let theta = ParamPoint(vec![1.4, 0.7, 0.1]);
        let (trajs, beliefs) = simulate(&pol, &cfg, &theta, 5, 4);
        for (t, b) in trajs.iter().zip(&beliefs) {
            let obs = ObservedTrajectory::from_trajectory(t);
            let r = reconstruct_with_observations(&obs, &t.initial_reading, &t.observations().unwrap(), &theta, pol.space(), &cfg).unwrap();
            for (x, y) in r.0.iter().zip(&b.0) {
                for (p, q) in x.mean.iter().zip(&y.mean).chain(x.cov.iter().zip(&y.cov)) {
                    assert!((p - q).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn log_normal_cdf_tail_is_continuous_and_differentiable() {
        let (a, da) = log_normal_cdf(-30.0 + 1e-9);
        let (b, db) = log_normal_cdf(-30.0 - 1e-9);
        assert!((a - b).abs() < 1e-6 && (da - db).abs() < 1e-4 * da);
        for z in [-45.0, -12.0, -1.0, 0.0, 2.5] {
            let h = 1e-6;
            let fd = (log_normal_cdf(z + h).0 - log_normal_cdf(z - h).0) / (2.0 * h);
            assert!((fd - log_normal_cdf(z).1).abs() < 1e-5 * fd.abs().max(1.0), "z {z}");
        }
        assert!((log_normal_cdf(0.0).0 - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_controls_use_the_tail_mass() {
        let pol = ac_policy(2);
        let EnsemblePolicy::Continuous(ac) = &pol else { unreachable!() };
        let cfg = TaskConfig::firefly_2d();
        let traj = ObservedTrajectory {
            states: vec![vec![3.0, 0.5, 0.0, 0.0, 0.0], vec![2.0, 0.4, 0.3, 1.0, -0.6]],
            actions: vec![Action::Continuous(ContinuousAction::new(1.0, -1.0))],
        };
        let data = ObservedDataset::new(cfg, vec![traj]).unwrap();
        let lik = Likelihood::new(&pol, &data).unwrap();
        let theta = pol.space().midpoint();
        let got = lik.terms(&pol.space().to_coords(&theta)).unwrap()[0].action;
        let b = GaussianBelief::<f64>::initial(&data.task, &[3.0, 0.5]);
        let mut x = belief_features(&b);
        x.extend_from_slice(&pol.space().normalized_point(&theta));
        let m = ac.actor.forward(&x).unwrap();
        let sd = ac.behaviour_std;
        let want = normal_cdf((m[0] - 1.0) / sd).ln() + normal_cdf((-1.0 - m[1]) / sd).ln();
        assert!((got - want).abs() < 1e-12);
    }
}
