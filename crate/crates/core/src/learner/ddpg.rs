//! Deterministic policy gradient with parameter-conditioned actor and critic (2D task).

use log::info;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::discrete::value_bounds;
use super::Policy;
use crate::belief::{advance, belief_features, feature_len, GaussianBelief};
use crate::error::{IrcError, Result};
use crate::nn::{Activation, Adam, DenseNet};
use crate::params::{sample_params, ParamSpace};
use crate::rng::{self, IrcRng};
use crate::task::{initial_state, observe, step_world, Action, ContinuousAction, ParamLayout, TaskConfig, TaskId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpgHyper {
    pub hidden_layers: usize,
    pub width: usize,
    pub replay_capacity: usize,
    pub batch: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub tau: f64,
    pub exploration_std: f64,
    /// Behavioural action noise of the simulated agent.
    pub behaviour_std: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    /// Environment steps between gradient updates.
    pub train_every: usize,
    /// Updates per critic-loss check.
    pub check_every: usize,
    pub loss_ceiling: f64,
    /// Consecutive checks above the ceiling that count as divergence.
    pub divergence_patience: usize,
    /// Weight of the distance potential used to shape training rewards; 0 disables shaping.
    pub shaping: f64,
    pub seed: u64,
}

impl Default for DdpgHyper {
    fn default() -> Self {
        DdpgHyper {
            hidden_layers: 3,
            width: 64,
            replay_capacity: 100_000,
            batch: 64,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            tau: 0.005,
            exploration_std: 0.15,
            behaviour_std: 0.1,
            total_steps: 200_000,
            warmup_steps: 1_000,
            train_every: 1,
            check_every: 500,
            loss_ceiling: 1e3,
            divergence_patience: 5,
            shaping: 0.1,
            seed: 0,
        }
    }
}

impl DdpgHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IrcError::Config(m.to_string()));
        if self.hidden_layers == 0 || self.width == 0 {
            return bad("networks need at least one hidden layer of positive width");
        }
        if self.batch == 0 || self.replay_capacity < self.batch {
            return bad("replay_capacity must be at least batch > 0");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.exploration_std >= 0.0 && self.behaviour_std > 0.0) {
            return bad("exploration_std must be >= 0 and behaviour_std > 0");
        }
        if !(self.shaping >= 0.0 && self.shaping.is_finite()) {
            return bad("shaping must be finite and >= 0");
        }
        if self.train_every == 0 || self.check_every == 0 || self.divergence_patience == 0 {
            return bad("train_every, check_every and divergence_patience must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub feat: Vec<f64>,
    /// Potential of the source belief; the stored reward is already shaped with it.
    pub potential: f64,
    pub theta: Vec<f64>,
    pub action: [f64; 2],
    pub reward: f64,
    pub next_feat: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T = Transition> {
    capacity: usize,
    items: Vec<T>,
    next: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity");
        ReplayBuffer { capacity, items: Vec::with_capacity(capacity.min(1 << 16)), next: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> &T {
        &self.items[i]
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActorCriticPair {
    pub space: ParamSpace,
    pub actor: DenseNet,
    pub critic: DenseNet,
    pub actor_target: DenseNet,
    pub critic_target: DenseNet,
    pub tau: f64,
    pub behaviour_std: f64,
    /// The critic learns `Q - potential(b)`; see [`potential`].
    pub shaping: f64,
}

/// Shaping potential `-k |mean position|` of a belief, read from its features. Terminal beliefs
/// have potential 0, so shaping adds `-potential(b_0)` to every return from `b_0` and leaves the
/// optimal policy unchanged.
pub fn potential(feat: &[f64], k: f64) -> f64 {
    -k * feat[0].hypot(feat[1])
}

const ACTOR_OUTPUT_SCALE: f64 = 0.02;

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

impl ActorCriticPair {
    pub fn new(space: &ParamSpace, feat_dim: usize, h: &DdpgHyper, rng: &mut IrcRng) -> Result<Self> {
        let k = space.len();
        let mut a_sizes = vec![feat_dim + k];
        let mut c_sizes = vec![feat_dim + 2 + k];
        for _ in 0..h.hidden_layers {
            a_sizes.push(h.width);
            c_sizes.push(h.width);
        }
        a_sizes.push(2);
        c_sizes.push(1);
        let mut actor = DenseNet::init(&a_sizes, Activation::Softplus, Activation::Tanh, rng)?;
        // Start near the zero action so early episodes contain stops.
        actor.scale_layer(actor.n_layers() - 1, ACTOR_OUTPUT_SCALE);
        let critic = DenseNet::init(&c_sizes, Activation::Softplus, Activation::Identity, rng)?;
        Ok(ActorCriticPair {
            space: space.clone(),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            tau: h.tau,
            behaviour_std: h.behaviour_std,
            shaping: h.shaping,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.actor.input_dim() - self.space.len()
    }

    pub fn actor_input(&self, feat: &[f64], theta_norm: &[f64]) -> Vec<f64> {
        concat(&[feat, theta_norm])
    }

    pub fn critic_input(&self, feat: &[f64], a: &[f64], theta_norm: &[f64]) -> Vec<f64> {
        concat(&[feat, a, theta_norm])
    }

    /// Noise-free actor output.
    pub fn mean_action(&self, b: &GaussianBelief, theta_norm: &[f64]) -> Result<[f64; 2]> {
        let out = self.actor.forward(&self.actor_input(&belief_features(b), theta_norm))?;
        Ok([out[0], out[1]])
    }

    pub fn q_value(&self, b: &GaussianBelief, a: [f64; 2], theta_norm: &[f64]) -> Result<f64> {
        let feat = belief_features(b);
        Ok(self.critic.forward(&self.critic_input(&feat, &a, theta_norm))?[0] + potential(&feat, self.shaping))
    }

    pub fn soft_update(&mut self, tau: f64) {
        self.actor.soft_update_into(&mut self.actor_target, tau);
        self.critic.soft_update_into(&mut self.critic_target, tau);
    }
}

/// Actor output plus optional Gaussian noise, clamped to the action box.
pub fn actor_action(pair: &ActorCriticPair, b: &GaussianBelief, theta_norm: &[f64], exploration_std: f64, rng: &mut IrcRng) -> Result<ContinuousAction> {
    let [v, w] = pair.mean_action(b, theta_norm)?;
    if exploration_std == 0.0 {
        return Ok(ContinuousAction::new(v, w));
    }
    let nv: f64 = rng.sample(StandardNormal);
    let nw: f64 = rng.sample(StandardNormal);
    Ok(ContinuousAction::new(v + exploration_std * nv, w + exploration_std * nw))
}

impl Policy for ActorCriticPair {
    fn act(&self, b: &GaussianBelief, theta_norm: &[f64], rng: &mut IrcRng) -> Result<Action> {
        actor_action(self, b, theta_norm, self.behaviour_std, rng).map(Action::Continuous)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DdpgLog {
    pub env_steps: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub critic_loss: f64,
}

struct Learner {
    adam_actor: Adam,
    adam_critic: Adam,
    grad_actor: Vec<f64>,
    grad_critic: Vec<f64>,
}

impl Learner {
    /// One critic and one actor step on a sampled batch; returns the mean critic loss.
    fn update(&mut self, pair: &mut ActorCriticPair, buf: &ReplayBuffer, batch: usize, gamma: f64, bounds: [f64; 2], rng: &mut IrcRng) -> Result<f64> {
        let idx = buf.sample_indices(batch, rng);
        let scale = 1.0 / batch as f64;
        self.grad_critic.fill(0.0);
        let mut loss = 0.0;
        for &i in &idx {
            let tr = buf.get(i);
            let y = if tr.done {
                tr.reward
            } else {
                let a2 = pair.actor_target.forward(&pair.actor_input(&tr.next_feat, &tr.theta))?;
                let q2 = pair.critic_target.forward(&pair.critic_input(&tr.next_feat, &a2, &tr.theta))?[0];
                tr.reward + gamma * q2
            };
            // Shaped values are true values less the potential, which bounds them too.
            let y = y.clamp(bounds[0] - tr.potential, bounds[1] - tr.potential);
            let trace = pair.critic.forward_trace(&pair.critic_input(&tr.feat, &tr.action, &tr.theta))?;
            let err = trace.output()[0] - y;
            loss += err * err * scale;
            pair.critic.backward_trace(&trace, &[2.0 * err * scale], Some(&mut self.grad_critic));
        }
        self.adam_critic.step(pair.critic.params_mut(), &self.grad_critic);

        self.grad_actor.fill(0.0);
        let f = pair.feature_dim();
        for &i in &idx {
            let tr = buf.get(i);
            let at = pair.actor.forward_trace(&pair.actor_input(&tr.feat, &tr.theta))?;
            let ct = pair.critic.forward_trace(&pair.critic_input(&tr.feat, at.output(), &tr.theta))?;
            let dq = pair.critic.backward_trace(&ct, &[1.0], None);
            // Ascend Q: descend -dQ/da.
            let up = [-dq[f] * scale, -dq[f + 1] * scale];
            pair.actor.backward_trace(&at, &up, Some(&mut self.grad_actor));
        }
        self.adam_actor.step(pair.actor.params_mut(), &self.grad_actor);
        pair.soft_update(pair.tau);
        Ok(loss)
    }
}

pub fn train_ddpg(space: &ParamSpace, cfg: &TaskConfig, h: &DdpgHyper) -> Result<(ActorCriticPair, Vec<DdpgLog>)> {
    if cfg.task != TaskId::Firefly2d {
        return Err(IrcError::WrongTask(format!("actor-critic backend needs continuous actions, got {}", cfg.task.as_str())));
    }
    space.validate()?;
    cfg.validate()?;
    h.validate()?;
    let layout = ParamLayout::new(space, cfg.task)?;
    let mut pair = ActorCriticPair::new(space, feature_len(cfg.task.state_dim()), h, &mut rng::stream(h.seed, 1))?;
    let mut learner = Learner {
        adam_actor: Adam::new(pair.actor.n_params(), h.actor_lr),
        adam_critic: Adam::new(pair.critic.n_params(), h.critic_lr),
        grad_actor: vec![0.0; pair.actor.n_params()],
        grad_critic: vec![0.0; pair.critic.n_params()],
    };
    let mut env_rng = rng::stream(h.seed, 2);
    let mut batch_rng = rng::stream(h.seed, 3);
    let mut buf = ReplayBuffer::new(h.replay_capacity);
    let gamma = cfg.reward.discount;
    let bounds = value_bounds(&cfg.reward);
    let (mut steps, mut episode, mut updates) = (0usize, 0u64, 0usize);
    let (mut window_loss, mut window_updates, mut strikes) = (0.0, 0usize, 0usize);
    let (mut window_return, mut window_episodes) = (0.0, 0usize);
    let mut logs = Vec::new();
    while steps < h.total_steps {
        let theta = sample_params(space, 1, rng::derive_seed(h.seed, 10_000 + episode)).remove(0);
        episode += 1;
        let tn = space.normalized_point(&theta);
        let p = layout.extract(&theta.0);
        let (mut s, reading) = initial_state(cfg, &mut env_rng);
        let mut b: GaussianBelief = GaussianBelief::initial(cfg, &reading);
        let mut ret = 0.0;
        for t in 0..cfg.horizon {
            let feat = belief_features(&b);
            let phi = potential(&feat, h.shaping);
            let a = actor_action(&pair, &b, &tn, h.exploration_std, &mut env_rng)?;
            let action = Action::Continuous(a);
            let step = step_world(&s, &action, &p, cfg, t, &mut env_rng)?;
            let obs = observe(&step.state, cfg, &mut env_rng)?;
            b = advance(&b, &action, Some(&obs), &p, cfg);
            ret += step.reward;
            let next_feat = belief_features(&b);
            let next_phi = if step.done { 0.0 } else { potential(&next_feat, h.shaping) };
            buf.push(Transition {
                feat,
                potential: phi,
                theta: tn.clone(),
                action: [a.v, a.w],
                reward: step.reward + gamma * next_phi - phi,
                next_feat,
                done: step.done,
            });
            steps += 1;
            s = step.state;
            if buf.len() >= h.warmup_steps.max(h.batch) && steps % h.train_every == 0 {
                let loss = learner.update(&mut pair, &buf, h.batch, gamma, bounds, &mut batch_rng)?;
                updates += 1;
                window_loss += loss;
                window_updates += 1;
                if updates % h.check_every == 0 {
                    let mean = window_loss / window_updates as f64;
                    if !mean.is_finite() || pair.actor.params().iter().chain(pair.critic.params()).any(|x| !x.is_finite()) {
                        return Err(IrcError::Divergence(format!("non-finite critic loss or weights after {updates} updates")));
                    }
                    strikes = if mean > h.loss_ceiling { strikes + 1 } else { 0 };
                    if strikes >= h.divergence_patience {
                        return Err(IrcError::Divergence(format!(
                            "critic loss {mean:.3e} above ceiling {:.3e} for {strikes} consecutive checks ({updates} updates)",
                            h.loss_ceiling
                        )));
                    }
                    let log = DdpgLog {
                        env_steps: steps,
                        episodes: window_episodes,
                        mean_return: window_return / window_episodes.max(1) as f64,
                        critic_loss: mean,
                    };
                    info!(
                        "steps {steps}: mean return {:.4} over {} episodes, critic loss {mean:.4e}",
                        log.mean_return, log.episodes
                    );
                    logs.push(log);
                    window_loss = 0.0;
                    window_updates = 0;
                    window_return = 0.0;
                    window_episodes = 0;
                }
            }
            if step.done || steps >= h.total_steps {
                break;
            }
        }
        window_return += ret;
        window_episodes += 1;
    }
    Ok((pair, logs))
}
