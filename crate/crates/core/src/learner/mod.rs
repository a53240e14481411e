//! Policies learned jointly over parameter space, and the simulator loop that runs them.
//!
//! Both backends take the normalized parameter vector as an extra input, so a single trained
//! object stands in for the optimal policy of every model in the ensemble.

pub mod ddpg;
pub mod discrete;
pub mod model;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use ddpg::{actor_action, train_ddpg, ActorCriticPair, DdpgHyper, ReplayBuffer, Transition};
pub use discrete::{softmax_policy, train_discrete_q, FqiHyper, QEnsembleLinear};
pub use model::{load_model, save_model, EnsemblePolicy, ModelManifest, TrainingHyper};

use crate::belief::{advance, BeliefTrajectory, GaussianBelief};
use crate::error::Result;
use crate::params::{ParamPoint, ParamSpace};
use crate::rng::IrcRng;
use crate::task::{initial_state, observe, step_world, Action, ParamLayout, TaskConfig, TaskId, WorldState};

/// One simulated step: `state --action--> next_state`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
    pub next_state: Vec<f64>,
    /// Reading taken after the step (2D only).
    pub observation: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: TaskId,
    pub theta: Option<ParamPoint>,
    pub seed: u64,
    /// The agent's one-off reading of the target position.
    pub initial_reading: Vec<f64>,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn terminal_index(&self) -> Option<usize> {
        self.steps.iter().position(|s| s.done)
    }

    pub fn observations(&self) -> Option<Vec<Vec<f64>>> {
        self.steps.iter().map(|s| s.observation.clone()).collect()
    }
}

/// Anything that maps a belief and a normalized parameter vector to an action.
pub trait Policy {
    fn act(&self, belief: &GaussianBelief, theta_norm: &[f64], rng: &mut IrcRng) -> Result<Action>;
}

impl<F> Policy for F
where
    F: Fn(&GaussianBelief, &[f64], &mut IrcRng) -> Result<Action>,
{
    fn act(&self, belief: &GaussianBelief, theta_norm: &[f64], rng: &mut IrcRng) -> Result<Action> {
        self(belief, theta_norm, rng)
    }
}

/// Simulate the world and the agent's belief in lockstep. The policy only ever sees the belief.
pub fn rollout<P: Policy + ?Sized>(
    policy: &P,
    theta: &ParamPoint,
    space: &ParamSpace,
    cfg: &TaskConfig,
    rng: &mut IrcRng,
    seed: u64,
    record_beliefs: bool,
) -> Result<(Trajectory, Option<BeliefTrajectory>)> {
    space.check(theta)?;
    let p = ParamLayout::new(space, cfg.task)?.extract(&theta.0);
    let theta_norm = space.normalized_point(theta);
    let (mut s, reading) = initial_state(cfg, rng);
    let mut b: GaussianBelief = GaussianBelief::initial(cfg, &reading);
    let mut beliefs = record_beliefs.then(|| vec![b.clone()]);
    let mut steps = Vec::new();
    for t in 0..cfg.horizon {
        let a = policy.act(&b, &theta_norm, rng)?;
        let step = step_world(&s, &a, &p, cfg, t, rng)?;
        let obs = match step.state {
            WorldState::TwoD(_) => Some(observe(&step.state, cfg, rng)?),
            WorldState::OneD(_) => None,
        };
        b = advance(&b, &a, obs.as_deref(), &p, cfg);
        if let Some(bs) = beliefs.as_mut() {
            bs.push(b.clone());
        }
        steps.push(StepRecord {
            t,
            state: s.to_vec(),
            action: a,
            reward: step.reward,
            done: step.done,
            next_state: step.state.to_vec(),
            observation: obs,
        });
        s = step.state;
        if step.done {
            break;
        }
    }
    let traj = Trajectory {
        task: cfg.task,
        theta: Some(theta.clone()),
        seed,
        initial_reading: reading,
        steps,
    };
    Ok((traj, beliefs.map(BeliefTrajectory)))
}

/// Uniformly random actions, used for exploration and tests.
pub fn random_action<R: Rng + ?Sized>(task: TaskId, rng: &mut R) -> Action {
    match task {
        TaskId::Firefly1d => Action::Discrete(crate::task::DiscreteAction::ALL[rng.random_range(0..3)]),
        TaskId::Firefly2d => Action::Continuous(crate::task::ContinuousAction::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        )),
    }
}
