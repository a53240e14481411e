//! A trained ensemble on disk: `manifest.json` next to a binary weight file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ddpg::{ActorCriticPair, DdpgHyper};
use super::discrete::{FqiHyper, QEnsembleLinear};
use super::Policy;
use crate::belief::GaussianBelief;
use crate::error::{IrcError, Result};
use crate::nn::io::{Section, WeightFile};
use crate::params::ParamSpace;
use crate::rng::IrcRng;
use crate::task::{Action, TaskConfig, TaskId};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum EnsemblePolicy {
    Discrete(QEnsembleLinear),
    Continuous(ActorCriticPair),
}

impl EnsemblePolicy {
    pub fn space(&self) -> &ParamSpace {
        match self {
            EnsemblePolicy::Discrete(q) => &q.space,
            EnsemblePolicy::Continuous(p) => &p.space,
        }
    }

    pub fn task(&self) -> TaskId {
        match self {
            EnsemblePolicy::Discrete(_) => TaskId::Firefly1d,
            EnsemblePolicy::Continuous(_) => TaskId::Firefly2d,
        }
    }

    /// Softmax temperature (discrete) or Gaussian action std (continuous).
    pub fn behaviour_noise(&self) -> f64 {
        match self {
            EnsemblePolicy::Discrete(q) => q.beta,
            EnsemblePolicy::Continuous(p) => p.behaviour_std,
        }
    }

    pub fn weights(&self) -> WeightFile {
        let mut wf = WeightFile::default();
        match self {
            EnsemblePolicy::Discrete(q) => {
                wf.push("phi", Section::Basis(q.phi.clone()));
                wf.push("psi", Section::Basis(q.psi.clone()));
                wf.push("w", Section::Matrix { rows: q.n_phi(), cols: q.n_psi(), data: q.w.clone() });
            }
            EnsemblePolicy::Continuous(p) => {
                wf.push("actor", Section::Dense(p.actor.clone()));
                wf.push("critic", Section::Dense(p.critic.clone()));
                wf.push("actor_target", Section::Dense(p.actor_target.clone()));
                wf.push("critic_target", Section::Dense(p.critic_target.clone()));
            }
        }
        wf
    }
}

impl Policy for EnsemblePolicy {
    fn act(&self, b: &GaussianBelief, theta_norm: &[f64], rng: &mut IrcRng) -> Result<Action> {
        match self {
            EnsemblePolicy::Discrete(q) => q.act(b, theta_norm, rng),
            EnsemblePolicy::Continuous(p) => p.act(b, theta_norm, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum TrainingHyper {
    FittedQ(FqiHyper),
    Ddpg(DdpgHyper),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub version: u32,
    pub task: TaskConfig,
    pub space: ParamSpace,
    pub hyper: TrainingHyper,
    pub seed: u64,
    pub behaviour_noise: f64,
    pub tau: Option<f64>,
    pub weights_file: String,
    /// sha256 over `"blob {len}\0" ++ bytes` of the weight file.
    pub weights_hash: String,
}

/// Content hash in the style of a git blob id, with sha256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn model_err(detail: impl Into<String>) -> IrcError {
    IrcError::format("model", detail)
}

pub fn save_model(dir: &Path, policy: &EnsemblePolicy, task: &TaskConfig, hyper: &TrainingHyper, seed: u64) -> Result<ModelManifest> {
    if task.task != policy.task() {
        return Err(IrcError::WrongTask(format!("policy is for {}, config for {}", policy.task().as_str(), task.task.as_str())));
    }
    fs::create_dir_all(dir)?;
    let bytes = policy.weights().to_bytes();
    fs::write(dir.join(WEIGHTS_FILE), &bytes)?;
    let manifest = ModelManifest {
        version: MANIFEST_VERSION,
        task: task.clone(),
        space: policy.space().clone(),
        hyper: hyper.clone(),
        seed,
        behaviour_noise: policy.behaviour_noise(),
        tau: match policy {
            EnsemblePolicy::Continuous(p) => Some(p.tau),
            EnsemblePolicy::Discrete(_) => None,
        },
        weights_file: WEIGHTS_FILE.to_string(),
        weights_hash: blob_hash(&bytes),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| model_err(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

pub fn load_model(dir: &Path) -> Result<(ModelManifest, EnsemblePolicy)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: ModelManifest = serde_json::from_str(&text).map_err(|e| model_err(format!("manifest: {e}")))?;
    if m.version != MANIFEST_VERSION {
        return Err(model_err(format!("unsupported manifest version {}", m.version)));
    }
    m.task.validate()?;
    m.space.validate()?;
    let bytes = fs::read(dir.join(&m.weights_file))?;
    let got = blob_hash(&bytes);
    if got != m.weights_hash {
        return Err(model_err(format!("weight file hash {got} does not match manifest {}", m.weights_hash)));
    }
    let wf = WeightFile::from_bytes(&bytes)?;
    let policy = match (&m.hyper, m.task.task) {
        (TrainingHyper::FittedQ(_), TaskId::Firefly1d) => {
            let phi = wf.basis("phi")?;
            let psi = wf.basis("psi")?;
            let (rows, cols, w) = wf.matrix("w")?;
            if rows != phi.n_features() || cols != psi.n_features() || psi.input_dim() != m.space.len() {
                return Err(model_err("Q weight shapes disagree with the bases"));
            }
            EnsemblePolicy::Discrete(QEnsembleLinear {
                space: m.space.clone(),
                phi,
                psi,
                w,
                beta: m.behaviour_noise,
                mean_scale: 1.0 / m.task.reward.radius,
            })
        }
        (TrainingHyper::Ddpg(_), TaskId::Firefly2d) => {
            let actor = wf.dense("actor")?;
            let critic = wf.dense("critic")?;
            if actor.output_dim() != 2 || critic.output_dim() != 1 || actor.input_dim() + 2 != critic.input_dim() {
                return Err(model_err("actor and critic shapes disagree"));
            }
            EnsemblePolicy::Continuous(ActorCriticPair {
                space: m.space.clone(),
                actor_target: wf.dense("actor_target")?,
                critic_target: wf.dense("critic_target")?,
                actor,
                critic,
                tau: m.tau.unwrap_or(DdpgHyper::default().tau),
                behaviour_std: m.behaviour_noise,
                shaping: match &m.hyper {
                    TrainingHyper::Ddpg(h) => h.shaping,
                    TrainingHyper::FittedQ(_) => 0.0,
                },
            })
        }
        (_, t) => return Err(IrcError::WrongTask(format!("backend in manifest does not fit task {}", t.as_str()))),
    };
    Ok((m, policy))
}
