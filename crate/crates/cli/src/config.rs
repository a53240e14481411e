//! Run configuration: one TOML file, every section optional, defaults chosen by task.

use std::path::Path;

use serde::{Deserialize, Serialize};

use irc_core::inference::MleOptions;
use irc_core::learner::{DdpgHyper, FqiHyper, TrainingHyper};
use irc_core::params::{ParamPoint, ParamSpace};
use irc_core::task::{TaskConfig, TaskId};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Number of agents with parameters drawn uniformly from the space. Ignored when `theta`
    /// is set.
    pub agents: usize,
    pub trajectories: usize,
    /// A single agent's parameters, in natural units and `space.dims` order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    /// Also write the observed trajectories in the binary format.
    #[serde(default)]
    pub binary: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskId,
    pub seed: u64,
    pub env: TaskConfig,
    pub space: ParamSpace,
    pub train: TrainingHyper,
    pub simulate: SimulateConfig,
    pub infer: MleOptions,
}

impl RunConfig {
    pub fn default_for(task: TaskId) -> Self {
        let (space, train) = match task {
            TaskId::Firefly1d => (ParamSpace::firefly_1d(), TrainingHyper::FittedQ(FqiHyper::default())),
            TaskId::Firefly2d => (ParamSpace::firefly_2d(), TrainingHyper::Ddpg(DdpgHyper::default())),
        };
        RunConfig {
            task,
            seed: 0,
            env: TaskConfig::default_for(task),
            space,
            train,
            simulate: SimulateConfig {
                agents: 1,
                trajectories: 100,
                theta: None,
                binary: false,
            },
            infer: MleOptions::default(),
        }
    }

    /// Overlay `text` on the defaults of the task it names (1D when absent), then validate.
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::usage(format!("config: {e}")))?;
        let task = match user.get("task") {
            None => TaskId::Firefly1d,
            Some(v) => v
                .as_str()
                .and_then(TaskId::parse)
                .ok_or_else(|| CliError::usage(format!("config: unknown task {v}")))?,
        };
        let mut merged = toml::Table::try_from(RunConfig::default_for(task)).map_err(|e| CliError::usage(format!("config: {e}")))?;
        // A different training backend brings its own defaults rather than the task's.
        if let Some(b) = user.get("train").and_then(|t| t.get("backend")).and_then(|b| b.as_str()) {
            let hyper = match b {
                "fitted_q" => TrainingHyper::FittedQ(FqiHyper::default()),
                "ddpg" => TrainingHyper::Ddpg(DdpgHyper::default()),
                other => return Err(CliError::usage(format!("config: unknown train.backend {other}"))),
            };
            merged.insert("train".into(), toml::Value::try_from(hyper).map_err(|e| CliError::usage(e.to_string()))?);
        }
        overlay(&mut merged, user);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::usage(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(RunConfig::default_for(TaskId::Firefly1d)),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))?;
                RunConfig::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.env.task != self.task {
            return Err(CliError::usage(format!("config: env.task {} differs from task {}", self.env.task, self.task)));
        }
        self.env.validate()?;
        self.space.validate()?;
        irc_core::task::ParamLayout::new(&self.space, self.task)?;
        match (&self.train, self.task) {
            (TrainingHyper::FittedQ(h), TaskId::Firefly1d) => h.validate()?,
            (TrainingHyper::Ddpg(h), TaskId::Firefly2d) => h.validate()?,
            _ => return Err(CliError::usage(format!("config: train.backend does not fit task {}", self.task))),
        }
        self.infer.validate()?;
        if self.simulate.trajectories == 0 {
            return Err(CliError::usage("config: simulate.trajectories must be at least 1"));
        }
        if let Some(t) = &self.simulate.theta {
            self.space.check(&ParamPoint(t.clone()))?;
        }
        Ok(())
    }

    /// Training hyperparameters with the run seed applied.
    pub fn seeded_hyper(&self) -> TrainingHyper {
        match &self.train {
            TrainingHyper::FittedQ(h) => TrainingHyper::FittedQ(FqiHyper { seed: self.seed, ..h.clone() }),
            TrainingHyper::Ddpg(h) => TrainingHyper::Ddpg(DdpgHyper { seed: self.seed, ..h.clone() }),
        }
    }
}

/// Recursive merge of tables; any other value in `user` replaces the default outright.
fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_1d_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default_for(TaskId::Firefly1d));
    }

    #[test]
    fn printed_config_reads_back_identically() {
        for task in [TaskId::Firefly1d, TaskId::Firefly2d] {
            let c = RunConfig::default_for(task);
            let text = c.to_toml();
            let back = RunConfig::from_toml(&text).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_toml(), text);
        }
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_toml("task = \"firefly_2d\"\nseed = 4\n[env]\nhorizon = 30\n[train]\nwidth = 16\n").unwrap();
        assert_eq!(c.env.horizon, 30);
        assert_eq!(c.env.dt, TaskConfig::firefly_2d().dt);
        let TrainingHyper::Ddpg(h) = &c.train else { panic!() };
        assert_eq!(h.width, 16);
        assert_eq!(h.batch, DdpgHyper::default().batch);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::from_toml("[env]\nhorizn = 3\n").unwrap_err();
        assert!(e.to_string().contains("horizn"), "{e}");
        assert_eq!(e.exit_code(), 2);
        let e = RunConfig::from_toml("colour = 1\n").unwrap_err();
        assert!(e.to_string().contains("colour"), "{e}");
    }

    #[test]
    fn inconsistent_sections_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nbackend = \"ddpg\"\n").is_err());
        assert!(RunConfig::from_toml("[simulate]\ntheta = [9.0, 0.1]\n").is_err());
        assert!(RunConfig::from_toml("task = \"firefly_3d\"\n").is_err());
        assert!(RunConfig::from_toml("[infer]\nbacktrack = 2.0\n").is_err());
    }
}
