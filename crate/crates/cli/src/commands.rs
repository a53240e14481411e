//! The four subcommands. Each reads its inputs, writes its outputs under `--out`, and returns
//! the lines it printed so tests can inspect them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use irc_core::belief::{BeliefTrajectory, GaussianBelief};
use irc_core::inference::{multi_restart, reconstruct_beliefs, Likelihood, MleOptions, MleResult};
use irc_core::learner::model::blob_hash;
use irc_core::learner::{load_model, rollout, save_model, train_ddpg, train_discrete_q, EnsemblePolicy, ModelManifest, TrainingHyper};
use irc_core::params::{sample_params, ParamPoint, ParamSpace};
use irc_core::rng::{derive_seed, stream};
use irc_core::task::{DiscreteAction, TaskConfig, TaskId};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::records::{self, FullRecord};
use crate::svg::{self, Chart, Series};

pub const AGENTS_FILE: &str = "agents.csv";
pub const FULL_FILE: &str = "trajectories_full.csv";
pub const OBSERVED_FILE: &str = "trajectories.csv";
pub const OBSERVED_BINARY_FILE: &str = "trajectories.bin";
pub const INFERENCE_FILE: &str = "inference.json";
pub const REPORT_VERSION: u32 = 1;

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn say(out: &mut Vec<String>, line: String) {
    println!("{line}");
    out.push(line);
}

pub struct TrainArgs {
    pub config: RunConfig,
    pub out: PathBuf,
}

pub fn train(args: &TrainArgs) -> CliResult<Vec<String>> {
    let cfg = &args.config;
    let hyper = cfg.seeded_hyper();
    let mut lines = Vec::new();
    let mut log = String::new();
    let policy = match &hyper {
        TrainingHyper::FittedQ(h) => {
            let (q, logs) = train_discrete_q(&cfg.space, &cfg.env, h)?;
            log.push_str("round,mean_return,rows,iterations,last_weight_change,objective\n");
            for l in &logs {
                let _ = writeln!(log, "{},{},{},{},{},{}", l.round, l.mean_return, l.n_rows, l.iterations, l.last_weight_change, l.objective);
                say(&mut lines, format!("round {:3}  mean return {:+.4}  rows {}", l.round, l.mean_return, l.n_rows));
            }
            EnsemblePolicy::Discrete(q)
        }
        TrainingHyper::Ddpg(h) => {
            let (p, logs) = train_ddpg(&cfg.space, &cfg.env, h)?;
            log.push_str("env_steps,episodes,mean_return,critic_loss\n");
            for l in &logs {
                let _ = writeln!(log, "{},{},{},{}", l.env_steps, l.episodes, l.mean_return, l.critic_loss);
            }
            for l in logs.iter().step_by((logs.len() / 20).max(1)) {
                say(&mut lines, format!("steps {:7}  mean return {:+.4}  critic loss {:.3e}", l.env_steps, l.mean_return, l.critic_loss));
            }
            EnsemblePolicy::Continuous(p)
        }
    };
    create_dir(&args.out)?;
    let manifest = save_model(&args.out, &policy, &cfg.env, &hyper, cfg.seed)?;
    write(&args.out.join("train_log.csv"), log)?;
    write(&args.out.join("config.toml"), cfg.to_toml())?;
    say(&mut lines, format!("model written to {} (weights {})", args.out.display(), manifest.weights_hash));
    Ok(lines)
}

pub struct SimulateArgs {
    pub model: PathBuf,
    pub config: RunConfig,
    /// Overrides: sample this many agents / simulate this many trials each.
    pub agents: Option<usize>,
    pub trajectories: Option<usize>,
    pub out: PathBuf,
}

fn load(model: &Path) -> CliResult<(ModelManifest, EnsemblePolicy)> {
    load_model(model).map_err(|e| CliError::usage(format!("model {}: {e}", model.display())))
}

/// Parameters of the simulated agents: a fixed `theta` or uniform draws.
pub fn agent_params(space: &ParamSpace, cfg: &RunConfig, agents: Option<usize>) -> CliResult<Vec<ParamPoint>> {
    match (agents, &cfg.simulate.theta) {
        (None, Some(t)) => {
            let p = ParamPoint(t.clone());
            space.check(&p)?;
            Ok(vec![p])
        }
        (n, _) => {
            let n = n.unwrap_or(cfg.simulate.agents);
            if n == 0 {
                return Err(CliError::usage("at least one agent is required"));
            }
            Ok(sample_params(space, n, derive_seed(cfg.seed, 1)))
        }
    }
}

pub fn simulate(args: &SimulateArgs) -> CliResult<Vec<String>> {
    let (manifest, policy) = load(&args.model)?;
    let cfg = &args.config;
    if cfg.task != manifest.task.task {
        return Err(CliError::usage(format!("config is for {}, model for {}", cfg.task, manifest.task.task)));
    }
    let env = &manifest.task;
    let space = policy.space();
    let thetas = agent_params(space, cfg, args.agents)?;
    let n = args.trajectories.unwrap_or(cfg.simulate.trajectories);
    if n == 0 {
        return Err(CliError::usage("at least one trajectory is required"));
    }
    let mut full = Vec::with_capacity(thetas.len() * n);
    let mut lines = Vec::new();
    for (k, theta) in thetas.iter().enumerate() {
        let mut hits = 0;
        for i in 0..n {
            let seed = derive_seed(cfg.seed, ((k as u64) << 32) | i as u64);
            let mut rng = stream(seed, 0);
            let (t, b) = rollout(&policy, theta, space, env, &mut rng, seed, true)?;
            let mut beliefs = b.expect("beliefs recorded");
            beliefs.0.pop();
            hits += (t.steps.last().is_some_and(|s| s.reward > 0.0)) as usize;
            full.push(FullRecord { agent: k, index: i, trajectory: t, beliefs });
        }
        say(&mut lines, format!("agent {k}: theta {:?}, {hits}/{n} rewarded", theta.0));
    }
    create_dir(&args.out)?;
    let task = env.task;
    let observed = records::observe_records(&full);
    write(&args.out.join(AGENTS_FILE), records::write_agents(space, &thetas))?;
    write(&args.out.join(FULL_FILE), records::write_full(task, &full))?;
    write(&args.out.join(OBSERVED_FILE), records::write_observed(task, &observed))?;
    if cfg.simulate.binary {
        write(&args.out.join(OBSERVED_BINARY_FILE), records::write_observed_binary(task, &observed))?;
    }
    say(&mut lines, format!("{} trajectories written to {}", full.len(), args.out.display()));
    Ok(lines)
}

pub struct InferArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    pub config: RunConfig,
    pub restarts: Option<usize>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentEstimate {
    pub agent: usize,
    pub trajectories: usize,
    pub steps: usize,
    /// 95% interval in natural units, from the half-widths in inference coordinates and
    /// truncated to the parameter box.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub fit: MleResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub version: u32,
    pub task: TaskConfig,
    pub space: ParamSpace,
    pub options: MleOptions,
    pub seed: u64,
    pub model_hash: String,
    pub data_hash: String,
    pub config_hash: String,
    pub agents: Vec<AgentEstimate>,
}

fn interval(space: &ParamSpace, fit: &MleResult) -> (Vec<f64>, Vec<f64>) {
    let mut lo = fit.theta_hat.0.clone();
    let mut hi = fit.theta_hat.0.clone();
    for (k, &i) in fit.active.iter().enumerate() {
        let Some(&hw) = fit.half_widths.get(k) else { continue };
        let d = &space.dims[i];
        let (a, b) = d.coord_bounds();
        lo[i] = d.transform.inverse((fit.coords[i] - hw).max(a));
        hi[i] = d.transform.inverse((fit.coords[i] + hw).min(b));
    }
    (lo, hi)
}

pub fn infer(args: &InferArgs) -> CliResult<Vec<String>> {
    let (manifest, policy) = load(&args.model)?;
    let (task, recs) = records::read_observed(&args.data)?;
    if task != manifest.task.task {
        return Err(CliError::usage(format!("data is from {task}, model is for {}", manifest.task.task)));
    }
    if recs.is_empty() {
        return Err(CliError::usage(format!("{} holds no trajectories", args.data.display())));
    }
    let data_bytes = fs::read(&args.data)?;
    let cfg = &args.config;
    let mut opts = cfg.infer.clone();
    if let Some(r) = args.restarts {
        opts.restarts = r;
    }
    opts.validate()?;
    let space = policy.space();
    let mut lines = Vec::new();
    let mut agents = Vec::new();
    for (id, data) in records::group_by_agent(&manifest.task, &recs)? {
        let lik = Likelihood::new(&policy, &data)?;
        let fit = multi_restart(&lik, &opts, derive_seed(cfg.seed, id as u64))?;
        let (lower, upper) = interval(space, &fit);
        let mut line = format!("agent {id}:");
        for (i, d) in space.dims.iter().enumerate() {
            let _ = write!(line, "  {} = {:.4} [{:.4}, {:.4}]", d.name, fit.theta_hat.0[i], lower[i], upper[i]);
        }
        if !fit.converged {
            line.push_str("  (not converged)");
        }
        say(&mut lines, line);
        agents.push(AgentEstimate { agent: id, trajectories: data.trajectories.len(), steps: data.n_steps(), lower, upper, fit });
    }
    let report = InferenceReport {
        version: REPORT_VERSION,
        task: manifest.task.clone(),
        space: space.clone(),
        options: opts,
        seed: cfg.seed,
        model_hash: manifest.weights_hash.clone(),
        data_hash: blob_hash(&data_bytes),
        config_hash: blob_hash(cfg.to_toml().as_bytes()),
        agents,
    };
    create_dir(&args.out)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Numerical(e.to_string()))?;
    write(&args.out.join(INFERENCE_FILE), json + "\n")?;
    Ok(lines)
}

pub struct ReportArgs {
    pub run: PathBuf,
    pub model: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub agent: usize,
    pub dim: String,
    pub theta_true: f64,
    pub theta_hat: f64,
    pub coord_true: f64,
    pub coord_hat: f64,
    pub half_width: f64,
    pub covered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefRow {
    pub agent: usize,
    pub trajectory: usize,
    pub component: String,
    pub rmse: f64,
    pub correlation: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentAgreement {
    pub component: String,
    pub rmse: f64,
    pub range: f64,
    pub rmse_over_range: f64,
    pub correlation: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub version: u32,
    pub pairs: usize,
    pub covered: usize,
    pub coverage: Option<f64>,
    pub coverage_by_dim: Vec<(String, f64)>,
    pub median_relative_error_by_dim: Vec<(String, f64)>,
    pub belief_agreement: Vec<ComponentAgreement>,
    pub skipped: Vec<String>,
}

/// Named scalar summaries of a belief that are compared between agent and observer.
pub fn belief_components(task: TaskId) -> Vec<(&'static str, fn(&GaussianBelief) -> f64)> {
    match task {
        TaskId::Firefly1d => vec![("mean_x", |b| b.mean[0]), ("var_x", |b| b.cov[0])],
        TaskId::Firefly2d => vec![
            ("mean_x", |b| b.mean[0]),
            ("mean_y", |b| b.mean[1]),
            ("mean_phi", |b| b.mean[2]),
            ("mean_v", |b| b.mean[3]),
            ("mean_omega", |b| b.mean[4]),
            ("cov_x_y", |b| b.cov[1]),
        ],
    }
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Pearson correlation; 1 for two identical constant series, 0 when only one is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 1.0;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Per-component agreement between recorded beliefs and those reconstructed under `theta`,
/// pooled over all steps of all trajectories.
pub fn belief_agreement(task: &TaskConfig, space: &ParamSpace, theta: &ParamPoint, recs: &[&FullRecord]) -> CliResult<(Vec<ComponentAgreement>, Vec<BeliefRow>)> {
    let comps = belief_components(task.task);
    let mut pooled: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); comps.len()];
    let mut rows = Vec::new();
    for r in recs {
        let obs = irc_core::inference::ObservedTrajectory::from_trajectory(&r.trajectory);
        let rec = reconstruct_beliefs(&obs, theta, space, task)?;
        let steps = r.beliefs.0.len();
        for (c, (name, f)) in comps.iter().enumerate() {
            let truth: Vec<f64> = r.beliefs.0.iter().map(f).collect();
            let est: Vec<f64> = rec.0[..steps].iter().map(f).collect();
            rows.push(BeliefRow { agent: r.agent, trajectory: r.index, component: name.to_string(), rmse: rmse(&truth, &est), correlation: correlation(&truth, &est) });
            pooled[c].0.extend(truth);
            pooled[c].1.extend(est);
        }
    }
    let summary = comps
        .iter()
        .zip(&pooled)
        .map(|((name, _), (t, e))| {
            let range = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - t.iter().cloned().fold(f64::INFINITY, f64::min);
            let err = rmse(t, e);
            ComponentAgreement {
                component: name.to_string(),
                rmse: err,
                range: range.max(0.0),
                rmse_over_range: if range > 0.0 { err / range } else if err == 0.0 { 0.0 } else { f64::INFINITY },
                correlation: correlation(t, e),
            }
        })
        .collect();
    Ok((summary, rows))
}

/// Q-values of the 1D ensemble on a grid of belief means at two belief variances.
pub fn q_slice(policy: &EnsemblePolicy, theta: &ParamPoint) -> Option<Vec<(f64, f64, [f64; 3])>> {
    let EnsemblePolicy::Discrete(q) = policy else { return None };
    let tn = q.space.normalized_point(theta);
    let mut out = Vec::new();
    for var in [0.1, 1.0] {
        for i in 0..=48 {
            let mu = -6.0 + 0.25 * i as f64;
            out.push((mu, var, q.q_values(&GaussianBelief { mean: vec![mu], cov: vec![var] }, &tn)));
        }
    }
    Some(out)
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn report(args: &ReportArgs) -> CliResult<Vec<String>> {
    let inf_path = args.run.join(INFERENCE_FILE);
    let inference: InferenceReport = serde_json::from_str(&read_text(&inf_path)?).map_err(|e| CliError::usage(format!("{}: {e}", inf_path.display())))?;
    let space = &inference.space;
    let mut lines = Vec::new();
    let mut summary = ReportSummary { version: REPORT_VERSION, ..ReportSummary::default() };
    create_dir(&args.out)?;

    let truth = match fs::read_to_string(args.run.join(AGENTS_FILE)) {
        Ok(t) => Some(records::read_agents(&t, space)?),
        Err(_) => None,
    };
    match &truth {
        None => {
            log::warn!("no {AGENTS_FILE} in {}: recovery section skipped", args.run.display());
            summary.skipped.push("recovery".into());
        }
        Some(truth) => {
            let mut rows = Vec::new();
            for est in &inference.agents {
                let Some((_, t)) = truth.iter().find(|(id, _)| *id == est.agent) else { continue };
                let tc = space.to_coords(t);
                for (k, &i) in est.fit.active.iter().enumerate() {
                    let hw = est.fit.half_widths.get(k).copied().unwrap_or(f64::NAN);
                    let coord_hat = est.fit.coords[i];
                    rows.push(RecoveryRow {
                        agent: est.agent,
                        dim: space.dims[i].name.clone(),
                        theta_true: t.0[i],
                        theta_hat: est.fit.theta_hat.0[i],
                        coord_true: tc[i],
                        coord_hat,
                        half_width: hw,
                        covered: (coord_hat - tc[i]).abs() <= hw,
                    });
                }
            }
            let mut csv = String::from("agent,dim,theta_true,theta_hat,coord_true,coord_hat,half_width,covered\n");
            for r in &rows {
                let _ = writeln!(csv, "{},{},{},{},{},{},{},{}", r.agent, r.dim, r.theta_true, r.theta_hat, r.coord_true, r.coord_hat, r.half_width, r.covered as u8);
            }
            write(&args.out.join("recovery.csv"), csv)?;
            summary.pairs = rows.len();
            summary.covered = rows.iter().filter(|r| r.covered).count();
            summary.coverage = (!rows.is_empty()).then(|| summary.covered as f64 / rows.len() as f64);
            let mut chart = Chart {
                title: "Recovered vs true parameters".into(),
                x_label: "true (inference coordinates)".into(),
                y_label: "estimate with 95% interval".into(),
                diagonal: true,
                ..Chart::default()
            };
            for d in &space.dims {
                let mine: Vec<&RecoveryRow> = rows.iter().filter(|r| r.dim == d.name).collect();
                if mine.is_empty() {
                    continue;
                }
                let cov = mine.iter().filter(|r| r.covered).count() as f64 / mine.len() as f64;
                let rel = median(mine.iter().map(|r| ((r.theta_hat - r.theta_true) / r.theta_true).abs()).collect());
                summary.coverage_by_dim.push((d.name.clone(), cov));
                summary.median_relative_error_by_dim.push((d.name.clone(), rel));
                chart.series.push(Series {
                    label: d.name.clone(),
                    points: mine.iter().map(|r| (r.coord_true, r.coord_hat)).collect(),
                    errors: mine.iter().map(|r| r.half_width).collect(),
                    scatter: true,
                });
            }
            write(&args.out.join("recovery.svg"), svg::render(&chart))?;
            if let Some(c) = summary.coverage {
                say(&mut lines, format!("coverage {:.1}% ({}/{})", 100.0 * c, summary.covered, summary.pairs));
            }
        }
    }

    match fs::read_to_string(args.run.join(FULL_FILE)) {
        Err(_) => {
            log::warn!("no {FULL_FILE} in {}: belief section skipped", args.run.display());
            summary.skipped.push("beliefs".into());
        }
        Ok(text) => {
            let (_, full) = records::read_full_text(&text)?;
            let mut all_rows = Vec::new();
            let mut pooled: Vec<ComponentAgreement> = Vec::new();
            let mut first: Option<(BeliefTrajectory, BeliefTrajectory)> = None;
            for est in &inference.agents {
                let recs: Vec<&FullRecord> = full.iter().filter(|r| r.agent == est.agent).collect();
                if recs.is_empty() {
                    continue;
                }
                let (agg, rows) = belief_agreement(&inference.task, space, &est.fit.theta_hat, &recs)?;
                all_rows.extend(rows);
                if pooled.is_empty() {
                    pooled = agg;
                } else {
                    // Keep the worst agent per component.
                    for (p, a) in pooled.iter_mut().zip(agg) {
                        if a.rmse_over_range > p.rmse_over_range {
                            *p = a;
                        }
                    }
                }
                if first.is_none() {
                    let obs = irc_core::inference::ObservedTrajectory::from_trajectory(&recs[0].trajectory);
                    first = Some((recs[0].beliefs.clone(), reconstruct_beliefs(&obs, &est.fit.theta_hat, space, &inference.task)?));
                }
            }
            let mut csv = String::from("agent,trajectory,component,rmse,correlation\n");
            for r in &all_rows {
                let _ = writeln!(csv, "{},{},{},{},{}", r.agent, r.trajectory, r.component, r.rmse, r.correlation);
            }
            write(&args.out.join("beliefs.csv"), csv)?;
            for p in &pooled {
                say(&mut lines, format!("belief {:10}  rmse/range {:.4}  correlation {:.4}", p.component, p.rmse_over_range, p.correlation));
            }
            summary.belief_agreement = pooled;
            if let Some((truth, est)) = first {
                let comps = belief_components(inference.task.task);
                let (name, f) = comps[0];
                let n = truth.0.len();
                let chart = Chart {
                    title: format!("Belief {name}: agent vs reconstruction"),
                    x_label: "step".into(),
                    y_label: name.into(),
                    series: vec![
                        Series { label: "agent".into(), points: truth.0.iter().enumerate().map(|(t, b)| (t as f64, f(b))).collect(), ..Series::default() },
                        Series { label: "reconstructed".into(), points: est.0[..n].iter().enumerate().map(|(t, b)| (t as f64, f(b))).collect(), ..Series::default() },
                    ],
                    ..Chart::default()
                };
                write(&args.out.join("beliefs.svg"), svg::render(&chart))?;
            }
        }
    }

    if let Some(model) = &args.model {
        let (_, policy) = load(model)?;
        let theta = policy.space().midpoint();
        if let Some(slice) = q_slice(&policy, &theta) {
            let mut csv = String::from("mu,var,q_left,q_right,q_stop,greedy\n");
            let mut chart = Chart { title: "Q(b, a) at mid-range parameters, var 0.1".into(), x_label: "belief mean".into(), y_label: "Q".into(), ..Chart::default() };
            let mut series: Vec<Series> = DiscreteAction::ALL.iter().map(|a| Series { label: a.name().into(), ..Series::default() }).collect();
            for (mu, var, q) in &slice {
                let g = irc_core::learner::discrete::argmax_action(q);
                let _ = writeln!(csv, "{mu},{var},{},{},{},{}", q[0], q[1], q[2], g.name());
                if *var == 0.1 {
                    for (s, v) in series.iter_mut().zip(q) {
                        s.points.push((*mu, *v));
                    }
                }
            }
            chart.series = series;
            write(&args.out.join("q_slice.csv"), csv)?;
            write(&args.out.join("q_slice.svg"), svg::render(&chart))?;
        }
    }

    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Numerical(e.to_string()))?;
    write(&args.out.join("summary.json"), json + "\n")?;
    say(&mut lines, format!("report written to {}", args.out.display()));
    Ok(lines)
}
