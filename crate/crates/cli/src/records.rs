//! Trajectory files.
//!
//! Text schema v1 is one CSV row per step, preceded by two `#` lines naming the schema version,
//! the task and the variant:
//!
//! ```text
//! # irc-trajectories v1
//! # task=firefly_1d kind=observed
//! agent,trajectory,t,s_x,a,n_x
//! ```
//!
//! The `observed` variant carries states and actions only (`s_*` before the step, `a*` the
//! action, `n_*` the state after it). The `full` variant adds the episode seed, the agent's
//! initial target reading (`r_*`), reward and termination, its self-motion reading after the
//! step (`o_*`, 2D) and the belief that chose the action (`b_mean_i`, `b_cov_i_j` for the upper
//! triangle). The compact binary variant (`.bin`) holds observed data only.

use std::fmt::Write as _;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use irc_core::belief::{BeliefTrajectory, GaussianBelief};
use irc_core::inference::{ObservedDataset, ObservedTrajectory};
use irc_core::learner::{StepRecord, Trajectory};
use irc_core::params::{ParamPoint, ParamSpace};
use irc_core::task::{Action, ContinuousAction, DiscreteAction, TaskConfig, TaskId};

use crate::error::{CliError, CliResult};

pub const TEXT_MAGIC: &str = "# irc-trajectories v1";
pub const BINARY_MAGIC: &[u8; 4] = b"IRCT";
pub const BINARY_VERSION: u32 = 1;

/// One simulated trial of one agent, with the agent's beliefs.
#[derive(Clone, Debug, PartialEq)]
pub struct FullRecord {
    pub agent: usize,
    pub index: usize,
    pub trajectory: Trajectory,
    /// `b_0..b_{T-1}`: the belief in force when each action was chosen.
    pub beliefs: BeliefTrajectory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservedRecord {
    pub agent: usize,
    pub index: usize,
    pub trajectory: ObservedTrajectory,
}

fn bad(detail: impl Into<String>) -> CliError {
    CliError::usage(format!("trajectory file: {}", detail.into()))
}

fn state_names(task: TaskId) -> &'static [&'static str] {
    match task {
        TaskId::Firefly1d => &["x"],
        TaskId::Firefly2d => &["x", "y", "phi", "v", "omega"],
    }
}

fn action_cols(task: TaskId) -> Vec<String> {
    match task {
        TaskId::Firefly1d => vec!["a".into()],
        TaskId::Firefly2d => vec!["a_v".into(), "a_w".into()],
    }
}

fn prefixed(prefix: &str, names: &[&str]) -> Vec<String> {
    names.iter().map(|n| format!("{prefix}_{n}")).collect()
}

fn reading_len(task: TaskId) -> usize {
    match task {
        TaskId::Firefly1d => 1,
        TaskId::Firefly2d => 2,
    }
}

pub fn observed_header(task: TaskId) -> Vec<String> {
    let s = state_names(task);
    let mut h: Vec<String> = ["agent", "trajectory", "t"].iter().map(|x| x.to_string()).collect();
    h.extend(prefixed("s", s));
    h.extend(action_cols(task));
    h.extend(prefixed("n", s));
    h
}

pub fn full_header(task: TaskId) -> Vec<String> {
    let s = state_names(task);
    let n = s.len();
    let mut h: Vec<String> = ["agent", "trajectory", "seed", "t"].iter().map(|x| x.to_string()).collect();
    h.extend(prefixed("r", &s[..reading_len(task)]));
    h.extend(prefixed("s", s));
    h.extend(action_cols(task));
    h.push("reward".into());
    h.push("done".into());
    h.extend(prefixed("n", s));
    if task == TaskId::Firefly2d {
        h.extend(prefixed("o", &["v", "omega"]));
    }
    h.extend((0..n).map(|i| format!("b_mean_{i}")));
    for i in 0..n {
        for j in i..n {
            h.push(format!("b_cov_{i}_{j}"));
        }
    }
    h
}

fn push_action(row: &mut Vec<String>, a: &Action) {
    match a {
        Action::Discrete(a) => row.push(a.name().to_string()),
        Action::Continuous(a) => {
            row.push(a.v.to_string());
            row.push(a.w.to_string());
        }
    }
}

fn push_all(row: &mut Vec<String>, v: &[f64]) {
    row.extend(v.iter().map(|x| x.to_string()));
}

fn preamble(task: TaskId, kind: &str, header: &[String]) -> String {
    format!("{TEXT_MAGIC}\n# task={} kind={kind}\n{}\n", task.as_str(), header.join(","))
}

pub fn write_full(task: TaskId, records: &[FullRecord]) -> String {
    let mut out = preamble(task, "full", &full_header(task));
    for r in records {
        for (t, st) in r.trajectory.steps.iter().enumerate() {
            let mut row = vec![r.agent.to_string(), r.index.to_string(), r.trajectory.seed.to_string(), t.to_string()];
            push_all(&mut row, &r.trajectory.initial_reading);
            push_all(&mut row, &st.state);
            push_action(&mut row, &st.action);
            row.push(st.reward.to_string());
            row.push((st.done as u8).to_string());
            push_all(&mut row, &st.next_state);
            if task == TaskId::Firefly2d {
                push_all(&mut row, st.observation.as_deref().unwrap_or(&[f64::NAN, f64::NAN]));
            }
            let b = &r.beliefs.0[t];
            push_all(&mut row, &b.mean);
            let n = b.dim();
            for i in 0..n {
                for j in i..n {
                    row.push(b.cov[i * n + j].to_string());
                }
            }
            let _ = writeln!(out, "{}", row.join(","));
        }
    }
    out
}

pub fn write_observed(task: TaskId, records: &[ObservedRecord]) -> String {
    let mut out = preamble(task, "observed", &observed_header(task));
    for r in records {
        let tr = &r.trajectory;
        for (t, a) in tr.actions.iter().enumerate() {
            let mut row = vec![r.agent.to_string(), r.index.to_string(), t.to_string()];
            push_all(&mut row, &tr.states[t]);
            push_action(&mut row, a);
            push_all(&mut row, &tr.states[t + 1]);
            let _ = writeln!(out, "{}", row.join(","));
        }
    }
    out
}

struct Table {
    task: TaskId,
    kind: String,
    rows: Vec<Vec<String>>,
}

fn parse_table(text: &str) -> CliResult<Table> {
    let mut lines = text.lines();
    if lines.next() != Some(TEXT_MAGIC) {
        return Err(bad(format!("missing `{TEXT_MAGIC}` header")));
    }
    let meta = lines.next().ok_or_else(|| bad("missing task line"))?;
    let mut task = None;
    let mut kind = None;
    for kv in meta.trim_start_matches('#').split_whitespace() {
        match kv.split_once('=') {
            Some(("task", v)) => task = TaskId::parse(v),
            Some(("kind", v)) => kind = Some(v.to_string()),
            _ => return Err(bad(format!("unexpected header field {kv}"))),
        }
    }
    let task = task.ok_or_else(|| bad("unknown or missing task"))?;
    let kind = kind.ok_or_else(|| bad("missing kind"))?;
    let header = lines.next().ok_or_else(|| bad("missing column header"))?;
    let expected = match kind.as_str() {
        "observed" => observed_header(task),
        "full" => full_header(task),
        k => return Err(bad(format!("unknown kind {k}"))),
    };
    if header.split(',').ne(expected.iter().map(String::as_str)) {
        return Err(bad(format!("columns `{header}` do not match the {kind} schema for {task}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<String> = line.split(',').map(str::to_string).collect();
        if cells.len() != expected.len() {
            return Err(bad(format!("row {} has {} columns, expected {}", i + 1, cells.len(), expected.len())));
        }
        rows.push(cells);
    }
    Ok(Table { task, kind, rows })
}

struct Cursor1<'a> {
    cells: &'a [String],
    at: usize,
    row: usize,
}

impl<'a> Cursor1<'a> {
    fn new(cells: &'a [String], row: usize) -> Self {
        Cursor1 { cells, at: 0, row }
    }

    fn text(&mut self) -> &'a str {
        let s = &self.cells[self.at];
        self.at += 1;
        s
    }

    fn parse<T: std::str::FromStr>(&mut self) -> CliResult<T> {
        let row = self.row;
        let s = self.text();
        s.parse().map_err(|_| bad(format!("row {row}: cannot parse `{s}`")))
    }

    fn floats(&mut self, n: usize) -> CliResult<Vec<f64>> {
        (0..n).map(|_| self.parse()).collect()
    }

    fn action(&mut self, task: TaskId) -> CliResult<Action> {
        Ok(match task {
            TaskId::Firefly1d => {
                let row = self.row;
                let s = self.text();
                let a = DiscreteAction::ALL
                    .into_iter()
                    .find(|a| a.name() == s)
                    .ok_or_else(|| bad(format!("row {row}: unknown action `{s}`")))?;
                Action::Discrete(a)
            }
            TaskId::Firefly2d => {
                let (v, w) = (self.parse()?, self.parse()?);
                Action::Continuous(ContinuousAction { v, w })
            }
        })
    }
}

/// Group consecutive rows by `(agent, trajectory)`, checking that `t` counts up from 0.
fn blocks(rows: &[Vec<String>]) -> CliResult<Vec<(usize, usize, std::ops::Range<usize>)>> {
    let mut out: Vec<(usize, usize, std::ops::Range<usize>)> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let mut c = Cursor1::new(r, i + 1);
        let key: (usize, usize) = (c.parse()?, c.parse()?);
        match out.last_mut() {
            Some((a, t, range)) if (*a, *t) == key => range.end = i + 1,
            _ => {
                if out.iter().any(|(a, t, _)| (*a, *t) == key) {
                    return Err(bad(format!("row {}: trajectory {key:?} is split", i + 1)));
                }
                out.push((key.0, key.1, i..i + 1));
            }
        }
    }
    Ok(out)
}

fn check_step(t: usize, want: usize, row: usize) -> CliResult<()> {
    if t != want {
        return Err(bad(format!("row {row}: step {t}, expected {want}")));
    }
    Ok(())
}

pub fn read_observed_text(text: &str) -> CliResult<(TaskId, Vec<ObservedRecord>)> {
    let table = parse_table(text)?;
    if table.kind != "observed" {
        return Err(bad(format!("expected observed data, found {}", table.kind)));
    }
    let task = table.task;
    let sd = task.state_dim();
    let mut out = Vec::new();
    for (agent, index, range) in blocks(&table.rows)? {
        let mut states = Vec::new();
        let mut actions = Vec::new();
        for (k, i) in range.enumerate() {
            let mut c = Cursor1::new(&table.rows[i], i + 1);
            c.at = 2;
            check_step(c.parse()?, k, i + 1)?;
            let s = c.floats(sd)?;
            if let Some(prev) = states.last() {
                if prev != &s {
                    return Err(bad(format!("row {}: state does not continue the previous step", i + 1)));
                }
                states.pop();
            }
            states.push(s);
            actions.push(c.action(task)?);
            states.push(c.floats(sd)?);
        }
        let trajectory = ObservedTrajectory { states, actions };
        trajectory.validate(task)?;
        out.push(ObservedRecord { agent, index, trajectory });
    }
    Ok((task, out))
}

pub fn read_full_text(text: &str) -> CliResult<(TaskId, Vec<FullRecord>)> {
    let table = parse_table(text)?;
    if table.kind != "full" {
        return Err(bad(format!("expected full records, found {}", table.kind)));
    }
    let task = table.task;
    let sd = task.state_dim();
    let mut out = Vec::new();
    for (agent, index, range) in blocks(&table.rows)? {
        let mut steps = Vec::new();
        let mut beliefs = Vec::new();
        let mut seed = 0;
        let mut reading = Vec::new();
        for (k, i) in range.enumerate() {
            let mut c = Cursor1::new(&table.rows[i], i + 1);
            c.at = 2;
            seed = c.parse()?;
            check_step(c.parse()?, k, i + 1)?;
            reading = c.floats(reading_len(task))?;
            let state = c.floats(sd)?;
            let action = c.action(task)?;
            let reward = c.parse()?;
            let done = c.parse::<u8>()? != 0;
            let next_state = c.floats(sd)?;
            let observation = match task {
                TaskId::Firefly2d => Some(c.floats(2)?),
                TaskId::Firefly1d => None,
            };
            let mean = c.floats(sd)?;
            let mut cov = vec![0.0; sd * sd];
            for a in 0..sd {
                for b in a..sd {
                    let v = c.parse()?;
                    cov[a * sd + b] = v;
                    cov[b * sd + a] = v;
                }
            }
            beliefs.push(GaussianBelief { mean, cov });
            steps.push(StepRecord { t: k, state, action, reward, done, next_state, observation });
        }
        let trajectory = Trajectory { task, theta: None, seed, initial_reading: reading, steps };
        out.push(FullRecord { agent, index, trajectory, beliefs: BeliefTrajectory(beliefs) });
    }
    Ok((task, out))
}

pub fn write_observed_binary(task: TaskId, records: &[ObservedRecord]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(BINARY_MAGIC);
    b.write_u32::<LittleEndian>(BINARY_VERSION).unwrap();
    b.write_u8(match task {
        TaskId::Firefly1d => 1,
        TaskId::Firefly2d => 2,
    })
    .unwrap();
    b.write_u32::<LittleEndian>(records.len() as u32).unwrap();
    for r in records {
        b.write_u32::<LittleEndian>(r.agent as u32).unwrap();
        b.write_u32::<LittleEndian>(r.index as u32).unwrap();
        b.write_u32::<LittleEndian>(r.trajectory.len() as u32).unwrap();
        for s in &r.trajectory.states {
            s.iter().for_each(|x| b.write_f64::<LittleEndian>(*x).unwrap());
        }
        for a in &r.trajectory.actions {
            a.to_vec().iter().for_each(|x| b.write_f64::<LittleEndian>(*x).unwrap());
        }
    }
    b
}

pub fn read_observed_binary(bytes: &[u8]) -> CliResult<(TaskId, Vec<ObservedRecord>)> {
    let short = |_| bad("binary data ends early");
    let mut c = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    c.read_exact(&mut magic).map_err(short)?;
    if &magic != BINARY_MAGIC {
        return Err(bad("not a binary trajectory file"));
    }
    let version = c.read_u32::<LittleEndian>().map_err(short)?;
    if version != BINARY_VERSION {
        return Err(bad(format!("unsupported binary version {version}")));
    }
    let task = match c.read_u8().map_err(short)? {
        1 => TaskId::Firefly1d,
        2 => TaskId::Firefly2d,
        t => return Err(bad(format!("unknown task code {t}"))),
    };
    let n = c.read_u32::<LittleEndian>().map_err(short)? as usize;
    let sd = task.state_dim();
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let agent = c.read_u32::<LittleEndian>().map_err(short)? as usize;
        let index = c.read_u32::<LittleEndian>().map_err(short)? as usize;
        let len = c.read_u32::<LittleEndian>().map_err(short)? as usize;
        let mut f = || c.read_f64::<LittleEndian>().map_err(short);
        let mut states = Vec::with_capacity(len + 1);
        for _ in 0..=len {
            states.push((0..sd).map(|_| f()).collect::<CliResult<Vec<f64>>>()?);
        }
        let mut actions = Vec::with_capacity(len);
        for _ in 0..len {
            actions.push(match task {
                TaskId::Firefly1d => {
                    let i = f()?;
                    Action::Discrete(DiscreteAction::from_index(i as usize).filter(|_| i.fract() == 0.0).ok_or_else(|| bad(format!("bad action code {i}")))?)
                }
                TaskId::Firefly2d => Action::Continuous(ContinuousAction { v: f()?, w: f()? }),
            });
        }
        let trajectory = ObservedTrajectory { states, actions };
        trajectory.validate(task)?;
        out.push(ObservedRecord { agent, index, trajectory });
    }
    if (c.position() as usize) != bytes.len() {
        return Err(bad("trailing bytes after the last trajectory"));
    }
    Ok((task, out))
}

/// Read observed data, binary when the file starts with the binary magic.
pub fn read_observed(path: &Path) -> CliResult<(TaskId, Vec<ObservedRecord>)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(BINARY_MAGIC) {
        read_observed_binary(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| bad("not UTF-8 text"))?;
        read_observed_text(&text)
    }
}

/// Strip full records down to what the observer is allowed to see.
pub fn observe_records(full: &[FullRecord]) -> Vec<ObservedRecord> {
    full.iter()
        .map(|r| ObservedRecord { agent: r.agent, index: r.index, trajectory: ObservedTrajectory::from_trajectory(&r.trajectory) })
        .collect()
}

/// Per-agent datasets in order of first appearance.
pub fn group_by_agent(task: &TaskConfig, records: &[ObservedRecord]) -> CliResult<Vec<(usize, ObservedDataset)>> {
    let mut ids: Vec<usize> = Vec::new();
    for r in records {
        if !ids.contains(&r.agent) {
            ids.push(r.agent);
        }
    }
    ids.into_iter()
        .map(|id| {
            let trajs = records.iter().filter(|r| r.agent == id).map(|r| r.trajectory.clone()).collect();
            Ok((id, ObservedDataset::new(task.clone(), trajs)?))
        })
        .collect()
}

/// `agent,<dim names...>` with one row per simulated agent.
pub fn write_agents(space: &ParamSpace, agents: &[ParamPoint]) -> String {
    let mut out = String::from("agent");
    for d in &space.dims {
        out.push(',');
        out.push_str(&d.name);
    }
    out.push('\n');
    for (i, p) in agents.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", p.0.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
    }
    out
}

pub fn read_agents(text: &str, space: &ParamSpace) -> CliResult<Vec<(usize, ParamPoint)>> {
    let mut lines = text.lines();
    let want = std::iter::once("agent".to_string()).chain(space.dims.iter().map(|d| d.name.clone())).collect::<Vec<_>>().join(",");
    if lines.next() != Some(want.as_str()) {
        return Err(CliError::usage(format!("agents file: header must be `{want}`")));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let cells: Vec<&str> = l.split(',').collect();
            let parse_err = || CliError::usage(format!("agents file: row {} is malformed", i + 1));
            if cells.len() != space.len() + 1 {
                return Err(parse_err());
            }
            let id = cells[0].parse().map_err(|_| parse_err())?;
            let p = cells[1..].iter().map(|c| c.parse().map_err(|_| parse_err())).collect::<CliResult<Vec<f64>>>()?;
            Ok((id, ParamPoint(p)))
        })
        .collect()
}
