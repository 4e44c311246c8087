//! Held-out rollouts, completion statistics and method comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Instruction;
use crate::env::{
    plan_action, reset, sample_task, step, Action, EnvConfig, EnvError, GridState,
    InitMode, TaskSplit, TaskSpec, MAX_SUBTASKS,
};
use crate::iql::{ActMode, PolicyArtifact};
use crate::seed::{self, Rng as SeedRng};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("mean completion under fixed init is 0 for {method:?}; the drop is undefined")]
    ZeroFixedMean { method: String },
    #[error("compare needs at least 2 reports, got {0}")]
    TooFewReports(usize),
    #[error("baseline {baseline:?} not found; available methods: {}", available.join(", "))]
    UnknownBaseline { baseline: String, available: Vec<String> },
    #[error("{method:?} covers lengths {found:?} but {expected_from:?} covers {expected:?}")]
    LengthCoverage { method: String, found: Vec<usize>, expected_from: String, expected: Vec<usize> },
    #[error("{method:?} has no rows for init mode {mode}")]
    MissingInitMode { method: String, mode: &'static str },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error in {path}: {message}")]
    Csv { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub task_lengths: Vec<usize>,
    pub tasks_per_length: usize,
    pub episodes_per_task: usize,
    /// `None` means `4 * (width + height) * task_length`.
    pub max_steps: Option<usize>,
    pub init_mode: InitMode,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            task_lengths: (1..=MAX_SUBTASKS).collect(),
            tasks_per_length: 17,
            episodes_per_task: 1,
            max_steps: None,
            init_mode: InitMode::Fixed,
            seeds: (0..5).collect(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Config(m));
        if self.task_lengths.is_empty() {
            return bad("task_lengths must not be empty".into());
        }
        if let Some(&l) = self.task_lengths.iter().find(|&&l| !(1..=MAX_SUBTASKS).contains(&l)) {
            return bad(format!("task length {l} outside 1..={MAX_SUBTASKS}"));
        }
        if self.tasks_per_length == 0 || self.episodes_per_task == 0 {
            return bad("tasks_per_length and episodes_per_task must be >= 1".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        Ok(())
    }

    pub fn max_steps_for(&self, env: &EnvConfig, length: usize) -> usize {
        self.max_steps.unwrap_or(4 * (env.width + env.height) as usize * length)
    }
}

/// Anything that picks actions from the observable state.
pub trait Policy: Sync {
    fn act(&self, state: &GridState, task: &TaskSpec, instruction: &Instruction, rng: &mut SeedRng) -> Action;
}

impl Policy for PolicyArtifact {
    fn act(&self, state: &GridState, _task: &TaskSpec, instruction: &Instruction, rng: &mut SeedRng) -> Action {
        PolicyArtifact::act(self, state, instruction, ActMode::Greedy, rng)
    }
}

/// The shortest-path planner; reads the task, so it is an upper bound.
pub struct ScriptedPolicy;

impl Policy for ScriptedPolicy {
    fn act(&self, state: &GridState, task: &TaskSpec, _instruction: &Instruction, _rng: &mut SeedRng) -> Action {
        plan_action(task, state).unwrap_or(Action::Up)
    }
}

pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn act(&self, _state: &GridState, _task: &TaskSpec, _instruction: &Instruction, rng: &mut SeedRng) -> Action {
        Action::ALL[rng.random_range(0..Action::COUNT)]
    }
}

/// Completed sub-tasks over total at the end of the trace (0 for an empty trace).
pub fn completion_fraction(task: &TaskSpec, trace: &[GridState]) -> f64 {
    match trace.last() {
        Some(s) if !task.is_empty() => (s.completed as usize).min(task.len()) as f64 / task.len() as f64,
        _ => 0.0,
    }
}

/// The held-out task for `(length, index)` and its instruction. Shared by
/// every method and seed, so comparisons see identical tasks.
pub fn eval_task(env: &EnvConfig, length: usize, index: usize) -> Result<(TaskSpec, Instruction), EnvError> {
    let (_, task, instruction) = sample_task(env, TaskSplit::Eval, length, index)?;
    Ok((task, instruction))
}

/// Runs one episode and returns the visited states, starting with the reset state.
pub fn rollout(
    policy: &dyn Policy,
    task: &TaskSpec,
    instruction: &Instruction,
    mode: InitMode,
    max_steps: usize,
    rng: &mut SeedRng,
) -> Vec<GridState> {
    let mut trace = vec![reset(task, mode, rng)];
    for _ in 0..max_steps {
        let state = trace.last().expect("non-empty trace");
        let action = policy.act(state, task, instruction, rng);
        let out = step(state, task, action);
        let done = out.done;
        trace.push(out.next_state);
        if done {
            break;
        }
    }
    trace
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub seed: u64,
    pub task_length: usize,
    pub init_mode: InitMode,
    pub mean_completion: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

/// Evaluates one policy (trained with `seed`) under `cfg.init_mode`. Episode
/// randomness depends only on the task and episode index, so every method
/// and seed faces the same start states.
pub fn evaluate(
    policy: &dyn Policy,
    method: &str,
    seed: u64,
    env: &EnvConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let mut tasks = Vec::new();
    for &length in &cfg.task_lengths {
        for index in 0..cfg.tasks_per_length {
            tasks.push((length, index, eval_task(env, length, index)?));
        }
    }
    let jobs: Vec<(usize, usize)> =
        (0..tasks.len()).flat_map(|t| (0..cfg.episodes_per_task).map(move |e| (t, e))).collect();
    let mode_salt = match cfg.init_mode {
        InitMode::Fixed => 0,
        InitMode::Randomized => 1,
    };
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(t, e)| {
            let (length, index, (task, instruction)) = &tasks[t];
            let mut rng = seed::rng(seed::derive(
                env.seed,
                &[0x6570_6973, *length as u64, *index as u64, e as u64, mode_salt],
            ));
            let trace = rollout(policy, task, instruction, cfg.init_mode, cfg.max_steps_for(env, *length), &mut rng);
            completion_fraction(task, &trace)
        })
        .collect();

    // sequential sums in job order keep the result independent of scheduling
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&(t, _), &score) in jobs.iter().zip(&scores) {
        let e = sums.entry(tasks[t].0).or_default();
        e.0 += score;
        e.1 += 1;
    }
    let rows = cfg
        .task_lengths
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|l| {
            let (sum, n) = sums[l];
            EvalRow {
                method: method.to_string(),
                seed,
                task_length: *l,
                init_mode: cfg.init_mode,
                mean_completion: sum / n as f64,
                episodes: n,
            }
        })
        .collect();
    Ok(EvalReport { rows })
}

impl EvalReport {
    pub fn merge(reports: impl IntoIterator<Item = EvalReport>) -> EvalReport {
        let mut rows: Vec<EvalRow> = reports.into_iter().flat_map(|r| r.rows).collect();
        rows.sort_by(|a, b| {
            (&a.method, a.init_mode, a.task_length, a.seed).cmp(&(&b.method, b.init_mode, b.task_length, b.seed))
        });
        EvalReport { rows }
    }

    pub fn methods(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.method.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn lengths(&self, method: &str, mode: InitMode) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.init_mode == mode)
            .map(|r| r.task_length)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Per-length means across seeds for one method and init mode.
    pub fn length_means(&self, method: &str, mode: InitMode) -> BTreeMap<usize, f64> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.method == method && r.init_mode == mode) {
            let e = acc.entry(r.task_length).or_default();
            e.0 += r.mean_completion;
            e.1 += 1;
        }
        acc.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect()
    }

    /// Mean over lengths (each length weighted equally) of the seed means.
    pub fn overall_mean(&self, method: &str, mode: InitMode) -> Option<f64> {
        let m = self.length_means(method, mode);
        (!m.is_empty()).then(|| m.values().sum::<f64>() / m.len() as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let csv_err = |e: csv::Error| EvalError::Csv { path: path.display().to_string(), message: e.to_string() };
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        if self.rows.is_empty() {
            w.write_record(["method", "seed", "task_length", "init_mode", "mean_completion", "episodes"])
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Csv {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        fs::write(path, bytes).map_err(|source| EvalError::Io { path: path.display().to_string(), source })
    }

    pub fn read_csv(path: &Path) -> Result<EvalReport, EvalError> {
        let csv_err = |e: csv::Error| EvalError::Csv { path: path.display().to_string(), message: e.to_string() };
        let file = fs::File::open(path).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
        let rows = csv::Reader::from_reader(file).into_deserialize().collect::<Result<Vec<EvalRow>, _>>().map_err(csv_err)?;
        Ok(EvalReport { rows })
    }
}

pub fn export_csv(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    report.write_csv(path)
}

/// `(mean_fixed - mean_random) / mean_fixed` over all lengths of `method`.
pub fn generalization_drop(fixed: &EvalReport, random: &EvalReport, method: &str) -> Result<f64, EvalError> {
    let missing = |mode| EvalError::MissingInitMode { method: method.to_string(), mode };
    let lf = fixed.lengths(method, InitMode::Fixed);
    let lr = random.lengths(method, InitMode::Randomized);
    if lf.is_empty() {
        return Err(missing("fixed"));
    }
    if lr.is_empty() {
        return Err(missing("randomized"));
    }
    if lf != lr {
        return Err(EvalError::LengthCoverage {
            method: format!("{method} (randomized)"),
            found: lr,
            expected_from: format!("{method} (fixed)"),
            expected: lf,
        });
    }
    let mf = fixed.overall_mean(method, InitMode::Fixed).expect("rows checked");
    let mr = random.overall_mean(method, InitMode::Randomized).expect("rows checked");
    if mf == 0.0 {
        return Err(EvalError::ZeroFixedMean { method: method.to_string() });
    }
    Ok((mf - mr) / mf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub baseline: String,
    /// Per method and length: mean under fixed init divided by the baseline's.
    /// `None` (JSON null) where the baseline mean is 0.
    pub ratios: BTreeMap<String, BTreeMap<usize, Option<f64>>>,
    /// Generalization drop per method that has rows in both init modes.
    pub drops: BTreeMap<String, f64>,
    /// Per method, init mode and length: mean completion across seeds.
    #[serde(skip)]
    pub means: BTreeMap<(String, InitMode), BTreeMap<usize, f64>>,
}

/// Compares every method against `baseline`. Reports are merged first, so a
/// method's fixed and randomized rows may come from different files.
pub fn compare(reports: &[EvalReport], baseline: &str) -> Result<ComparisonTable, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewReports(reports.len()));
    }
    let all = EvalReport::merge(reports.iter().cloned());
    let methods = all.methods();
    if !methods.iter().any(|m| m == baseline) {
        return Err(EvalError::UnknownBaseline { baseline: baseline.to_string(), available: methods });
    }

    let modes: BTreeSet<InitMode> = all.rows.iter().map(|r| r.init_mode).collect();
    let mut means = BTreeMap::new();
    for mode in &modes {
        let expected = all.lengths(baseline, *mode);
        for m in &methods {
            let found = all.lengths(m, *mode);
            if found != expected {
                return Err(EvalError::LengthCoverage {
                    method: format!("{m} ({})", mode.name()),
                    found,
                    expected_from: format!("{baseline} ({})", mode.name()),
                    expected,
                });
            }
            if !found.is_empty() {
                means.insert((m.clone(), *mode), all.length_means(m, *mode));
            }
        }
    }

    let mut ratios = BTreeMap::new();
    if let Some(base) = means.get(&(baseline.to_string(), InitMode::Fixed)) {
        for m in &methods {
            let mine = &means[&(m.clone(), InitMode::Fixed)];
            let r = base.iter().map(|(l, &b)| (*l, (b != 0.0).then(|| mine[l] / b))).collect();
            ratios.insert(m.clone(), r);
        }
    }

    let mut drops = BTreeMap::new();
    if modes.contains(&InitMode::Fixed) && modes.contains(&InitMode::Randomized) {
        for m in &methods {
            drops.insert(m.clone(), generalization_drop(&all, &all, m)?);
        }
    }
    Ok(ComparisonTable { baseline: baseline.to_string(), ratios, drops, means })
}

impl ComparisonTable {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("table serializes");
        s.push('\n');
        s
    }

    /// Long-format CSV of the per-length means behind the table.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut out = String::from("method,init_mode,task_length,mean_completion,ratio_vs_baseline\n");
        for ((m, mode), lens) in &self.means {
            for (l, mean) in lens {
                let ratio = match (mode, self.ratios.get(m).and_then(|r| r.get(l))) {
                    (InitMode::Fixed, Some(Some(r))) => r.to_string(),
                    _ => String::new(),
                };
                out.push_str(&format!("{m},{},{l},{mean},{ratio}\n", mode.name()));
            }
        }
        fs::write(path, out).map_err(|source| EvalError::Io { path: path.display().to_string(), source })
    }

    /// Human-readable summary for the terminal.
    pub fn summary(&self) -> String {
        let mut out = format!("baseline: {}\n", self.baseline);
        for ((m, mode), lens) in &self.means {
            let cells: Vec<String> = lens.iter().map(|(l, v)| format!("L{l}={v:.3}")).collect();
            out.push_str(&format!("{m:>10} {:<10} {}\n", mode.name(), cells.join(" ")));
        }
        for (m, d) in &self.drops {
            out.push_str(&format!("drop {m}: {d:.4}\n"));
        }
        out
    }
}
