//! Language-annotated offline trajectories, reward labels and batching.
//!
//! On disk a dataset is a directory:
//!
//! ```text
//! manifest.json        {schema_version, count, ids, env_config, generator_seed}
//! trajectories.jsonl   one trajectory per line
//! labels/<source>.jsonl  one RewardLabelSet per line
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, EnvConfig, GridState};

pub const SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const TRAJECTORIES: &str = "trajectories.jsonl";
const LABELS_DIR: &str = "labels";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("schema version mismatch: found {found}, expected {expected}")]
    SchemaVersion { found: String, expected: u32 },
    #[error("{path}:{line}: {message}")]
    Line { path: PathBuf, line: usize, message: String },
    #[error("duplicate trajectory id {0:?}")]
    DuplicateId(String),
    #[error("manifest lists {manifest} trajectories but {found} were read")]
    CountMismatch { manifest: usize, found: usize },
    #[error("no reward labels for trajectory {0:?}")]
    MissingLabels(String),
    #[error("labels given for unknown trajectory {0:?}")]
    UnknownTrajectory(String),
    #[error("trajectory {id:?} has {transitions} transitions but {rewards} rewards")]
    LengthMismatch { id: String, transitions: usize, rewards: usize },
    #[error("invalid trajectory {id:?}: {message}")]
    InvalidTrajectory { id: String, message: String },
    #[error("invalid reward labels for {id:?}: {message}")]
    InvalidLabels { id: String, message: String },
    #[error("cannot sample from an empty dataset")]
    Empty,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// A natural-language instruction. Several paraphrases may share a `task_id`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub task_id: String,
}

/// Borrowed view of one `(s_t, a_t, s_{t+1})` step.
#[derive(Debug, Clone, Copy)]
pub struct Transition<'a> {
    pub state: &'a GridState,
    pub action: Action,
    pub next_state: &'a GridState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    /// Task-generation seed: together with the manifest's env config and
    /// `num_subtasks` it regenerates the task.
    pub seed: u64,
    pub num_subtasks: usize,
    pub suboptimality: f64,
}

/// States `s_0..s_T`, actions `a_0..a_{T-1}` and the instruction that the
/// trajectory completes. Storing states once makes `next_state(t) ==
/// state(t+1)` hold by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub instruction: Instruction,
    pub states: Vec<GridState>,
    pub actions: Vec<Action>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn transition(&self, t: usize) -> Transition<'_> {
        Transition { state: &self.states[t], action: self.actions[t], next_state: &self.states[t + 1] }
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition<'_>> + '_ {
        (0..self.len()).map(move |t| self.transition(t))
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |message: String| DatasetError::InvalidTrajectory { id: self.id.clone(), message };
        if self.actions.is_empty() {
            return Err(bad("no transitions".into()));
        }
        if self.states.len() != self.actions.len() + 1 {
            return Err(bad(format!(
                "{} states for {} actions",
                self.states.len(),
                self.actions.len()
            )));
        }
        if self.instruction.text.trim().is_empty() {
            return Err(bad("empty instruction".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Sparse,
    Oracle,
    Lvlm,
    FrameSim,
    SeqSim,
    Combined,
}

impl LabelSource {
    pub const ALL: [LabelSource; 6] = [
        LabelSource::Sparse,
        LabelSource::Oracle,
        LabelSource::Lvlm,
        LabelSource::FrameSim,
        LabelSource::SeqSim,
        LabelSource::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LabelSource::Sparse => "sparse",
            LabelSource::Oracle => "oracle",
            LabelSource::Lvlm => "lvlm",
            LabelSource::FrameSim => "frame_sim",
            LabelSource::SeqSim => "seq_sim",
            LabelSource::Combined => "combined",
        }
    }
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        LabelSource::ALL.into_iter().find(|l| l.name() == s).ok_or_else(|| {
            let names: Vec<_> = LabelSource::ALL.iter().map(|l| l.name()).collect();
            format!("unknown label source {s:?} (expected one of {})", names.join(", "))
        })
    }
}

/// Per-transition rewards for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLabelSet {
    pub trajectory_id: String,
    pub source: LabelSource,
    pub rewards: Vec<f64>,
}

impl RewardLabelSet {
    /// Every source except `combined` must stay within [0, 1]; combined
    /// labels add a non-negative terminal bonus.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |message: String| DatasetError::InvalidLabels { id: self.trajectory_id.clone(), message };
        for (i, &r) in self.rewards.iter().enumerate() {
            if !r.is_finite() || r < 0.0 {
                return Err(bad(format!("reward {i} = {r}")));
            }
            if self.source != LabelSource::Combined && r > 1.0 {
                return Err(bad(format!("reward {i} = {r} exceeds 1 for source {}", self.source)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub count: usize,
    pub ids: Vec<String>,
    pub env_config: EnvConfig,
    pub generator_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub trajectories: Vec<Trajectory>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Writes `manifest.json` and `trajectories.jsonl`. Output bytes depend only
/// on the inputs.
pub fn write_dataset(
    trajectories: &[Trajectory],
    dir: &Path,
    env_config: &EnvConfig,
    generator_seed: u64,
) -> Result<(), DatasetError> {
    let mut seen = HashSet::new();
    for t in trajectories {
        if !seen.insert(t.id.as_str()) {
            return Err(DatasetError::DuplicateId(t.id.clone()));
        }
        t.validate()?;
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let mut lines = Vec::new();
    for t in trajectories {
        serde_json::to_writer(&mut lines, t).expect("trajectory serializes");
        lines.push(b'\n');
    }
    write_atomic(&dir.join(TRAJECTORIES), &lines)?;

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        count: trajectories.len(),
        ids: trajectories.iter().map(|t| t.id.clone()).collect(),
        env_config: env_config.clone(),
        generator_seed,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    write_atomic(&dir.join(MANIFEST), &bytes)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DatasetError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| DatasetError::Manifest { path: path.clone(), message: e.to_string() })?;
    match value.get("schema_version") {
        Some(v) if v.as_u64() == Some(SCHEMA_VERSION as u64) => {}
        Some(v) => {
            let found = v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string());
            return Err(DatasetError::SchemaVersion { found, expected: SCHEMA_VERSION });
        }
        None => {
            return Err(DatasetError::Manifest { path, message: "missing schema_version".into() });
        }
    }
    serde_json::from_value(value).map_err(|e| DatasetError::Manifest { path, message: e.to_string() })
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| DatasetError::Line {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest = read_manifest(dir)?;
    let trajectories: Vec<Trajectory> = read_jsonl(&dir.join(TRAJECTORIES))?;
    if trajectories.len() != manifest.count {
        return Err(DatasetError::CountMismatch { manifest: manifest.count, found: trajectories.len() });
    }
    let mut seen = HashSet::new();
    for t in &trajectories {
        if !seen.insert(t.id.as_str()) {
            return Err(DatasetError::DuplicateId(t.id.clone()));
        }
        t.validate()?;
    }
    Ok(Dataset { manifest, trajectories })
}

pub fn labels_path(dir: &Path, source: LabelSource) -> PathBuf {
    dir.join(LABELS_DIR).join(format!("{}.jsonl", source.name()))
}

/// Overwrites `labels/<source>.jsonl`.
pub fn write_labels(dir: &Path, source: LabelSource, labels: &[RewardLabelSet]) -> Result<(), DatasetError> {
    let path = labels_path(dir, source);
    let parent = path.parent().expect("labels path has a parent");
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let mut bytes = Vec::new();
    for l in labels {
        l.validate()?;
        serde_json::to_writer(&mut bytes, l).expect("labels serialize");
        bytes.push(b'\n');
    }
    write_atomic(&path, &bytes)
}

/// Appends one record and flushes, so an interrupted labeling run keeps
/// every completed trajectory.
pub fn append_labels(dir: &Path, label: &RewardLabelSet) -> Result<(), DatasetError> {
    label.validate()?;
    let path = labels_path(dir, label.source);
    let parent = path.parent().expect("labels path has a parent");
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let file = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, label).expect("labels serialize");
    w.write_all(b"\n").map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))
}

pub fn read_labels(dir: &Path, source: LabelSource) -> Result<Vec<RewardLabelSet>, DatasetError> {
    let path = labels_path(dir, source);
    let labels: Vec<RewardLabelSet> = read_jsonl(&path)?;
    for l in &labels {
        l.validate()?;
    }
    Ok(labels)
}

/// Trajectories paired with one reward per transition. Immutable once built.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub source: LabelSource,
    trajectories: Vec<Trajectory>,
    rewards: Vec<Vec<f64>>,
    /// `(trajectory index, step)` for every transition, in dataset order.
    index: Vec<(u32, u32)>,
}

/// One labeled transition.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSample<'a> {
    pub trajectory: &'a Trajectory,
    pub step: usize,
    pub transition: Transition<'a>,
    pub reward: f64,
    /// True on the final transition, where the instruction is complete.
    pub done: bool,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn rewards(&self, trajectory: usize) -> &[f64] {
        &self.rewards[trajectory]
    }

    pub fn sample(&self, i: usize) -> LabeledSample<'_> {
        let (ti, t) = self.index[i];
        let traj = &self.trajectories[ti as usize];
        let t = t as usize;
        LabeledSample {
            trajectory: traj,
            step: t,
            transition: traj.transition(t),
            reward: self.rewards[ti as usize][t],
            done: t + 1 == traj.len(),
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = LabeledSample<'_>> + '_ {
        (0..self.len()).map(move |i| self.sample(i))
    }
}

/// Pairs each trajectory with exactly one label set of matching length.
pub fn attach_labels(
    trajectories: &[Trajectory],
    labels: &[RewardLabelSet],
) -> Result<LabeledDataset, DatasetError> {
    let ids: HashSet<&str> = trajectories.iter().map(|t| t.id.as_str()).collect();
    let mut by_id: HashMap<&str, &RewardLabelSet> = HashMap::new();
    let mut source = None;
    for l in labels {
        if !ids.contains(l.trajectory_id.as_str()) {
            return Err(DatasetError::UnknownTrajectory(l.trajectory_id.clone()));
        }
        if by_id.insert(l.trajectory_id.as_str(), l).is_some() {
            return Err(DatasetError::InvalidLabels {
                id: l.trajectory_id.clone(),
                message: "more than one label set".into(),
            });
        }
        if *source.get_or_insert(l.source) != l.source {
            return Err(DatasetError::InvalidLabels {
                id: l.trajectory_id.clone(),
                message: format!("mixed label sources {} and {}", source.unwrap(), l.source),
            });
        }
        l.validate()?;
    }

    let mut rewards = Vec::with_capacity(trajectories.len());
    let mut index = Vec::new();
    for (ti, t) in trajectories.iter().enumerate() {
        let l = by_id.get(t.id.as_str()).ok_or_else(|| DatasetError::MissingLabels(t.id.clone()))?;
        if l.rewards.len() != t.len() {
            return Err(DatasetError::LengthMismatch {
                id: t.id.clone(),
                transitions: t.len(),
                rewards: l.rewards.len(),
            });
        }
        rewards.push(l.rewards.clone());
        index.extend((0..t.len()).map(|s| (ti as u32, s as u32)));
    }
    Ok(LabeledDataset {
        source: source.unwrap_or(LabelSource::Sparse),
        trajectories: trajectories.to_vec(),
        rewards,
        index,
    })
}

/// Turns symbolic states and instruction text into network inputs. State
/// features may be expressed relative to what the instruction asks for;
/// instruction features depend on the text alone.
pub trait FeatureEncoder {
    fn state_dim(&self) -> usize;
    fn instruction_dim(&self) -> usize;
    fn encode_state(&self, state: &GridState, instruction: &str, out: &mut Vec<f32>);
    fn encode_instruction(&self, text: &str, out: &mut Vec<f32>);
}

/// Parallel arrays for one training batch; every array has `len` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub len: usize,
    pub state_dim: usize,
    pub instruction_dim: usize,
    pub states: Vec<f32>,
    pub actions: Vec<usize>,
    pub next_states: Vec<f32>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
    pub instructions: Vec<f32>,
}

impl TransitionBatch {
    pub fn gather(labeled: &LabeledDataset, indices: &[usize], encoder: &dyn FeatureEncoder) -> Self {
        let mut b = TransitionBatch {
            len: indices.len(),
            state_dim: encoder.state_dim(),
            instruction_dim: encoder.instruction_dim(),
            states: Vec::with_capacity(indices.len() * encoder.state_dim()),
            actions: Vec::with_capacity(indices.len()),
            next_states: Vec::with_capacity(indices.len() * encoder.state_dim()),
            rewards: Vec::with_capacity(indices.len()),
            dones: Vec::with_capacity(indices.len()),
            instructions: Vec::with_capacity(indices.len() * encoder.instruction_dim()),
        };
        for &i in indices {
            let s = labeled.sample(i);
            let text = &s.trajectory.instruction.text;
            encoder.encode_state(s.transition.state, text, &mut b.states);
            encoder.encode_state(s.transition.next_state, text, &mut b.next_states);
            encoder.encode_instruction(&s.trajectory.instruction.text, &mut b.instructions);
            b.actions.push(s.transition.action.id());
            b.rewards.push(s.reward as f32);
            b.dones.push(s.done);
        }
        b
    }
}

/// `n` uniform draws with replacement.
pub fn sample_indices<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Result<Vec<usize>, DatasetError> {
    if len == 0 {
        return Err(DatasetError::Empty);
    }
    Ok((0..n).map(|_| rng.random_range(0..len)).collect())
}

pub fn sample_batch<R: Rng + ?Sized>(
    labeled: &LabeledDataset,
    n: usize,
    encoder: &dyn FeatureEncoder,
    rng: &mut R,
) -> Result<TransitionBatch, DatasetError> {
    let idx = sample_indices(labeled.len(), n, rng)?;
    Ok(TransitionBatch::gather(labeled, &idx, encoder))
}
