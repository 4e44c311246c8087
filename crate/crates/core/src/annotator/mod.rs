//! Dense reward generation by windowed two-stage querying of a
//! vision-language backend.
//!
//! A trajectory is cut into windows of `window_size` transitions. Each
//! window's frames are tiled into one stamped image and sent in a two-turn
//! conversation: first an analysis of the actions against the goal, then a
//! request for one 0..scale_max score per action. Scores are normalized to
//! [0, 1] and stored as per-transition rewards.

mod backend;
mod grid;
mod parse;
mod prompt;

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    query_backend, quantize, stage1_request, stage2_request, AnnotatorBackend, BackendError, BackendResponse,
    CacheEntry, CacheReplayBackend, ChatMessage, ChatRequest, ContentPart, HttpBackend, OracleBackend,
    QueryContext, ResponseCache, Role, Stage, API_KEY_VAR,
};
pub use grid::{compose_tiles, GridImage, GridLayout};
pub use parse::{format_scores, parse_scores, ParseError};
pub use prompt::{build_prompts, PromptBundle, PromptTemplates};

use crate::dataset::{Instruction, LabelSource, RewardLabelSet, Trajectory, Transition};
use crate::env::{render, Action, GridState, RgbImage};

#[derive(Debug, Error)]
pub enum WindowFailure {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Error)]
pub enum AnnotatorError {
    #[error("invalid annotator config: {0}")]
    Config(String),
    #[error("trajectory {0:?} has no transitions")]
    EmptyTrajectory(String),
    #[error("grid layout: {0}")]
    Layout(String),
    #[error("trajectory {id:?}: {rewards} rewards for {transitions} transitions")]
    LengthMismatch { id: String, transitions: usize, rewards: usize },
    #[error("trajectory {trajectory_id:?}, window starting at transition {start_index}: {failure}")]
    Window { trajectory_id: String, start_index: usize, failure: WindowFailure },
}

impl AnnotatorError {
    /// True for failures caused by the backend or its output.
    pub fn is_backend(&self) -> bool {
        matches!(self, AnnotatorError::Window { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotatorConfig {
    pub window_size: usize,
    pub scale_max: u32,
    pub max_retries: usize,
    /// Initial retry delay; doubles on every further attempt.
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub concurrency_limit: usize,
    pub sparse_bonus: f64,
    pub cache_dir: Option<PathBuf>,
    pub model: String,
    pub temperature: f64,
    /// Pixels per grid cell in the frames sent to the backend.
    pub cell_px: u32,
    pub layout: GridLayout,
    pub prompts: PromptTemplates,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        AnnotatorConfig {
            window_size: 8,
            scale_max: 10,
            max_retries: 3,
            backoff_ms: 500,
            timeout_secs: 120,
            concurrency_limit: 4,
            sparse_bonus: 1.0,
            cache_dir: None,
            model: "default".into(),
            temperature: 0.0,
            cell_px: 8,
            layout: GridLayout::default(),
            prompts: PromptTemplates::default(),
        }
    }
}

impl AnnotatorConfig {
    pub fn validate(&self) -> Result<(), AnnotatorError> {
        let bad = |m: String| Err(AnnotatorError::Config(m));
        if self.window_size == 0 {
            return bad("window_size must be >= 1".into());
        }
        if self.scale_max == 0 {
            return bad("scale_max must be >= 1".into());
        }
        if self.concurrency_limit == 0 {
            return bad("concurrency_limit must be >= 1".into());
        }
        if !(self.sparse_bonus >= 0.0 && self.sparse_bonus.is_finite()) {
            return bad(format!("sparse_bonus must be >= 0, got {}", self.sparse_bonus));
        }
        if self.cell_px == 0 || !self.cell_px.is_multiple_of(8) {
            return bad(format!("cell_px must be a positive multiple of 8, got {}", self.cell_px));
        }
        if self.layout.columns == 0 || self.window_size + 1 > self.layout.capacity() {
            return bad(format!(
                "a window of {} transitions needs {} frames but the layout holds {}",
                self.window_size,
                self.window_size + 1,
                self.layout.capacity()
            ));
        }
        Ok(())
    }
}

/// A contiguous block of transitions: `states` holds `actions.len() + 1`
/// observations, the last being the final next-state.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub trajectory_id: String,
    pub start_index: usize,
    pub states: Vec<GridState>,
    pub actions: Vec<Action>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition<'_>> + '_ {
        self.actions.iter().enumerate().map(move |(i, &action)| Transition {
            state: &self.states[i],
            action,
            next_state: &self.states[i + 1],
        })
    }

    pub fn observations(&self, cell_px: u32) -> Vec<RgbImage> {
        self.states.iter().map(|s| render(s, cell_px)).collect()
    }
}

/// Splits a trajectory into windows of `w` transitions; the last window
/// keeps the remainder unpadded.
pub fn partition_windows(trajectory: &Trajectory, w: usize) -> Result<Vec<Window>, AnnotatorError> {
    if w == 0 {
        return Err(AnnotatorError::Config("window size must be >= 1".into()));
    }
    if trajectory.is_empty() {
        return Err(AnnotatorError::EmptyTrajectory(trajectory.id.clone()));
    }
    Ok((0..trajectory.len())
        .step_by(w)
        .map(|start| {
            let end = (start + w).min(trajectory.len());
            Window {
                trajectory_id: trajectory.id.clone(),
                start_index: start,
                states: trajectory.states[start..=end].to_vec(),
                actions: trajectory.actions[start..end].to_vec(),
            }
        })
        .collect())
}

pub fn compose_grid(window: &Window, cfg: &AnnotatorConfig) -> Result<GridImage, AnnotatorError> {
    compose_tiles(&window.observations(cfg.cell_px), &cfg.layout)
}

pub fn normalize(scores: &[u32], scale_max: u32) -> Vec<f64> {
    scores.iter().map(|&s| s as f64 / scale_max as f64).collect()
}

fn annotate_window(
    backend: &dyn AnnotatorBackend,
    window: &Window,
    goal: &Instruction,
    cfg: &AnnotatorConfig,
    cache: Option<&ResponseCache>,
) -> Result<Vec<f64>, AnnotatorError> {
    let grid = compose_grid(window, cfg)?;
    let bundle = build_prompts(window, grid, goal, &cfg.prompts, cfg.scale_max);
    let wrap = |failure: WindowFailure| AnnotatorError::Window {
        trajectory_id: window.trajectory_id.clone(),
        start_index: window.start_index,
        failure,
    };
    let response = query_backend(backend, window, &bundle, cfg, cache).map_err(|e| wrap(e.into()))?;
    let scores = parse_scores(&response.stage2_text, bundle.expected_scores, cfg.scale_max)
        .map_err(|e| wrap(e.into()))?;
    Ok(normalize(&scores, cfg.scale_max))
}

/// Labels every transition of `trajectory`. Up to `concurrency_limit`
/// windows are in flight at once; rewards stay in temporal order and the
/// earliest failing window determines the reported error. No further
/// windows are sent once one has failed.
pub fn annotate_trajectory(
    backend: &dyn AnnotatorBackend,
    trajectory: &Trajectory,
    goal: &Instruction,
    cfg: &AnnotatorConfig,
    cache: Option<&ResponseCache>,
) -> Result<RewardLabelSet, AnnotatorError> {
    cfg.validate()?;
    let windows = partition_windows(trajectory, cfg.window_size)?;
    let results: Vec<Mutex<Option<Result<Vec<f64>, AnnotatorError>>>> =
        windows.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let workers = cfg.concurrency_limit.min(windows.len());

    // after a failure no new windows are dispatched; ones in flight finish
    let work = || loop {
        if failed.load(Ordering::Relaxed) {
            break;
        }
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(window) = windows.get(i) else { break };
        let r = annotate_window(backend, window, goal, cfg, cache);
        if r.is_err() {
            failed.store(true, Ordering::Relaxed);
        }
        *results[i].lock().expect("result slot") = Some(r);
    };
    if workers <= 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }

    let mut rewards = Vec::with_capacity(trajectory.len());
    // windows are dispatched in order, so every window before an unprocessed
    // one was processed and the first error found is the earliest
    for slot in results {
        match slot.into_inner().expect("result slot") {
            Some(r) => rewards.extend(r?),
            None => unreachable!("a window was skipped without an earlier failure"),
        }
    }
    debug_assert_eq!(rewards.len(), trajectory.len());
    Ok(RewardLabelSet { trajectory_id: trajectory.id.clone(), source: backend.label_source(), rewards })
}

/// Adds `sparse_bonus` to the final transition's dense reward.
pub fn combine_with_sparse(
    dense: &RewardLabelSet,
    trajectory: &Trajectory,
    sparse_bonus: f64,
) -> Result<RewardLabelSet, AnnotatorError> {
    if dense.rewards.len() != trajectory.len() {
        return Err(AnnotatorError::LengthMismatch {
            id: trajectory.id.clone(),
            transitions: trajectory.len(),
            rewards: dense.rewards.len(),
        });
    }
    if trajectory.is_empty() {
        return Err(AnnotatorError::EmptyTrajectory(trajectory.id.clone()));
    }
    let mut rewards = dense.rewards.clone();
    *rewards.last_mut().expect("non-empty") += sparse_bonus;
    Ok(RewardLabelSet { trajectory_id: dense.trajectory_id.clone(), source: LabelSource::Combined, rewards })
}
