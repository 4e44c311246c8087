//! Comparison reward labelers: sparse terminal reward and goal/observation
//! embedding similarity, per frame or over the whole sequence.

use thiserror::Error;

use crate::dataset::{Instruction, LabelSource, RewardLabelSet, Trajectory};
use crate::env::{render, GridState, RgbImage};
use crate::seed;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("trajectory {0:?} has no transitions")]
    EmptyTrajectory(String),
    #[error("embedding dimensions differ: text {text}, frame {frame}")]
    DimensionMismatch { text: usize, frame: usize },
    #[error("embedding provider failed: {0}")]
    Provider(String),
}

/// One observation as handed to an embedding provider: the rendered image
/// plus the symbolic state it was rendered from.
#[derive(Debug, Clone, Copy)]
pub struct Frame<'a> {
    pub state: &'a GridState,
    pub image: &'a RgbImage,
}

/// Joint text/image embedding space. Implementations must be deterministic
/// and safe to share across threads.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BaselineError>;
    fn embed_frame(&self, frame: &Frame<'_>) -> Result<Vec<f64>, BaselineError>;

    /// Render resolution for frames passed to `embed_frame`.
    fn cell_px(&self) -> u32 {
        8
    }
}

const PROGRESS_DIMS: usize = 16;
const PROGRESS_WEIGHT: f64 = 0.95;

/// Deterministic desk-scale embedder.
///
/// Dimensions `0..16` encode sub-task progress: text with `n` sub-tasks maps
/// to `e_0 + e_1 + ... + e_n`, a state with `k` finished sub-tasks to
/// `e_0 + ... + e_k`. The remaining dimensions hold non-negative hashed
/// token features (instruction tokens, or names of objects weighted by
/// proximity to the agent). The progress block carries 95% of the squared
/// norm, which keeps cosine similarity strictly increasing in `k`: a step
/// in `k` moves the progress term by at least `0.95 * (1 - sqrt(6/7))`
/// ~ 0.070, more than the 0.05 the hashed block can contribute.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    dim: usize,
}

impl StubEmbedder {
    pub fn new(dim: usize) -> Result<Self, BaselineError> {
        if dim < PROGRESS_DIMS + 8 {
            return Err(BaselineError::Provider(format!("stub embedder needs dim >= {}", PROGRESS_DIMS + 8)));
        }
        Ok(StubEmbedder { dim })
    }

    fn hashed_slot(&self, token: &str) -> usize {
        PROGRESS_DIMS + (seed::hash_str(token) % (self.dim - PROGRESS_DIMS) as u64) as usize
    }

    fn assemble(&self, progress_steps: usize, hashed: Vec<f64>) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let p = (progress_steps + 1).min(PROGRESS_DIMS);
        let scale = (PROGRESS_WEIGHT / p as f64).sqrt();
        for x in v.iter_mut().take(p) {
            *x = scale;
        }
        let norm = hashed.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rest = (1.0 - PROGRESS_WEIGHT).sqrt();
        if norm > 0.0 {
            for (i, h) in hashed.iter().enumerate() {
                v[PROGRESS_DIMS + i] = rest * h / norm;
            }
        } else {
            // keep unit norm with a fixed direction
            v[PROGRESS_DIMS] = rest;
        }
        v
    }
}

impl Default for StubEmbedder {
    fn default() -> Self {
        StubEmbedder { dim: 64 }
    }
}

impl EmbeddingProvider for StubEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BaselineError> {
        let lower = text.to_lowercase();
        let subtasks = lower.split(" then ").filter(|p| !p.trim().is_empty()).count().max(1);
        let mut hashed = vec![0.0; self.dim - PROGRESS_DIMS];
        for tok in lower.split_whitespace() {
            hashed[self.hashed_slot(tok) - PROGRESS_DIMS] += 1.0;
        }
        Ok(self.assemble(subtasks, hashed))
    }

    fn embed_frame(&self, frame: &Frame<'_>) -> Result<Vec<f64>, BaselineError> {
        let s = frame.state;
        let mut hashed = vec![0.0; self.dim - PROGRESS_DIMS];
        let mut add = |tok: &str, w: f64| hashed[self.hashed_slot(tok) - PROGRESS_DIMS] += w;
        for o in &s.objects {
            let w = match o.pos {
                Some(p) => 1.0 / (1.0 + s.agent.manhattan(p) as f64),
                None => 1.0,
            };
            add(o.color.name(), w);
            add(o.kind.name(), w);
        }
        for r in &s.receptacles {
            add(r.kind.name(), 1.0 / (1.0 + s.agent.manhattan(r.pos) as f64));
        }
        Ok(self.assemble(s.completed as usize, hashed))
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Affine map of a cosine into [0, 1].
fn similarity(a: &[f64], b: &[f64]) -> Result<f64, BaselineError> {
    if a.len() != b.len() {
        return Err(BaselineError::DimensionMismatch { text: b.len(), frame: a.len() });
    }
    Ok((cosine(a, b) + 1.0) / 2.0)
}

fn nonempty(trajectory: &Trajectory) -> Result<(), BaselineError> {
    if trajectory.is_empty() {
        Err(BaselineError::EmptyTrajectory(trajectory.id.clone()))
    } else {
        Ok(())
    }
}

/// Zero everywhere except 1.0 on the final transition.
pub fn sparse_labels(trajectory: &Trajectory) -> Result<RewardLabelSet, BaselineError> {
    nonempty(trajectory)?;
    let mut rewards = vec![0.0; trajectory.len()];
    *rewards.last_mut().expect("non-empty") = 1.0;
    Ok(RewardLabelSet { trajectory_id: trajectory.id.clone(), source: LabelSource::Sparse, rewards })
}

fn embed_state(provider: &dyn EmbeddingProvider, state: &GridState) -> Result<Vec<f64>, BaselineError> {
    let image = render(state, provider.cell_px());
    provider.embed_frame(&Frame { state, image: &image })
}

/// `reward_t = (cos(embed(next_state_t), embed(goal)) + 1) / 2`.
pub fn frame_similarity_labels(
    provider: &dyn EmbeddingProvider,
    trajectory: &Trajectory,
    goal: &Instruction,
) -> Result<RewardLabelSet, BaselineError> {
    nonempty(trajectory)?;
    let text = provider.embed_text(&goal.text)?;
    let rewards = trajectory.states[1..]
        .iter()
        .map(|s| similarity(&embed_state(provider, s)?, &text))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RewardLabelSet { trajectory_id: trajectory.id.clone(), source: LabelSource::FrameSim, rewards })
}

/// One clip-level score from the mean frame embedding over every state of
/// the trajectory, placed on the final transition.
pub fn sequence_similarity_labels(
    provider: &dyn EmbeddingProvider,
    trajectory: &Trajectory,
    goal: &Instruction,
) -> Result<RewardLabelSet, BaselineError> {
    nonempty(trajectory)?;
    let text = provider.embed_text(&goal.text)?;
    let mut mean = vec![0.0; text.len()];
    for s in &trajectory.states {
        let e = embed_state(provider, s)?;
        if e.len() != mean.len() {
            return Err(BaselineError::DimensionMismatch { text: text.len(), frame: e.len() });
        }
        for (m, x) in mean.iter_mut().zip(&e) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= trajectory.states.len() as f64;
    }
    let mut rewards = vec![0.0; trajectory.len()];
    *rewards.last_mut().expect("non-empty") = similarity(&mean, &text)?;
    Ok(RewardLabelSet { trajectory_id: trajectory.id.clone(), source: LabelSource::SeqSim, rewards })
}
